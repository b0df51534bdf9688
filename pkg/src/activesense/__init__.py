"""Active sensing for continuum fields: a latent world model plus a learned sensor-motion policy."""
from .environment import DomainSpec, FieldTrajectory, HotspotSpec, SensorLayout
from .evaluation import ComparisonReport, compare_strategies
from .grpo import GrpoConfig, PpoConfig, train_policy, train_policy_ppo
from .policy import PolicyConfig, SensingPolicy
from .training import EvalReport, TrainConfig, rollout_eval, train_stage1, train_stage2
from .worldmodel import FourierConfig, WorldConfig, WorldModel

__version__ = "0.1.0"
