import csv
import json
import shutil

import pytest
import yaml

from activesense.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USER, _file_sha, main
from activesense.config import DEFAULTS, ConfigError, RunConfig, parse_assignments

TINY = ["--preset", "tiny", "-q", "--set", "env.kind=hotspot"]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- config

def test_defaults_build_and_validate():
    cfg = RunConfig.build()
    assert cfg.grpo().clip == 0.2 and cfg.grpo().horizon == 3 and cfg.world().n_latents == 32
    assert cfg.policy().latent_dim == cfg.world().latent_dim


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="grpo.clipp"):
        RunConfig.build("desk", {"grpo.clipp": 0.1})
    with pytest.raises(ConfigError):
        RunConfig.build("nope")


def test_value_coercion_and_validation():
    cfg = RunConfig.build("desk", {"grpo.lr_start": "1e-3", "grpo.filtering": "false", "eval.budgets": "[8, 4]"})
    assert cfg["grpo.lr_start"] == 1e-3 and cfg["grpo.filtering"] is False and cfg["eval.budgets"] == [8, 4]
    with pytest.raises(ConfigError):
        RunConfig.build("desk", {"env.height": "big"})
    with pytest.raises(ConfigError):
        RunConfig.build("desk", {"grpo.groups": 1})
    with pytest.raises(ConfigError):
        RunConfig.build("desk", {"env.kind": "ocean"})


def test_nested_file_and_preset(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"preset": "tiny", "grpo": {"groups": 6}, "seed": 5}))
    cfg = RunConfig.load(path)
    assert cfg.preset == "tiny" and cfg["grpo.groups"] == 6 and cfg["seed"] == 5
    back = RunConfig.load(_dump(cfg, tmp_path / "back.yaml"))
    assert back.to_dict() == cfg.to_dict()
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def _dump(cfg, path):
    cfg.dump(path)
    return path


def test_parse_assignments():
    assert parse_assignments(["a.b=1", " c = x "]) == {"a.b": "1", "c": "x"}
    with pytest.raises(ConfigError):
        parse_assignments(["novalue"])


def test_every_default_key_is_namespaced():
    assert all(k == "seed" or "." in k for k in DEFAULTS)


# -- CLI pipeline

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = [*TINY, "--out", str(out), "--seed", "3"]
    for cmd in (["gen-data"], ["train-world", "--stage", "1"], ["train-world", "--stage", "2"],
                ["train-policy"], ["eval"], ["plot"]):
        assert main([*cmd, *args]) == EXIT_OK, cmd
    return out


def test_pipeline_writes_resolved_config(run_dir):
    for stage in ("data", "world", "policy", "eval", "plot"):
        cfg = yaml.safe_load((run_dir / stage / "config.yaml").read_text())
        assert cfg["seed"] == 3 and cfg["preset"] == "tiny" and cfg["env.kind"] == "hotspot"


def test_manifest_records_data(run_dir):
    m = json.loads((run_dir / "data" / "manifest.json").read_text())
    assert m["train"]["count"] == 4 and m["test"]["count"] == 2
    assert m["train"]["sha256"] == _file_sha(run_dir / "data" / "train.ltrj")


def test_eval_outputs(run_dir):
    comp = _rows(run_dir / "eval" / "comparison.csv")
    assert {r["strategy"] for r in comp} == {"fixed", "random", "policy"}
    assert {r["budget"] for r in comp} == {"8", "4"}
    assert len(_rows(run_dir / "eval" / "per_step.csv")) == 3 * 2 * 8


def test_plot_row_counts(run_dir):
    curves = _rows(run_dir / "plot" / "error_curves.csv")
    assert len(curves) == 8
    sensors = _rows(run_dir / "plot" / "sensors_policy_n8.csv")
    assert len(sensors) == 8 * 8
    assert {int(r["t"]) for r in sensors} == set(range(8))


def test_refuses_overwrite_without_force(run_dir):
    before = (run_dir / "data" / "train.ltrj").read_bytes()
    assert main(["gen-data", *TINY, "--out", str(run_dir), "--seed", "9"]) == EXIT_USER
    assert (run_dir / "data" / "train.ltrj").read_bytes() == before


def test_eval_does_not_touch_checkpoints(run_dir):
    paths = [run_dir / "world" / "world.lasr", run_dir / "policy" / "policy.lasr"]
    before = [p.read_bytes() for p in paths]
    assert main(["eval", *TINY, "--out", str(run_dir), "--seed", "3", "--force"]) == EXIT_OK
    assert [p.read_bytes() for p in paths] == before


def test_gen_data_deterministic_and_nu_recorded(tmp_path):
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["gen-data", "--preset", "tiny", "-q", "--out", str(out), "--set", "env.nu=0.002"]
        assert main(args) == EXIT_OK
        m = json.loads((out / "data" / "manifest.json").read_text())
        assert m["params"]["nu"] == 0.002
        hashes.append(m["train"]["sha256"])
    assert hashes[0] == hashes[1]


def test_missing_prerequisite_names_path(tmp_path, caplog):
    assert main(["train-world", "--stage", "1", *TINY, "--out", str(tmp_path)]) == EXIT_USER
    assert str(tmp_path / "data" / "train.ltrj") in caplog.text and "gen-data" in caplog.text


def test_user_errors_exit_one(tmp_path):
    assert main(["gen-data", "--preset", "tiny", "-q", "--out", str(tmp_path), "--set", "bogus.key=1"]) == EXIT_USER
    assert main(["gen-data", "-q", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path)]) == EXIT_USER
    assert main(["gen-data", "--preset", "tiny", "-q", "--out", str(tmp_path), "--seed", "-1"]) == EXIT_USER


def test_corrupt_checkpoint_is_user_error(run_dir, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(run_dir, out)
    (out / "world" / "world.lasr").write_bytes(b"junk")
    assert main(["train-policy", *TINY, "--out", str(out), "--force"]) == EXIT_USER


def test_solver_blowup_exits_two(tmp_path):
    args = ["gen-data", "--preset", "tiny", "-q", "--out", str(tmp_path),
            "--set", "env.dt=50", "--set", "env.nu=0", "--set", "env.forcing_amp=1e4"]
    assert main(args) == EXIT_NUMERIC
