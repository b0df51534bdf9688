"""Command-line driver: gen-data, train-world, train-policy, eval, plot.

Artifacts live under ``--out`` in one sub-directory per command, each holding the
resolved config that produced it:

    data/    train.ltrj test.ltrj [policy.ltrj] manifest.json
    world/   stage1.lasr world.lasr (+ .json sidecars) stage1_log.csv stage2_log.csv
    policy/  policy.lasr (+ .json) train_log.csv
    eval/    comparison.csv per_step.csv rollout.csv report.json
    plot/    error_curves.csv sensors_<strategy>_n<N>.csv
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, parse_assignments
from .environment import (SolverBlowUpError, TrajectoryFormatError, generate_hotspot_dataset,
                          generate_ns_dataset, load_trajectories, save_trajectories)
from .evaluation import compare_strategies
from .grpo import train_policy, train_policy_ppo
from .numerics import (CheckpointFormatError, NonFiniteError, RngStream, checksum, load_checkpoint,
                       module_tensors, save_checkpoint)
from .policy import PolicyConfig, SensingPolicy
from .training import (TrainingDivergedError, rollout_eval, train_stage1, train_stage2, world_store,
                       write_csv)
from .worldmodel import WorldConfig, WorldModel

log = logging.getLogger("activesense")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    """Bad input the user can fix: missing prerequisite, refused overwrite, bad flag."""


# ---------------------------------------------------------------------------
# artifact helpers

def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise UserError(f"missing {path}; run `activesense {hint}` first (with the same --out)")
    return path


def _refuse_overwrite(paths, force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UserError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _stage_dir(out: Path, name: str, cfg: RunConfig) -> Path:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.yaml")
    return d


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_model(path: Path, module: torch.nn.Module, meta: dict, store=None) -> None:
    tensors = dict(module_tensors(module))
    if store is not None:
        tensors.update(store.state_tensors())
    save_checkpoint(path, tensors)
    meta = {**meta, "checksum": checksum(module_tensors(module))}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _load_into(module: torch.nn.Module, path: Path) -> None:
    tensors = load_checkpoint(path)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name not in tensors:
                raise CheckpointFormatError(f"{path} has no tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointFormatError(
                    f"{path}: {name} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(tensors[name])


def _sidecar(path: Path) -> dict:
    side = _require(path.with_suffix(".json"), "the producing command")
    return json.loads(side.read_text())


def load_world(path: Path) -> WorldModel:
    meta = _sidecar(path)
    model = WorldModel(WorldConfig.from_dict(meta["world"]), RngStream(meta["seed"], "init"))
    _load_into(model, path)
    return model


def load_policy(path: Path) -> SensingPolicy:
    meta = _sidecar(path)
    policy = SensingPolicy(PolicyConfig.from_dict(meta["policy"]), RngStream(meta["seed"], "init"),
                           value_head=meta.get("value_head", False))
    _load_into(policy, path)
    return policy


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig, out: Path, force: bool) -> dict:
    d = out / "data"
    train_path, test_path, policy_path = d / "train.ltrj", d / "test.ltrj", d / "policy.ltrj"
    _refuse_overwrite([train_path, test_path, policy_path], force)
    d = _stage_dir(out, "data", cfg)
    seed, frames = cfg["seed"], cfg["env.frames"]
    if cfg["env.kind"] == "ns":
        spec = cfg.domain()
        burn = cfg["env.burn_in"]
        grf = (cfg["env.grf_alpha"], cfg["env.grf_tau"])
        train = generate_ns_dataset(spec, cfg["env.n_train"], frames, seed, burn, "train", *grf)
        test = generate_ns_dataset(spec, cfg["env.n_test"], frames, seed, burn, "test", *grf)
        pool = generate_ns_dataset(spec, cfg["env.n_policy"], frames, seed, burn, "policy", *grf)
        params = {**asdict(spec), "burn_in": burn, "grf_alpha": cfg["env.grf_alpha"], "grf_tau": cfg["env.grf_tau"]}
    else:
        spec = cfg.hotspot()
        train = generate_hotspot_dataset(spec, cfg["env.n_train"], frames, seed, "train")
        test = generate_hotspot_dataset(spec, cfg["env.n_test"], frames, seed, "test")
        pool = generate_hotspot_dataset(spec, cfg["env.n_policy"], frames, seed, "policy")
        params = asdict(spec)
    save_trajectories(train, train_path)
    save_trajectories(test, test_path)
    if pool:
        save_trajectories(pool, policy_path)
    elif policy_path.exists():
        policy_path.unlink()
    manifest = {
        "kind": cfg["env.kind"], "seed": seed, "frames": frames, "params": params,
        "train": {"count": len(train), "seeds": [t.seed for t in train], "sha256": _file_sha(train_path)},
        "test": {"count": len(test), "seeds": [t.seed for t in test], "sha256": _file_sha(test_path)},
    }
    if pool:
        manifest["policy"] = {"count": len(pool), "seeds": [t.seed for t in pool], "sha256": _file_sha(policy_path)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d train + %d test trajectories to %s", len(train), len(test), d)
    return manifest


def _world_meta(cfg: RunConfig, stage: int) -> dict:
    return {"kind": "world", "stage": stage, "seed": cfg["seed"],
            "world": json.loads(cfg.world().to_json()), "train": asdict(cfg.train())}


def cmd_train_world(cfg: RunConfig, out: Path, force: bool, stage: int) -> Path:
    trajs = load_trajectories(_require(out / "data" / "train.ltrj", "gen-data"))
    tc = cfg.train()
    if stage == 1:
        target = out / "world" / "stage1.lasr"
        _refuse_overwrite([target], force)
        d = _stage_dir(out, "world", cfg)
        model = WorldModel(cfg.world(), RngStream(cfg["seed"], "init"))
        store = world_store(model, ("encoder", "decoder"), tc)
        hist = train_stage1(model, trajs, tc, store, on_epoch=_progress("stage 1", tc.stage1_epochs))
        write_csv(d / "stage1_log.csv", hist, ["epoch", "loss", "recon", "kl"])
    else:
        source = _require(out / "world" / "stage1.lasr", "train-world --stage 1")
        target = out / "world" / "world.lasr"
        _refuse_overwrite([target], force)
        d = _stage_dir(out, "world", cfg)
        model = load_world(source)
        store = world_store(model, ("gru", "denoiser"), tc)
        hist = train_stage2(model, trajs, tc, store, on_epoch=_progress("stage 2", tc.stage2_epochs))
        write_csv(d / "stage2_log.csv", hist, ["epoch", "diffusion"])
    save_model(target, model, {**_world_meta(cfg, stage), "world": json.loads(model.cfg.to_json())}, store)
    log.info("saved %s", target)
    return target


def cmd_train_policy(cfg: RunConfig, out: Path, force: bool, algo: str) -> Path:
    model = load_world(_require(out / "world" / "world.lasr", "train-world --stage 2"))
    pool = out / "data" / "policy.ltrj"
    trajs = load_trajectories(pool if pool.exists() else _require(out / "data" / "train.ltrj", "gen-data"))
    target = out / "policy" / "policy.lasr"
    _refuse_overwrite([target], force)
    d = _stage_dir(out, "policy", cfg)
    pc = cfg.policy()
    if pc.latent_dim != model.cfg.latent_dim:
        pc = PolicyConfig.from_dict({**pc.to_dict(), "latent_dim": model.cfg.latent_dim})
    gc = cfg.grpo()
    policy = SensingPolicy(pc, RngStream(cfg["seed"], "init"), value_head=(algo == "ppo"))
    progress = _progress("policy", gc.iterations, key="iteration")
    if algo == "ppo":
        policy, hist = train_policy_ppo(model, trajs, gc, cfg.ppo(), policy, on_iteration=progress)
    else:
        policy, hist = train_policy(model, trajs, gc, policy, on_iteration=progress)
    write_csv(d / "train_log.csv", hist,
              ["iteration", "mean_reward", "mean_lookahead", "tau", "kept_fraction", "surrogate", "lr"])
    meta = {"kind": "policy", "algo": algo, "seed": cfg["seed"], "policy": pc.to_dict(),
            "value_head": algo == "ppo", "grpo": asdict(gc)}
    save_model(target, policy, meta)
    log.info("saved %s", target)
    return target


def cmd_eval(cfg: RunConfig, out: Path, force: bool) -> dict:
    world_path = _require(out / "world" / "world.lasr", "train-world --stage 2")
    policy_path = _require(out / "policy" / "policy.lasr", "train-policy")
    test = load_trajectories(_require(out / "data" / "test.ltrj", "gen-data"))
    target = out / "eval" / "report.json"
    _refuse_overwrite([target], force)
    d = _stage_dir(out, "eval", cfg)
    model, policy = load_world(world_path), load_policy(policy_path)
    seed, k = cfg["seed"], cfg["eval.track_trajectory"]
    if not 0 <= k < len(test):
        raise UserError(f"eval.track_trajectory={k} but the test set has {len(test)} trajectories")
    history_len = cfg["train.history_len"]
    comparison, per_step, rollout, report = [], [], [], {"budgets": {}}
    for n in cfg["eval.budgets"]:
        comp = compare_strategies(model, test, n, seed, policy, history_len=history_len, keep_tracks=True)
        roll = rollout_eval(model, test, n, seed, history_len)
        comparison.extend(comp.rows())
        for name, r in comp.reports.items():
            per_step.extend({"strategy": name, "budget": n, **row} for row in r.rows())
        rollout.extend({"budget": n, **row} for row in roll.rows())
        report["budgets"][str(n)] = {
            "strategies": {name: r.to_dict() for name, r in comp.reports.items()},
            "rollout": roll.to_dict(),
            "improvement_pct": {name: comp.improvement(name) for name in comp.reports if name != "fixed"},
            "tracks": {name: [c.tolist() for c in comp.tracks[name][k]] for name in comp.tracks},
        }
        log.info("N=%d fixed %.4g random %.4g policy %.4g (%.1f%%)", n, comp.reports["fixed"].avg,
                 comp.reports["random"].avg, comp.reports["policy"].avg, comp.improvement("policy"))
    report["track_trajectory"] = k
    write_csv(d / "comparison.csv", comparison,
              ["strategy", "budget", "seed", "in_t", "out_t", "avg", "improvement_pct"])
    write_csv(d / "per_step.csv", per_step, ["strategy", "budget", "t", "mse", "split"])
    write_csv(d / "rollout.csv", rollout, ["budget", "t", "mse", "split"])
    target.write_text(json.dumps(report, sort_keys=True))
    return report


def cmd_plot(cfg: RunConfig, out: Path, force: bool, reports=()) -> list[Path]:
    paths = [Path(p) for p in reports] or [_require(out / "eval" / "report.json", "eval")]
    d = _stage_dir(out, "plot", cfg)
    curves, written = {}, []
    for i, path in enumerate(paths):
        rep = json.loads(_require(path, "eval").read_text())
        tag = f"r{i}_" if len(paths) > 1 else ""
        for n, b in rep["budgets"].items():
            for name, r in {**b["strategies"], "rollout": b["rollout"]}.items():
                curves[f"{tag}{name}_n{n}"] = r["per_step"]
            for name, track in b["tracks"].items():
                rows = [{"t": t, "sensor": s, "x": float(x), "y": float(y)}
                        for t, layout in enumerate(track) for s, (x, y) in enumerate(layout)]
                p = d / f"sensors_{tag}{name}_n{n}.csv"
                write_csv(p, rows, ["t", "sensor", "x", "y"])
                written.append(p)
    lengths = {len(v) for v in curves.values()}
    if len(lengths) != 1:
        raise UserError("reports disagree on trajectory length; plot them separately")
    T = lengths.pop()
    cols = sorted(curves)
    rows = [{"t": t, **{c: float(curves[c][t]) for c in cols}} for t in range(T)]
    write_csv(d / "error_curves.csv", rows, ["t", *cols])
    written.insert(0, d / "error_curves.csv")
    return written


# ---------------------------------------------------------------------------
# entry point

def _progress(what: str, total: int, key: str = "epoch"):
    every = max(1, total // 10)

    def report(rec):
        i = rec[key]
        if i % every == 0 or i == total:
            vals = " ".join(f"{k}={v:.4g}" for k, v in rec.items() if k != key and isinstance(v, float))
            log.info("%s %s %d/%d %s", what, key, i, total, vals)
    return report


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML/JSON file of flat namespaced keys")
    common.add_argument("--preset", help="base defaults: desk, ns-small, hotspot or tiny")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="activesense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate train/test trajectories")
    tw = sub.add_parser("train-world", parents=[common], help="train the world model")
    tw.add_argument("--stage", type=int, choices=(1, 2), required=True)
    tp = sub.add_parser("train-policy", parents=[common], help="train the sensing policy")
    tp.add_argument("--algo", choices=("grpo", "ppo"))
    sub.add_parser("eval", parents=[common], help="compare sensing strategies on the test set")
    pl = sub.add_parser("plot", parents=[common], help="export error curves and sensor tracks as CSV")
    pl.add_argument("reports", nargs="*", help="report.json files (default: <out>/eval/report.json)")
    return p


def resolve_config(args) -> RunConfig:
    overrides = parse_assignments(args.overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    if args.config is not None:
        cfg = RunConfig.load(args.config, overrides)
        if args.preset and args.preset != cfg.preset:
            raise ConfigError(f"--preset {args.preset} conflicts with preset {cfg.preset!r} in {args.config}")
        return cfg
    return RunConfig.build(args.preset or "desk", overrides)


def run(args) -> int:
    cfg = resolve_config(args)
    out = args.out
    if args.command == "gen-data":
        cmd_gen_data(cfg, out, args.force)
    elif args.command == "train-world":
        cmd_train_world(cfg, out, args.force, args.stage)
    elif args.command == "train-policy":
        algo = args.algo or cfg["grpo.algo"]
        if args.algo:
            cfg.update({"grpo.algo": algo})
        cmd_train_policy(cfg, out, args.force, algo)
    elif args.command == "eval":
        cmd_eval(cfg, out, args.force)
    elif args.command == "plot":
        cmd_plot(cfg, out, args.force, args.reports)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except (UserError, ConfigError, TrajectoryFormatError, CheckpointFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USER
    except (TrainingDivergedError, NonFiniteError, SolverBlowUpError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
