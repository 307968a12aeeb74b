"""Command line entry point: ``taxelgraph <command> [flags]``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then flags. Every output embeds the effective settings
so a run can be repeated with ``taxelgraph rerun <output file>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baoding2d import LEVELS, Geometry, ObsMode, TaskConfig
from .diffcore import CKPT_MAGIC, CheckpointError, NonFiniteError, read_checkpoint, write_checkpoint
from .perception import load_regressor, make_regressor, train_test_split_indices
from .ppo import PolicyParams, PpoConfig, evaluate_policy
from .tactilesim import DatasetFormatError, OBJECT_KINDS, generate_grasp_dataset, get_layout, read_dataset, \
    write_dataset
from .workflow import (WorkflowConfig, IterationRecord, bench_csv, curves_csv, final_reward, levels_csv,
                       run_alternating_training, run_baseline_comparison, run_input_ablations, run_task_levels,
                       train_policy, write_manifest)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _words(text: str) -> tuple:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


@dataclass(frozen=True)
class Opt:
    type: object
    default: object
    help: str = ""


_PPO = {
    "hidden": Opt(_ints, "64,64", "policy/value hidden widths"),
    "n_envs": Opt(int, 16, "parallel environments"),
    "rollout_length": Opt(int, 128, "steps per environment per update"),
    "gamma": Opt(float, 0.95, "discount"),
    "gae_lambda": Opt(float, 0.95, "GAE lambda"),
    "clip_epsilon": Opt(float, 0.2, "PPO clip range"),
    "ppo_epochs": Opt(int, 4, "optimization epochs per update"),
    "minibatch_size": Opt(int, 256, "PPO minibatch size"),
    "policy_lr": Opt(float, 1e-3, "Adam learning rate for the policy"),
    "entropy_coefficient": Opt(float, 0.0, "entropy bonus weight"),
    "value_coefficient": Opt(float, 0.5, "value loss weight"),
}
_SEED = {"seed": Opt(int, None, "random seed (default: $TAXELGRAPH_SEED or 0)"),
         "threads": Opt(int, 1, "worker cap (runs are single threaded)")}

COMMANDS = {
    "gen-data": {
        "layout": Opt(str, "desk88", "taxel layout id"),
        "object": Opt(str, "sphere", "object kind"),
        "n": Opt(int, 100, "number of samples"),
        "noise": Opt(float, 0.1, "multiplicative pressure noise fraction"),
        **_SEED,
    },
    "train-perception": {
        "data": Opt(str, None, "dataset file"),
        "kind": Opt(str, "tacgnn", "tacgnn | mlp | cnn | gcn"),
        "epochs": Opt(int, 50, "training epochs"),
        "batch_size": Opt(int, 64, "minibatch size"),
        "learning_rate": Opt(float, 1e-3, "Adam learning rate"),
        "n": Opt(int, 0, "use only the first n samples (0: all)"),
        **_SEED,
    },
    "bench": {
        "data": Opt(str, None, "dataset file"),
        "kinds": Opt(_words, "tacgnn,mlp", "model kinds"),
        "seeds": Opt(_ints, "0,1,2", "seeds"),
        "epochs": Opt(int, 20, "training epochs per model"),
        **_SEED,
    },
    "train-policy": {
        "mode": Opt(str, "groundtruth", "groundtruth | no_perception | noise<mm> | tacgnn | finger_torque"),
        "perception": Opt(str, "", "perception checkpoint (tacgnn mode)"),
        "level": Opt(str, "simple", "task level"),
        "updates": Opt(int, 300, "PPO updates"),
        **_PPO, **_SEED,
    },
    "workflow": {
        "kind": Opt(str, "tacgnn", "perception model kind"),
        "threshold": Opt(int, 5000, "buffer size that triggers perception retraining"),
        "epochs": Opt(int, 10, "perception epochs per retraining"),
        "iterations": Opt(int, 4, "outer iterations"),
        "stage_updates": Opt(int, 75, "PPO updates per outer iteration"),
        "level": Opt(str, "simple", "task level"),
        **_PPO, **_SEED,
    },
    "eval": {
        "policy": Opt(str, "", "policy checkpoint (empty: uniform random actions)"),
        "mode": Opt(str, "", "observation mode (default: the policy's)"),
        "perception": Opt(str, "", "perception checkpoint (tacgnn mode)"),
        "levels": Opt(_words, "simple,middle,hard", "task levels"),
        "episodes": Opt(int, 500, "episodes per level and seed"),
        "seeds": Opt(_ints, "0", "evaluation seeds"),
        **_SEED,
    },
    "ablate": {
        "modes": Opt(_words, "groundtruth,no_perception,noise2,noise10", "observation modes"),
        "perception": Opt(str, "", "perception checkpoint (tacgnn mode)"),
        "level": Opt(str, "simple", "task level"),
        "updates": Opt(int, 300, "PPO updates per mode"),
        **_PPO, **_SEED,
    },
}


def default_seed() -> int:
    raw = os.environ.get("TAXELGRAPH_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TAXELGRAPH_SEED must be an integer, got {raw!r}") from None


def read_config_file(path) -> dict[str, str]:
    """``key=value`` pairs from a config file or from any output that embeds one."""
    text = Path(path).read_text()
    lines = text.splitlines()
    out = {}
    if lines and lines[0].startswith(CKPT_MAGIC):
        _, meta = read_checkpoint(path)
        return {k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}
    tagged = any(l.startswith(("# config ", "config.")) for l in lines)
    for line in lines:
        s = line.strip()
        if s.startswith("# config "):
            s = s[len("# config "):]
        elif s.startswith("config."):
            s = s[len("config."):]
        elif tagged or not s or s.startswith("#") or "=" not in s:
            continue
        k, _, v = s.partition("=")
        out[k.strip()] = v.strip()
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, file and flags for one command; type-check everything."""
    opts = COMMANDS[command]
    file_values = dict(file_values)
    embedded = file_values.pop("command", command)
    if embedded != command:
        raise UsageError(f"config was written by {embedded!r}, not {command!r}")
    unknown = set(file_values) - set(opts)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    cfg = {}
    for key, opt in opts.items():
        raw = flag_values.get(key)
        if raw is None:
            raw = file_values.get(key, opt.default)
        if raw is None and key == "seed":
            raw = default_seed()
        try:
            cfg[key] = None if raw is None else opt.type(raw)
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {key}: {raw!r}") from None
    return cfg


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_lines(command: str, cfg: dict) -> list[str]:
    return [f"command={command}"] + [f"{k}={_fmt_value(v)}" for k, v in cfg.items()]


def csv_with_config(command: str, cfg: dict, body: str) -> str:
    return "".join(f"# config {line}\n" for line in config_lines(command, cfg)) + body


def ckpt_meta(command: str, cfg: dict) -> dict:
    meta = {"cfg.command": command}
    meta.update({f"cfg.{k}": _fmt_value(v) for k, v in cfg.items()})
    return meta


def _ppo_config(cfg: dict) -> PpoConfig:
    return PpoConfig(gamma=cfg["gamma"], gae_lambda=cfg["gae_lambda"], clip_epsilon=cfg["clip_epsilon"],
                     epochs_per_update=cfg["ppo_epochs"], minibatch_size=cfg["minibatch_size"],
                     rollout_length=cfg["rollout_length"], n_envs=cfg["n_envs"],
                     entropy_coefficient=cfg["entropy_coefficient"], value_coefficient=cfg["value_coefficient"],
                     learning_rate=cfg["policy_lr"], hidden=cfg["hidden"])


def _mode(text: str, perception: str) -> ObsMode:
    model = load_regressor(perception) if perception else None
    try:
        return ObsMode.parse(text, model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_level(level: str) -> None:
    if level not in LEVELS:
        raise UsageError(f"unknown level {level!r}; expected one of {', '.join(LEVELS)}")


def save_policy(path, policy: PolicyParams, mode: ObsMode, meta: dict) -> None:
    m = {"kind": "policy", "mode": mode.label}
    m.update(meta)
    write_checkpoint(path, policy.tensors(), m)


def load_policy(path) -> tuple[PolicyParams, str]:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{path} is not a policy checkpoint")
    return PolicyParams.from_tensors(tensors), meta.get("mode", "groundtruth")


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> str:
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    if cfg["object"] not in OBJECT_KINDS:
        raise UsageError(f"unknown object {cfg['object']!r}")
    try:
        layout = get_layout(cfg["layout"])
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    ds = generate_grasp_dataset(layout, cfg["object"], cfg["n"], cfg["seed"], cfg["noise"])
    write_dataset(ds, out)
    manifest = out.with_name(out.name + ".manifest")
    Path(manifest).write_text("\n".join(f"config.{line}" for line in config_lines("gen-data", cfg)) + "\n")
    counts = np.array([len(f.ids) for f in ds.frames])
    return (f"wrote {len(ds)} samples to {out} (active taxels per frame: min {counts.min()}, "
            f"median {np.median(counts):g}, max {counts.max()})")


def _load_data(path: str):
    if not path:
        raise UsageError("--data is required")
    return read_dataset(path)


def cmd_train_perception(cfg: dict, out: Path) -> str:
    ds = _load_data(cfg["data"])
    if cfg["n"]:
        ds = ds.subset(range(min(cfg["n"], len(ds))))
    if cfg["kind"] not in ("tacgnn", "mlp", "cnn", "gcn"):
        raise UsageError(f"unknown model kind {cfg['kind']!r}")
    if cfg["epochs"] < 0:
        raise UsageError("--epochs must be >= 0")
    layout = get_layout(ds.layout_id)
    est = make_regressor(cfg["kind"], layout, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                         learning_rate=cfg["learning_rate"], random_state=cfg["seed"])
    X = ds.frames if cfg["kind"] == "tacgnn" else ds.raw
    pick = (lambda idx: [X[i] for i in idx]) if cfg["kind"] == "tacgnn" else (lambda idx: X[idx])
    if len(ds) > 1:
        tr, te = train_test_split_indices(len(ds), cfg["seed"])
    else:
        tr, te = np.arange(len(ds)), np.arange(0)
    Y = ds.labels
    est.fit(pick(tr), Y[tr], pick(te) if len(te) else None, Y[te] if len(te) else None)
    est.save(out)
    # append the effective config to the checkpoint header
    tensors, meta = read_checkpoint(out)
    meta.update(ckpt_meta("train-perception", cfg))
    write_checkpoint(out, tensors, meta)
    h = est.history_
    rows = ["epoch,train_rmse,test_rmse"]
    for e, tr_r in enumerate(h.train_rmse):
        te_r = h.test_rmse[e] if h.test_rmse else float("nan")
        rows.append(f"{e + 1},{tr_r!r},{te_r!r}")
    report = out.with_name(out.name + ".csv")
    report.write_text(csv_with_config("train-perception", cfg, "\n".join(rows) + "\n"))
    last = h.train_rmse[-1] if h.train_rmse else h.initial_train_rmse
    return f"saved {cfg['kind']} checkpoint to {out}; final train RMSE {last:.6g}"


def cmd_bench(cfg: dict, out: Path) -> str:
    ds = _load_data(cfg["data"])
    kinds = cfg["kinds"]
    bad = [k for k in kinds if k not in ("tacgnn", "mlp", "cnn", "gcn")]
    if bad:
        raise UsageError(f"unknown model kind {bad[0]!r}")
    rows = run_baseline_comparison(ds, kinds, cfg["epochs"], cfg["seeds"], get_layout(ds.layout_id),
                                   split_seed=cfg["seed"])
    body = bench_csv(rows)
    out.write_text(csv_with_config("bench", cfg, body))
    return body.rstrip()


def cmd_train_policy(cfg: dict, out: Path) -> str:
    _check_level(cfg["level"])
    mode = _mode(cfg["mode"], cfg["perception"])
    policy, recs = train_policy(mode, cfg["updates"], _ppo_config(cfg), cfg["level"], cfg["seed"])
    save_policy(out, policy, mode, ckpt_meta("train-policy", cfg))
    curve = out.with_name(out.name + ".csv")
    curve.write_text(csv_with_config("train-policy", cfg, curves_csv({mode.label: recs})))
    return f"saved policy to {out}; final mean reward {final_reward(recs):.4g}"


def cmd_workflow(cfg: dict, out: Path) -> str:
    _check_level(cfg["level"])
    wc = WorkflowConfig(perception_kind=cfg["kind"], buffer_threshold=cfg["threshold"],
                        perception_epochs=cfg["epochs"], max_outer_iterations=cfg["iterations"],
                        stage_updates=cfg["stage_updates"], level=cfg["level"], seed=cfg["seed"],
                        ppo=_ppo_config(cfg))
    res = run_alternating_training(wc, Geometry())
    out.mkdir(parents=True, exist_ok=True)
    meta = ckpt_meta("workflow", cfg)
    pol_path, per_path = out / "policy.ckpt", out / "perception.ckpt"
    save_policy(pol_path, res.policy, ObsMode("tacgnn", model=res.perception), meta)
    res.perception.save(per_path)
    tensors, pmeta = read_checkpoint(per_path)
    pmeta.update(meta)
    write_checkpoint(per_path, tensors, pmeta)
    hist = out / "history.csv"
    hist.write_text(csv_with_config("workflow", cfg, "\n".join(
        [IterationRecord.HEADER] + [r.csv() for r in res.history]) + "\n"))
    curve = out / "curve.csv"
    curve.write_text(csv_with_config("workflow", cfg, curves_csv({"tacgnn": res.curve})))
    write_manifest(out / "manifest.txt", dict(l.split("=", 1) for l in config_lines("workflow", cfg)),
                   [cfg["seed"]], [pol_path, per_path, hist, curve])
    return "\n".join(r.csv() for r in res.history)


def cmd_eval(cfg: dict, out: Path) -> str:
    policy, mode_name = (load_policy(cfg["policy"]) if cfg["policy"] else (None, "groundtruth"))
    mode = _mode(cfg["mode"] or mode_name, cfg["perception"])
    for lv in cfg["levels"]:
        _check_level(lv)
    if cfg["episodes"] < 1:
        raise UsageError("--episodes must be >= 1")
    if policy is not None and policy.obs_dim != 12 + mode.object_width:
        raise UsageError(f"policy expects {policy.obs_dim} inputs but mode {mode.label} gives "
                         f"{12 + mode.object_width}")
    rows = run_task_levels(policy, cfg["levels"], cfg["episodes"], cfg["seeds"], mode)
    body = levels_csv(rows)
    out.write_text(csv_with_config("eval", cfg, body))
    return body.rstrip()


def cmd_ablate(cfg: dict, out: Path) -> str:
    _check_level(cfg["level"])
    modes = [_mode(m, cfg["perception"]) for m in cfg["modes"]]
    curves = run_input_ablations(modes, cfg["updates"], _ppo_config(cfg), cfg["level"], cfg["seed"])
    out.write_text(csv_with_config("ablate", cfg, curves_csv(curves)))
    return "\n".join(f"{k}: final mean reward {final_reward(v):.4g}" for k, v in curves.items())


HANDLERS = {"gen-data": cmd_gen_data, "train-perception": cmd_train_perception, "bench": cmd_bench,
            "train-policy": cmd_train_policy, "workflow": cmd_workflow, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taxelgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file or any output with an embedded config")
        p.add_argument("--out", required=True, help="output path (a directory for workflow)")
        for key, opt in opts.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=opt.help)
    p = sub.add_parser("rerun", help="repeat a run from the config embedded in one of its outputs")
    p.add_argument("source")
    p.add_argument("--out", required=True)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            file_values = read_config_file(args.source)
            command = file_values.get("command")
            if command not in COMMANDS:
                raise UsageError(f"{args.source} has no embedded config")
            flags = {}
        else:
            command = args.command
            file_values = read_config_file(args.config) if args.config else {}
            flags = {k: getattr(args, k) for k in COMMANDS[command]}
        cfg = resolve_config(command, file_values, flags)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        message = HANDLERS[command](cfg, out)
    except NonFiniteError as exc:
        print(f"taxelgraph: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"taxelgraph: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # UsageError and invalid settings caught by the modules
        print(f"taxelgraph: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(message)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
