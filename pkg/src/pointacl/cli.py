"""Command-line entry point: ``pointacl <command> [options]``.

Commands write their artifacts plus a JSON run manifest that records the
argument vector, a config snapshot, sha256 digests of every input, the seed,
timestamps and the produced files. Replaying the stored ``argv`` reproduces the
outputs bit for bit.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from pointacl import __version__
from pointacl.attack import MODE_ALIASES, SUPERVISED_CE, AttackConfig
from pointacl.config import ConfigError, TrainConfig, from_mapping, load_config, to_text
from pointacl.dataio import generate_synthetic, load_dataset, load_xyz, save_dataset, save_xyz, split
from pointacl.geometry import DEFAULT_R1, DEFAULT_R2, don_field, high_difference_indices
from pointacl.model import load_checkpoint, save_checkpoint
from pointacl.pipeline import (
    adversarial_full_finetune,
    evaluate,
    linear_finetune,
    mean_feature_divergence,
    pretrain,
)
from pointacl.types import InvalidInput

log = logging.getLogger("pointacl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "run.json"
SWEEP_DEFAULTS = {
    "alpha": [0.0, 1.0, 10.0],
    "steps": [1, 3, 5, 10, 20],
    "epsilon": [0.005, 0.01, 0.02, 0.04],
}
REPORT_COLUMNS = ["sample_id", "clean_pred", "adv_pred", "label", "linf_used"]


class UsageError(Exception):
    pass


# -- run manifests -------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def sha256_tree(path: Path) -> str:
    """Digest of a file, or of every file under a directory in sorted order."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config: str | None = None
    inputs: dict[str, str] = dataclasses.field(default_factory=dict)
    outputs: list[str] = dataclasses.field(default_factory=list)
    metrics: dict = dataclasses.field(default_factory=dict)
    started: str = dataclasses.field(default_factory=_now)
    finished: str = ""
    version: str = __version__

    def add_input(self, path):
        if path:
            self.inputs[str(path)] = sha256_tree(Path(path))

    def write(self, path: Path) -> Path:
        self.finished = _now()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# -- helpers -------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Config file (if any) plus command-line overrides; errors name the key."""
    cfg = load_config(args.config) if getattr(args, "config", None) else (base or TrainConfig())
    overrides = {}
    for key in ("alpha", "beta", "temperature", "seed", "epochs", "data", "out"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return from_mapping(overrides, cfg) if overrides else cfg


def _config_beside(checkpoint: Path) -> TrainConfig:
    snapshot = checkpoint.parent / "config.txt"
    return load_config(snapshot) if snapshot.exists() else TrainConfig()


def _splits(cfg: TrainConfig, data: str | None):
    root = data or cfg.data
    if not root:
        raise UsageError("no dataset given; pass --data or set 'data' in the config")
    ds = load_dataset(root)
    train, test = split(ds, cfg.test_fraction, cfg.seed)
    return ds, train, test


def _write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    classes = [c for c in args.classes.split(",") if c]
    man = RunManifest("gen-data", args.argv, args.seed)
    ds = generate_synthetic(classes, args.per_class, args.points, args.noise, args.seed)
    manifest = save_dataset(ds, out)
    man.outputs = [str(manifest), str(out / "classes.txt"), str(out / "clouds")]
    man.write(out / MANIFEST_NAME)
    print(f"wrote {len(ds)} clouds in {ds.num_classes} classes to {out}")
    return EXIT_OK


def cmd_don(args) -> int:
    src, out = Path(args.input), Path(args.out)
    if not 0 < args.r1 < args.r2:
        raise UsageError(f"need 0 < r1 < r2, got r1={args.r1}, r2={args.r2}")
    if not 0 < args.keep < 1:
        raise UsageError(f"--keep must lie in (0, 1), got {args.keep}")
    man = RunManifest("don", args.argv, None)
    man.add_input(src)
    cloud = load_xyz(src)
    field = don_field(cloud, args.r1, args.r2)
    kept = high_difference_indices(field, args.keep)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_xyz(cloud.with_points(cloud.points[kept]), out)
    sidecar = Path(args.magnitudes) if args.magnitudes else out.with_suffix(out.suffix + ".mag")
    sidecar.write_text("".join(f"{m:.17g}\n" for m in field.magnitudes))
    man.outputs = [str(out), str(sidecar)]
    man.metrics = {"kept": int(len(kept)), "total": len(cloud)}
    man.write(out.with_suffix(out.suffix + ".run.json"))
    print(f"kept {len(kept)} of {len(cloud)} points")
    return EXIT_OK


def _pretrain_run(cfg: TrainConfig, train, num_classes: int, out: Path, man: RunManifest):
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(train.samples, cfg, num_classes=num_classes)
    ckpt = save_checkpoint(result.params, out / "pretrained.npz")
    keys = ["step", "epoch", "lr", "total", "contrastive", "kld_clean_adv", "kld_adv_hd"]
    curve = _write_rows(out / "pretrain_loss.csv", keys, [[_fmt(r[k]) for k in keys] for r in result.loss_curve])
    (out / "config.txt").write_text(to_text(cfg))
    man.outputs += [str(ckpt), str(curve), str(out / "config.txt")]
    return result.params


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out or "runs/pretrain")
    ds, train, _ = _splits(cfg, args.data)
    cfg = cfg.with_(data=str(args.data or cfg.data), out=str(out))
    man = RunManifest("pretrain", args.argv, cfg.seed, to_text(cfg))
    man.add_input(cfg.data)
    if args.config:
        man.add_input(args.config)
    _pretrain_run(cfg, train, ds.num_classes, out, man)
    man.write(out / MANIFEST_NAME)
    print(f"pretrained on {len(train)} clouds; checkpoint in {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _config(args, _config_beside(ckpt))
    out = Path(args.out or ckpt.parent)
    _, train, _ = _splits(cfg, args.data)
    man = RunManifest("finetune", args.argv, cfg.seed, to_text(cfg))
    man.add_input(ckpt)
    man.add_input(args.data or cfg.data)
    params = load_checkpoint(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "linear":
        tuned = linear_finetune(params, train.samples, cfg.finetune_epochs, cfg.finetune_lr,
                                cfg.finetune_batch_size, cfg.seed)
        curve = []
    else:
        res = adversarial_full_finetune(params, train.samples, cfg.finetune_epochs, cfg.finetune_lr,
                                        cfg.eval_attack, cfg.finetune_batch_size, cfg.seed)
        tuned, curve = res.params, list(zip(res.clean_loss, res.adv_loss))
    target = save_checkpoint(tuned, out / f"finetuned_{args.mode}.npz")
    man.outputs.append(str(target))
    if curve:
        rows = [[i, _fmt(c), _fmt(a)] for i, (c, a) in enumerate(curve)]
        man.outputs.append(str(_write_rows(out / "finetune_loss.csv", ["epoch", "clean_loss", "adv_loss"], rows)))
    (out / "config.txt").write_text(to_text(cfg))
    man.write(out / f"finetune_{args.mode}.run.json")
    print(f"{args.mode} finetune done; checkpoint {target}")
    return EXIT_OK


def _eval_attack(cfg: TrainConfig, epsilon=None, steps=None, mode=None) -> AttackConfig:
    changes = {k: v for k, v in (("epsilon", epsilon), ("steps", steps)) if v is not None}
    if mode is not None:
        changes["mode"] = MODE_ALIASES[mode]
        if changes["mode"] != SUPERVISED_CE:
            changes["init_scale"] = cfg.attack.init_scale
    try:
        return cfg.eval_attack.with_(**changes)
    except InvalidInput as exc:
        raise ConfigError("eval_" + next(iter(changes), "attack"), str(exc)) from None


def cmd_attack_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _config(args, _config_beside(ckpt))
    ds, train, test = _splits(cfg, args.data)
    data = {"test": test, "train": train, "all": ds}[args.split]
    attack_cfg = _eval_attack(cfg, args.epsilon, args.steps, args.mode)
    man = RunManifest("attack-eval", args.argv, cfg.seed, to_text(cfg.with_(eval_attack=attack_cfg)))
    man.add_input(ckpt)
    man.add_input(args.data or cfg.data)
    m = evaluate(load_checkpoint(ckpt), data.samples, attack_cfg, seed=cfg.seed)
    rows = [
        [sid, int(c), int(a), int(y), _fmt(l)]
        for sid, c, a, y, l in zip(m.ids, m.clean_pred, m.adv_pred, m.labels, m.linf_used)
    ]
    report = _write_rows(Path(args.report), REPORT_COLUMNS, rows)
    man.outputs.append(str(report))
    man.metrics = {
        "standard_accuracy": m.standard_accuracy,
        "robust_accuracy": m.robust_accuracy,
        "epsilon": attack_cfg.epsilon,
        "steps": attack_cfg.steps,
        "mode": attack_cfg.mode,
        "split": args.split,
        "samples": len(rows),
    }
    man.write(report.with_suffix(report.suffix + ".run.json"))
    print(f"SA {m.standard_accuracy:.4f} RA {m.robust_accuracy:.4f} on {len(rows)} {args.split} clouds")
    return EXIT_OK


def _sweep_values(axis: str, values) -> list:
    values = values or SWEEP_DEFAULTS[axis]
    if axis == "steps":
        if any(v != int(v) or v < 0 for v in values):
            raise UsageError("steps values must be non-negative integers")
        return [int(v) for v in values]
    return [float(v) for v in values]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out or "runs/sweep")
    axes = list(SWEEP_DEFAULTS) if args.axis == "all" else [args.axis]
    if args.values and len(axes) > 1:
        raise UsageError("--values needs a single --axis")
    ds, train, test = _splits(cfg, args.data)
    man = RunManifest("sweep", args.argv, cfg.seed, to_text(cfg))
    man.add_input(args.data or cfg.data)
    tuned = None
    if args.checkpoint:
        man.add_input(args.checkpoint)
        tuned = load_checkpoint(args.checkpoint)
    header = ["axis", "value", "seed", "standard_accuracy", "robust_accuracy", "kld_clean_adv"]
    for axis in axes:
        values = _sweep_values(axis, args.values)
        rows = []
        for v in values:
            if axis == "alpha":
                run_cfg = cfg.with_(alpha=v)
                params = pretrain(train.samples, run_cfg, num_classes=ds.num_classes).params
                params = linear_finetune(params, train.samples, cfg.finetune_epochs, cfg.finetune_lr,
                                         cfg.finetune_batch_size, cfg.seed)
                m = evaluate(params, test.samples, cfg.eval_attack, seed=cfg.seed)
                kld = mean_feature_divergence(params, test.samples, cfg.attack, cfg.seed)
            else:
                if tuned is None:
                    base = pretrain(train.samples, cfg, num_classes=ds.num_classes).params
                    tuned = linear_finetune(base, train.samples, cfg.finetune_epochs, cfg.finetune_lr,
                                            cfg.finetune_batch_size, cfg.seed)
                m = evaluate(tuned, test.samples, _eval_attack(cfg, **{axis: v}), seed=cfg.seed)
                kld = float("nan")
            rows.append([axis, _fmt(v), cfg.seed, _fmt(m.standard_accuracy), _fmt(m.robust_accuracy), _fmt(kld)])
            log.info("sweep %s=%s RA %.4f", axis, v, m.robust_accuracy)
        man.outputs.append(str(_write_rows(out / f"sweep_{axis}.csv", header, rows)))
    man.write(out / MANIFEST_NAME)
    print(f"wrote {len(axes)} sweep table(s) to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise UsageError(f"--runs must be a directory, got {runs}")
    rows = []
    for path in sorted(runs.rglob("*.json")):
        try:
            data = read_manifest(path)
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        metrics = data.get("metrics") or {}
        if "robust_accuracy" not in metrics:
            continue
        rows.append([
            str(path.relative_to(runs)), data.get("command", ""), data.get("seed", ""),
            metrics.get("mode", ""), _fmt(metrics.get("epsilon", "")), metrics.get("steps", ""),
            _fmt(metrics["standard_accuracy"]), _fmt(metrics["robust_accuracy"]),
        ])
    header = ["run", "command", "seed", "mode", "epsilon", "steps", "standard_accuracy", "robust_accuracy"]
    _write_rows(Path(args.out), header, rows)
    print(f"collected {len(rows)} evaluation run(s) into {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_training_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float, help="weight of KL(h1 || h_adv)")
    p.add_argument("--beta", type=float, help="weight of KL(h_adv || h_hd)")
    p.add_argument("--temperature", type=float, help="contrastive temperature")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointacl", description="Adversarial contrastive pretraining for point clouds.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--classes", required=True, help="comma-separated shape names")
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("don", help="difference-of-normals selection for one XYZ cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--r1", type=float, default=DEFAULT_R1)
    p.add_argument("--r2", type=float, default=DEFAULT_R2)
    p.add_argument("--keep", type=float, default=0.75, help="fraction of points kept")
    p.add_argument("--out", required=True, help="XYZ file for the kept points")
    p.add_argument("--magnitudes", help="per-point magnitude file (default: <out>.mag)")
    p.set_defaults(func=cmd_don)

    p = sub.add_parser("pretrain", help="adversarial contrastive pretraining")
    _add_training_overrides(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a classifier on a pretrained encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["linear", "aff"], default="linear",
                   help="linear head on a frozen encoder, or adversarial full finetuning")
    _add_training_overrides(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("attack-eval", help="standard and robust accuracy under an l-inf attack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=["ce", "kld"])
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--report", required=True, help="per-sample CSV")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_attack_eval)

    p = sub.add_parser("sweep", help="robust accuracy over an alpha, steps or epsilon grid")
    p.add_argument("--axis", choices=["alpha", "steps", "epsilon", "all"], default="all")
    p.add_argument("--values", type=_floats, help="comma-separated grid (defaults per axis)")
    p.add_argument("--checkpoint", help="finetuned model for the steps and epsilon grids")
    _add_training_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="collect evaluation manifests into one CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def route(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"pointacl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInput, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"pointacl {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(route())


if __name__ == "__main__":
    main()
