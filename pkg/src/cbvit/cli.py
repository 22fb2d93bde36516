"""Command-line front end: train, sweep, analyze, gradcheck, make-dataset.

Configuration is a flat ``key = value`` text file with dotted keys
(``cb.site = mlp_end``).  Any key can be overridden on the command line with
``--key value``; a run's ``run_manifest.json`` is itself accepted by
``--config`` so a run can be repeated from its manifest.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__, analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import model_gradient_check
from .model import CBPlacement, ConfigError, ModelConfig, ViT, parameter_shapes, upper_layers
from .training import (
    TrainConfig,
    TrainingDiverged,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
    thread_limit,
    train,
    write_metrics_csv,
)

log = logging.getLogger("cbvit")

COMMANDS = ("train", "sweep", "analyze", "gradcheck", "make-dataset")
PARAM_CAP = 50_000

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "cb")
CB_KEYS = tuple(f"cb.{f.name}" for f in dataclasses.fields(CBPlacement))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))

DEFAULTS: dict[str, Any] = {
    **{k: getattr(ModelConfig(), k) for k in MODEL_KEYS},
    **{f"cb.{f.name}": getattr(CBPlacement(), f.name) for f in dataclasses.fields(CBPlacement)},
    **{k: getattr(TrainConfig(), k) for k in TRAIN_KEYS},
    "data.path": None,
    "data.n": 2000,
    "data.seed": 0,
    "data.noise": 0.04,
    "sweep.axis": "site",
    "sweep.values": None,
    "analyze.checkpoints": None,
    "analyze.tags": None,
    "analyze.batch": 64,
    "analyze.exclude_class_token": False,
    "analyze.exclude_last_layers": 1,
    "analyze.renormalize": False,
    "analyze.scaling_stats": True,
    "gradcheck.coords": 50,
    "gradcheck.batch": 3,
    "gradcheck.trials": 10_000,
    "gradcheck.max_n": 32,
    "gradcheck.lambdas": (0.5, 1.0, 2.0),
}

# gradcheck must stay under PARAM_CAP, so its defaults are a tiny model
COMMAND_DEFAULTS = {
    "gradcheck": {"image_size": 8, "patch_size": 4, "depth": 2, "dim": 8, "heads": 2, "init_std": 0.3},
    "make-dataset": {"data.path": None},
}

SWEEP_AXES = {
    "site": ("front", "mid", "end"),
    "block": ("mlp", "msa", "both"),
    "layers": ("all", "upper"),
    "aggregation": ("mean", "max", "class"),
    "heads": (1, 2, 4, 8),
    "extra_block": ("none", "msa", "mlp"),
}
SWEEP_COLUMNS = ("axis", "value", "final_loss", "top1", "entropy_lower", "entropy_upper", "mid_end_max_logit_diff")


class UsageError(Exception):
    """Bad config file, unknown key, or invalid value; exit status 2."""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def parse_value(text: str) -> Any:
    s = text.strip()
    low = s.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    if "," in s:
        return tuple(parse_value(p) for p in s.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_config_file(path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        values = doc.get("config", doc)
        return {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(value)
    return out


def parse_overrides(tokens: Sequence[str]) -> dict[str, Any]:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            i += 1
            value = tokens[i]
        out[key.replace("-", "_") if "." not in key else key] = parse_value(value)
        i += 1
    return out


def resolve_config(command: str, file_values: dict, overrides: dict) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    for source in (file_values, overrides):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key: {key}")
            cfg[key] = value
    return cfg


def _tuple(v) -> Optional[tuple]:
    if v is None:
        return None
    return tuple(v) if isinstance(v, (tuple, list)) else (v,)


def model_config_from(cfg: dict) -> ModelConfig:
    cb = {k[3:]: cfg[k] for k in CB_KEYS}
    mask = cb["layer_mask"]
    if mask == "upper":
        mask = upper_layers(cfg["depth"])
    elif mask == "all":
        mask = None
    cb["layer_mask"] = _tuple(mask)
    try:
        return ModelConfig(cb=CBPlacement(**cb), **{k: cfg[k] for k in MODEL_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def train_config_from(cfg: dict) -> TrainConfig:
    kw = {k: cfg[k] for k in TRAIN_KEYS}
    kw["betas"] = _tuple(kw["betas"])
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def dataset_from(cfg: dict, mc: ModelConfig):
    if cfg["data.path"]:
        path = Path(cfg["data.path"])
        if not path.is_file():
            raise UsageError(f"dataset file not found: {path}")
        ds = load_dataset(path)
        if ds.images.shape[1:] != (mc.image_size, mc.image_size, mc.channels):
            raise UsageError(f"dataset images {ds.images.shape[1:]} do not fit the model input size")
        return ds
    try:
        return make_synthetic_dataset(
            cfg["data.seed"], cfg["data.n"], mc.image_size, mc.num_classes, mc.channels, cfg["data.noise"]
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from exc


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    return v


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, threads: int, artifacts: Sequence[Path], status: str) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "threads": threads,
        "out_dir": str(out),
        "status": status,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "artifacts": {str(p.relative_to(out)): sha256_file(p) for p in sorted(artifacts)},
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict, out: Path) -> tuple[int, list[Path]]:
    mc, tc = model_config_from(cfg), train_config_from(cfg)
    ds = dataset_from(cfg, mc)
    result = train(mc, tc, ds, on_epoch=lambda m: print(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  top1 {m.top1:.4f}"))
    metrics = out / "metrics.csv"
    write_metrics_csv(metrics, result.metrics)
    ck = save_checkpoint(result.model, out / "checkpoint")
    return 0, [metrics, ck, ck.with_suffix(".bin")]


def sweep_points(cfg: dict) -> list[tuple[Any, ModelConfig]]:
    """Every (value, model config) of the sweep, validated before any training."""
    axis = cfg["sweep.axis"]
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    values = _tuple(cfg["sweep.values"]) or SWEEP_AXES[axis]
    variant = cfg["cb.variant"] if cfg["cb.variant"] != "none" else "cb"
    points = []
    for value in values:
        c = dict(cfg)
        if axis == "site":
            c["cb.variant"], c["cb.site"] = variant, {"front": "mlp_front", "mid": "mlp_mid", "end": "mlp_end"}.get(value, value)
        elif axis == "block":
            c["cb.variant"], c["cb.site"] = variant, {"mlp": "mlp_end", "both": "both_mlp_msa"}.get(value, value)
        elif axis == "layers":
            c["cb.variant"], c["cb.layer_mask"] = variant, value
        elif axis == "aggregation":
            c["cb.variant"], c["cb.aggregation"] = variant, value
        elif axis == "heads":
            c["heads"] = value
        else:
            c["extra_block"] = value
        try:
            points.append((value, model_config_from(c)))
        except UsageError as exc:
            raise UsageError(f"sweep {axis}={value}: {exc}") from exc
    return points


def mid_end_discrepancy(model: ViT, images: np.ndarray) -> float:
    """Max |logit| gap of the same weights under the mid and end placements, in float64."""
    base = model.config.replace(**{"cb.variant": "cb"})
    results = []
    for site in ("mlp_mid", "mlp_end"):
        cfg = base.replace(**{"cb.site": site})
        keep = {n: model.params[n] for n in parameter_shapes(cfg)}
        m = ViT(cfg, dtype=model.dtype, params=keep, pixel_mean=model.pixel_mean, pixel_std=model.pixel_std)
        results.append(m.astype(np.float64)(images.astype(np.float64)))
    return float(np.abs(results[0] - results[1]).max())


def cmd_sweep(cfg: dict, out: Path) -> tuple[int, list[Path]]:
    points = sweep_points(cfg)
    tc = train_config_from(cfg)
    ds = dataset_from(cfg, points[0][1])
    probe = ds.images[: tc.analysis_batch]
    rows = []
    for value, mc in points:
        print(f"sweep {cfg['sweep.axis']}={value}")
        res = train(mc, tc, ds)
        ent = res.final.entropy[: mc.depth]
        half = mc.depth // 2
        rows.append(
            {
                "axis": cfg["sweep.axis"],
                "value": value,
                "final_loss": res.final.train_loss,
                "top1": res.final.top1,
                "entropy_lower": float(np.mean(ent[:half])) if half else float("nan"),
                "entropy_upper": float(np.mean(ent[half:])),
                "mid_end_max_logit_diff": mid_end_discrepancy(res.model, probe),
            }
        )
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return 0, [path]


def analyze_rows(model: ViT, images: np.ndarray, tag: str, cfg: dict) -> list[dict]:
    _, records = model.forward(images)
    mc = model.config
    prof = analysis.entropy_profile(
        records,
        exclude_class_token=cfg["analyze.exclude_class_token"],
        exclude_last_layers=cfg["analyze.exclude_last_layers"],
        model_tag=tag,
    )
    entropy = dict(zip(prof.layers, prof.per_layer))
    dist = analysis.layer_distances(records, mc.grid, renormalize=cfg["analyze.renormalize"])
    nuc = analysis.nuclear_norm_stats(records, mc.scale)
    scaling = {}
    if cfg["analyze.scaling_stats"] and mc.cb.variant == "cb_s":
        scaling = {s.layer: s for s in analysis.scaling_stats(model.scaling_weights())}
    rows = []
    for layer in sorted(dist):
        s = scaling.get(layer)
        if not cfg["analyze.scaling_stats"]:
            ratio = mean = ""
        elif s is None:
            ratio = mean = "n/a"
        else:
            ratio = "n/a" if s.ratio is None else s.ratio
            mean = s.mean
        rows.append(
            {
                "model_tag": tag,
                "layer": layer,
                "mean_entropy": entropy.get(layer, "excluded"),
                "max_entropy_bound": prof.bound,
                "relative_distance": dist[layer],
                "lambda_ratio": ratio,
                "lambda_mean": mean,
                "nuclear_norm_mean": nuc[layer][0],
                "nuclear_norm_max": nuc[layer][1],
            }
        )
    return rows


def _default_tag(path: Path) -> str:
    # runs/cb/checkpoint.json -> "cb"; named checkpoints keep their stem
    return path.parent.name if path.stem == "checkpoint" else path.stem


def cmd_analyze(cfg: dict, out: Path) -> tuple[int, list[Path]]:
    paths = _tuple(cfg["analyze.checkpoints"])
    if not paths:
        raise UsageError("analyze needs at least one checkpoint")
    tags = _tuple(cfg["analyze.tags"]) or tuple(_default_tag(Path(str(p))) for p in paths)
    if len(tags) != len(paths):
        raise UsageError("analyze.tags must name every checkpoint")
    rows = []
    for path, tag in zip(paths, tags):
        model = load_checkpoint(path, dtype=np.float64)
        ds = dataset_from(cfg, model.config)
        rows += analyze_rows(model, ds.images[: cfg["analyze.batch"]].astype(np.float64), str(tag), cfg)
    rows.sort(key=lambda r: (r["layer"], tags.index(r["model_tag"])))
    path = out / "analysis.csv"
    analysis.write_layer_csv(path, rows, extra_columns=("model_tag", "nuclear_norm_mean", "nuclear_norm_max"))
    return 0, [path]


def cmd_gradcheck(cfg: dict, out: Path) -> tuple[int, list[Path]]:
    mc = model_config_from(cfg)
    count = ViT.count(mc)
    if count >= PARAM_CAP:
        raise UsageError(f"gradcheck is limited to models under {PARAM_CAP} parameters; this config has {count}")
    model = ViT(mc, seed=cfg["seed"], dtype=np.float64)
    rng = np.random.default_rng(cfg["seed"])
    b = cfg["gradcheck.batch"]
    images = rng.uniform(0, 255, size=(b, mc.image_size, mc.image_size, mc.channels))
    labels = rng.integers(0, mc.num_classes, size=b)
    checks = model_gradient_check(model, images, labels, cfg["gradcheck.coords"], seed=cfg["seed"])
    tol = 1e-4
    lines = [f"{c.name} worst_rel_err {c.worst:.3e} at {c.coord} ({c.checked} coords)" for c in checks]
    breaches = [c for c in checks if not c.worst < tol]
    worst = max(checks, key=lambda c: c.worst)
    print(f"gradient check: {len(checks)} tensors, worst relative error {worst.worst:.3e} ({worst.name} {worst.coord})")
    for c in breaches:
        print(f"  BREACH {c.name} at {c.coord}: analytic {c.analytic!r} numeric {c.numeric!r} rel {c.worst:.3e}")
    violations = []
    sweep_rows = []
    for lam in _tuple(cfg["gradcheck.lambdas"]):
        for n in range(2, cfg["gradcheck.max_n"] + 1):
            rep = analysis.verify_uniform_maximality(n, lam, trials=cfg["gradcheck.trials"], seed=n)
            sweep_rows.append(f"N={n} lambda={lam} bound={rep.bound!r} max_found={rep.max_found!r} margin={rep.margin:.3e}")
            if not rep.ok:
                violations.append(rep)
    print(f"maximality sweep: {len(sweep_rows)} (N, lambda) pairs, {len(violations)} violations")
    for rep in violations:
        print(f"  VIOLATION N={rep.n} lambda={rep.lam}: {rep.max_found!r} > {rep.bound!r}")
    path = out / "gradcheck.txt"
    path.write_text("\n".join([f"parameters {count}"] + lines + sweep_rows) + "\n")
    return (1 if breaches or violations else 0), [path]


def cmd_make_dataset(cfg: dict, out: Path) -> tuple[int, list[Path]]:
    mc = model_config_from(cfg)
    ds = dataset_from(cfg, mc)
    path = out / "dataset.cbds"
    save_dataset(ds, path)
    print(f"wrote {len(ds)} images ({mc.image_size}x{mc.image_size}x{mc.channels}, {ds.num_classes} classes) to {path}")
    return 0, [path]


HANDLERS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "make-dataset": cmd_make_dataset,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cbvit",
        description="Train and analyse small vision transformers with context broadcasting.",
        epilog="Any config key can be overridden with --key value, e.g. --cb.site mlp_end --epochs 5.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("checkpoints", nargs="*", help="checkpoint manifests (analyze only)")
    p.add_argument("--config", type=Path, help="flat key = value file, or a run_manifest.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory (default: $CBVIT_OUT/<command> or runs/<command>)")
    p.add_argument("--threads", type=int, default=0, help="BLAS threads; 0 = strict single-threaded")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.checkpoints:
            if args.command != "analyze":
                raise UsageError(f"{args.command} takes no positional arguments")
            overrides["analyze.checkpoints"] = tuple(args.checkpoints)
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, overrides)
        if args.threads < 0:
            raise UsageError("--threads must be >= 0")
        out = args.out or Path(os.environ.get("CBVIT_OUT", "runs")) / args.command
        out.mkdir(parents=True, exist_ok=True)
        with thread_limit(args.threads):
            code, artifacts = HANDLERS[args.command](cfg, out)
        manifest = write_manifest(out, args.command, cfg, args.threads, artifacts, "ok" if code == 0 else "failed")
        print(f"manifest: {manifest}")
        return code
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"cbvit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"cbvit {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
