"""``cunet`` command-line entry point.

Every failure ends with a single ``error: CODE: message`` line on stderr and
a nonzero exit status taken from :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checks import oracle_check
from .io import (
    CheckpointError,
    ConfigError,
    ExperimentConfig,
    ImageFormatError,
    checkpoint_from_params,
    load_checkpoint,
    load_config,
    load_image,
    params_from_checkpoint,
    save_checkpoint,
    save_image,
)
from .metrics import psnr, rmse, ssim
from .model import MIF, ForwardDivergenceError, cunet_forward, decompose, init_params
from .tensor import ContractError, get_dtype, set_precision
from .train import TrainingError, stack_pairs, train

log = logging.getLogger("cunet")

EXIT_CODES = {
    "CONFIG_ERROR": 2,
    "MISSING_FILE": 3,
    "TASK_MISMATCH": 4,
    "CHECKPOINT_ERROR": 5,
    "IMAGE_ERROR": 6,
    "CONTRACT_ERROR": 7,
    "DIVERGED": 8,
    "ORACLE_FAILURE": 9,
}

ORACLE_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-4
IMAGE_MAXVAL = 65535


class CLIError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


def _task_for_kind(kind: str) -> str:
    return MIF if kind == D.MULTIFOCUS else "mir"


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError("MISSING_FILE", f"{p} does not exist")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(_require(args.config)) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"train.seed={args.seed}"]
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    return cfg.with_overrides(overrides)


def _task_pinned(args) -> bool:
    """True when the user stated a task explicitly (config file or override)."""
    return bool(args.config) or any(s.startswith("model.task=") for s in (args.set or []))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args, cfg: ExperimentConfig):
    ck = load_checkpoint(_require(args.checkpoint))
    params, _ = params_from_checkpoint(ck, dtype=get_dtype())
    if _task_pinned(args) and cfg.model.task != params.task:
        raise CLIError("TASK_MISMATCH", f"config task {cfg.model.task!r} but checkpoint task {params.task!r}")
    return params


def _load_pair(args):
    x = load_image(_require(args.input))
    y = load_image(_require(args.guidance))
    if x.shape != y.shape:
        raise CLIError("CONTRACT_ERROR", f"input {x.shape} and guidance {y.shape} differ in shape")
    dt = get_dtype()
    return x.astype(dt), y.astype(dt)


# -- subcommands ----------------------------------------------------------------

def cmd_synth_data(args, cfg: ExperimentConfig) -> None:
    ds = cfg.dataset
    if ds.kind not in D.KINDS:
        raise CLIError("CONFIG_ERROR", f"unknown dataset kind {ds.kind!r}")
    out = _out_dir(cfg)
    pairs = D.synth_guided_dataset(
        ds.kind, ds.count + ds.val_count, seed=ds.seed, size=ds.size, sr_factor=ds.sr_factor, noise_sigma=ds.noise_sigma
    )
    samples = []
    for i, pair in enumerate(pairs):
        entry = {"index": i, "seed": [ds.seed, i], "split": "train" if i < ds.count else "val"}
        for part in ("x", "y", "z"):
            name = f"{i:05d}_{part}.pgm"
            save_image(out / name, getattr(pair, part), IMAGE_MAXVAL)
            entry[part] = name
        samples.append(entry)
    manifest = {"dataset": cfg.to_dict()["dataset"], "task": _task_for_kind(ds.kind), "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"samples": len(samples), "out": str(out)}))


def _read_dataset(directory: Path):
    manifest = json.loads(_require(directory / "manifest.json").read_text())
    splits = {"train": [], "val": []}
    for s in manifest["samples"]:
        x, y, z = (load_image(_require(directory / s[k])) for k in ("x", "y", "z"))
        splits[s["split"]].append(D.SamplePair(x, y, z, manifest["dataset"]["kind"]))
    return manifest, splits["train"], splits["val"]


def cmd_train(args, cfg: ExperimentConfig) -> None:
    if args.data:
        manifest, tr, va = _read_dataset(_require(args.data))
        task = manifest["task"]
    else:
        ds = cfg.dataset
        pairs = D.synth_guided_dataset(
            ds.kind, ds.count + ds.val_count, seed=ds.seed, size=ds.size, sr_factor=ds.sr_factor, noise_sigma=ds.noise_sigma
        )
        tr, va = D.split(pairs, ds.val_count)
        task = _task_for_kind(ds.kind)
    if task != cfg.model.task:
        raise CLIError("TASK_MISMATCH", f"dataset is for task {task!r}, model config says {cfg.model.task!r}")
    out = _out_dir(cfg)
    (out / "config.json").write_text(cfg.to_json())
    params = init_params(cfg.model, seed=cfg.seed)
    dt = get_dtype()
    triples = tuple(a.astype(dt) for a in stack_pairs(tr))
    val = tuple(a.astype(dt) for a in stack_pairs(va)) if va else None

    log_path = out / "train_log.csv"
    fh = log_path.open("w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["epoch", "lr", "train_loss", "val_psnr"])
    losses = []

    def on_epoch(row, p, state):
        writer.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_psnr"])])
        fh.flush()
        losses.append(row["train_loss"])
        meta = {"epoch": row["epoch"], "seed": cfg.seed, "loss_history": list(losses)}
        save_checkpoint(out / "checkpoint.cun", checkpoint_from_params(p, state, meta))

    try:
        train(cfg.train, triples, params, val=val, on_epoch=on_epoch)
    finally:
        fh.close()
    print(json.dumps({"checkpoint": str(out / "checkpoint.cun"), "log": str(log_path)}))


def cmd_infer(args, cfg: ExperimentConfig) -> None:
    params = _load_model(args, cfg)
    x, y = _load_pair(args)
    z, _ = cunet_forward(x, y, params)
    out = Path(args.output) if args.output else _out_dir(cfg) / "z.pgm"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, z, IMAGE_MAXVAL)
    print(json.dumps({"output": str(out)}))


def _metrics(pred: np.ndarray, target: np.ndarray) -> dict:
    return {"rmse": rmse(pred, target), "psnr": psnr(pred, target), "ssim": ssim(pred, target)}


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    pred, target = _require(args.pred), _require(args.target)
    if pred.is_dir():
        names = sorted(p.name for p in pred.glob("*.p[gp]m"))
        pairs = [(pred / n, _require(target / n)) for n in names]
    else:
        pairs = [(pred, target)]
    rows = []
    for p, t in pairs:
        a, b = load_image(p), load_image(t)
        if a.shape != b.shape:
            raise CLIError("CONTRACT_ERROR", f"{p} and {t} differ in shape")
        rows.append({"name": p.name, **_metrics(a, b)})
    if not rows:
        raise CLIError("MISSING_FILE", f"no images under {pred}")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("rmse", "psnr", "ssim")}
    out = _out_dir(cfg)
    (out / "metrics.json").write_text(json.dumps({"samples": rows, "mean": mean}, sort_keys=True, indent=2) + "\n")
    print(json.dumps(mean, sort_keys=True))


def cmd_decompose(args, cfg: ExperimentConfig) -> None:
    params = _load_model(args, cfg)
    x, y = _load_pair(args)
    _, trace = cunet_forward(x, y, params)
    parts = decompose(trace)
    names = {"common": "point1", "unique_x": "point2", "unique_y": "point3", "final": "point4"}
    out = _out_dir(cfg)
    written = {}
    for key, img in parts.items():
        path = out / f"{names[key]}.pgm"
        save_image(path, img, IMAGE_MAXVAL)
        np.save(out / f"{names[key]}.npy", img)
        written[names[key]] = str(path)
    print(json.dumps(written, sort_keys=True))


def cmd_oracle_check(args, cfg: ExperimentConfig) -> None:
    set_precision("f64")
    res = oracle_check(seed=cfg.seed)
    print(f"max equivalence residual: {res['max_equivalence_residual']:.3e}")
    print(f"max gradient relative error: {res['max_gradient_rel_error']:.3e}")
    if res["max_equivalence_residual"] > ORACLE_TOLERANCE:
        raise CLIError("ORACLE_FAILURE", f"equivalence residual {res['max_equivalence_residual']:.3e} > {ORACLE_TOLERANCE}")
    if res["max_gradient_rel_error"] > GRADIENT_TOLERANCE:
        raise CLIError("ORACLE_FAILURE", f"gradient error {res['max_gradient_rel_error']:.3e} > {GRADIENT_TOLERANCE}")


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("--seed", type=int, help="seed for initialization and shuffling")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="cunet", description="Multi-modal convolutional sparse coding network tools.")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset and manifest")

    p = sub.add_parser("train", parents=[common], help="train a model, writing a CSV log and checkpoint")
    p.add_argument("--data", metavar="DIR", help="dataset directory from synth-data (default: synthesize in memory)")

    for name, helptext in (("infer", "restore or fuse one image pair"), ("decompose", "export point1..point4 components")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--input", required=True, help="degraded image / first source")
        p.add_argument("--guidance", required=True, help="guidance image / second source")
        if name == "infer":
            p.add_argument("--output", help="output image path (default: OUT/z.pgm)")

    p = sub.add_parser("eval", parents=[common], help="RMSE, PSNR and SSIM of predictions")
    p.add_argument("--pred", required=True, help="image or directory of images")
    p.add_argument("--target", required=True, help="image or directory with matching names")

    sub.add_parser("oracle-check", parents=[common], help="unrolled-vs-ISTA equivalence and gradient checks")
    return ap


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "decompose": cmd_decompose,
    "oracle-check": cmd_oracle_check,
}


def _fail(code: str, msg: str) -> int:
    print(f"error: {code}: {' '.join(str(msg).split())}", file=sys.stderr)
    return EXIT_CODES[code]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        set_precision(args.precision)
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except CLIError as e:
        return _fail(e.code, e)
    except ConfigError as e:
        return _fail("CONFIG_ERROR", e)
    except CheckpointError as e:
        return _fail("CHECKPOINT_ERROR", e)
    except ImageFormatError as e:
        return _fail("IMAGE_ERROR", e)
    except FileNotFoundError as e:
        return _fail("MISSING_FILE", e)
    except (ForwardDivergenceError, TrainingError) as e:
        return _fail("DIVERGED", e)
    except ContractError as e:
        return _fail("CONTRACT_ERROR", e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
