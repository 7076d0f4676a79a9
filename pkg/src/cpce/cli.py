"""Command-line entry point: ``cpce <command> ...``.

Commands: simulate, train, inflate, denoise, evaluate, compare. Failures exit
nonzero with one ``error: code=<name> exit=<n> message=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from .container import ContainerFormatError, load_container, save_container
from .data import DataConfig, Dataset, Volume, export_png, load_volume, make_dataset, save_volume
from .losses import LAMBDA_P, RANDOM_CONVNET, make_extractor
from .metrics import denoise_volume, evaluate_model
from .model import ConfigurationError, ShapeError, build_discriminator
from .trainer import (TrainConfig, TrainingDiverged, TrainState, load_checkpoint, new_state,
                      print_progress, read_history, save_checkpoint, train, write_history)
from .transfer import DEFAULT_TOLERANCE, inflate_generator, verify_equivalence

EXIT_CODES = {
    "usage": 2,
    "schema": 3,
    "missing_file": 4,
    "configuration": 5,
    "format": 6,
    "diverged": 7,
    "internal": 1,
}

_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("lambda_p", "loss_reduction", "seed")]
_DATA_KEYS = [f.name for f in fields(DataConfig) if f.name != "seed"]

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {k: getattr(DataConfig(), k) for k in _DATA_KEYS},
    "model": {"d": 1, "channels": 32},
    "train": {k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
    "loss": {"lambda_p": LAMBDA_P, "reduction": "mean", "extractor": RANDOM_CONVNET,
             "extractor_path": None, "extractor_seed": 0},
    "eval": {"patch": 64, "window": [0.0, 1.0]},
    "paths": {"data_dir": None, "runs_dir": "runs"},
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise CliError("schema", f"unknown config key '{where}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise CliError("schema", f"config key '{where}' must be an object")
            out[k] = _merge(base[k], v, where)
        elif isinstance(v, dict):
            raise CliError("schema", f"config key '{where}' must be a scalar or list")
        else:
            out[k] = v
    return out


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- JSON file <- overrides, rejecting unknown keys by path."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError("missing_file", f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("schema", f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise CliError("schema", "config root must be an object")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    if cfg["paths"]["data_dir"] is None:
        cfg["paths"]["data_dir"] = os.environ.get("CPCE_DATA_DIR", "cpce_data")
    return cfg


def config_hash(cfg: dict, extra: dict | None = None) -> str:
    blob = json.dumps({"config": cfg, "extra": extra or {}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def data_config(cfg: dict) -> DataConfig:
    return DataConfig(**cfg["data"], seed=cfg["seed"])


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"], lambda_p=cfg["loss"]["lambda_p"],
                           loss_reduction=cfg["loss"]["reduction"], seed=cfg["seed"])
    except ConfigurationError as exc:
        raise CliError("schema", str(exc)) from exc


def extractor_for(cfg: dict):
    loss = cfg["loss"]
    if loss["extractor_path"] is not None and not Path(loss["extractor_path"]).exists():
        raise CliError("missing_file", f"feature extractor weights not found: {loss['extractor_path']}")
    try:
        return make_extractor(loss["extractor"], loss["extractor_path"], loss["extractor_seed"])
    except ValueError as exc:
        raise CliError("schema", str(exc)) from exc


def run_dir(cfg: dict, command: str, extra: dict | None = None) -> Path:
    d = Path(cfg["paths"]["runs_dir"]) / f"{command}-{config_hash(cfg, extra)}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps({"config": cfg, "args": extra or {}}, indent=2, sort_keys=True))
    return d


# -- dataset on disk -------------------------------------------------------

def write_dataset(root: Path, ds: Dataset) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val"):
        (root / split).mkdir(exist_ok=True)
        for k, (nd, ld) in enumerate(zip(getattr(ds, f"{split}_nd"), getattr(ds, f"{split}_ld"))):
            save_volume(root / split / f"vol{k:02d}_nd.cpce", nd)
            save_volume(root / split / f"vol{k:02d}_ld.cpce", ld)
    save_container(root / "coords.cpce", {"train": ds.train_coords.astype(np.float32),
                                           "val": ds.val_coords.astype(np.float32)})
    (root / "manifest.json").write_text(json.dumps({"data": asdict(ds.config)}, indent=2, sort_keys=True))


def read_pairs(folder: Path) -> tuple[list[Volume], list[Volume]]:
    nds = sorted(folder.glob("*_nd.cpce"))
    if not nds:
        raise CliError("missing_file", f"no *_nd.cpce volumes in {folder}")
    lds = []
    for p in nds:
        q = p.with_name(p.name.replace("_nd.cpce", "_ld.cpce"))
        if not q.exists():
            raise CliError("missing_file", f"missing low-dose partner {q}")
        lds.append(q)
    return [load_volume(p) for p in lds], [load_volume(p) for p in nds]


def read_dataset(root: Path) -> Dataset:
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise CliError("missing_file", f"no dataset at {root} (run 'simulate' first)")
    dcfg = DataConfig(**json.loads(manifest.read_text())["data"])
    tr_ld, tr_nd = read_pairs(root / "train")
    va_ld, va_nd = read_pairs(root / "val")
    coords = load_container(root / "coords.cpce")
    return Dataset(dcfg, tr_nd, tr_ld, va_nd, va_ld,
                   coords["train"].astype(np.int64), coords["val"].astype(np.int64))


# -- commands ----------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    root = Path(cfg["paths"]["data_dir"])
    ds = make_dataset(data_config(cfg))
    write_dataset(root, ds)
    print(f"wrote {len(ds.train_nd)} train + {len(ds.val_nd)} validation volume pairs to {root}")
    return 0


def cmd_train(args, cfg) -> int:
    if args.from_ckpt is not None and args.slices is None:
        raise CliError("usage", "--from requires --slices")
    if args.from_ckpt is not None and not Path(args.from_ckpt).exists():
        raise CliError("missing_file", f"checkpoint not found: {args.from_ckpt}")
    tcfg = train_config(cfg)
    ds = read_dataset(Path(cfg["paths"]["data_dir"]))
    extractor = extractor_for(cfg)
    extra = {"init": "scratch" if args.from_ckpt is None else "transfer",
             "from": None if args.from_ckpt is None else str(Path(args.from_ckpt).resolve()),
             "slices": args.slices}
    out = Path(args.out) if args.out else run_dir(cfg, "train", extra)
    if args.out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"config": cfg, "args": extra}, indent=2, sort_keys=True))
    progress = None if args.quiet else print_progress
    if args.from_ckpt is None:
        d = args.slices or cfg["model"]["d"]
        state = new_state(tcfg, d, cfg["model"]["channels"])
        state = train(tcfg, ds, extractor, out_dir=out, progress=progress, state=state)
    else:
        state = train(tcfg, ds, extractor, init=("from_checkpoint", args.from_ckpt, args.slices),
                      out_dir=out, progress=progress)
    write_history(out / "history.csv", state.history)
    save_checkpoint(out / "final.cpce", state)
    print(f"run directory: {out}")
    return 0


def cmd_inflate(args, cfg) -> int:
    src = Path(args.from_ckpt)
    if not src.exists():
        raise CliError("missing_file", f"checkpoint not found: {src}")
    ckpt = load_checkpoint(src)
    G3 = inflate_generator(ckpt.generator, args.slices)
    tcfg = ckpt.config or train_config(cfg)
    critic = ckpt.critic or build_discriminator(tcfg.seed)
    state = TrainState(G3, critic, tcfg, transferred=True)
    save_checkpoint(args.out, state)
    print(f"inflated {src} to d={args.slices}: {args.out}")
    if args.verify:
        vol = load_volume(args.verify)
        n = vol.shape[0]
        stacks = torch.from_numpy(np.stack([vol.stack(i, args.slices).data for i in range(n)]))
        worst = None
        for a in range(0, n, 4):
            rep = verify_equivalence(ckpt.generator, G3, stacks[a:a + 4], args.tol)
            if worst is None or rep.max_abs_diff > worst.max_abs_diff:
                worst = rep
        print(worst.line())
        return 0 if worst.passed else EXIT_CODES["configuration"]
    return 0


def cmd_denoise(args, cfg) -> int:
    for p in (args.model, args.volume):
        if not Path(p).exists():
            raise CliError("missing_file", f"not found: {p}")
    G = load_checkpoint(args.model).generator
    vol = load_volume(args.volume)
    out = Volume(denoise_volume(G, vol), vol.spacing,
                 {"kind": "denoised", "model": str(args.model), "source": vol.provenance})
    save_volume(args.out, out)
    print(f"denoised {vol.shape[0]} slices: {args.out}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    testset = Path(args.testset)
    if not testset.exists():
        raise CliError("missing_file", f"test set not found: {testset}")
    lds, nds = read_pairs(testset)
    if args.model == "none":
        G, model_id = None, "LDCT"
    else:
        if not Path(args.model).exists():
            raise CliError("missing_file", f"checkpoint not found: {args.model}")
        G, model_id = load_checkpoint(args.model).generator, str(args.model)
    extractor = extractor_for(cfg)
    report = evaluate_model(G, lds, nds, extractor, model_id, str(testset), cfg["eval"]["patch"],
                            cfg["loss"]["reduction"])
    out = Path(args.out) if args.out else run_dir(cfg, "evaluate", {"model": model_id, "testset": str(testset)})
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report")
    print(report.summary())
    if args.png is not None:
        v, i = args.png
        est = denoise_volume(G, lds[v])[i]
        panels = [lds[v].data[i], est, nds[v].data[i]]
        if args.roi:
            r, c, h, w = args.roi
            panels = [p[r:r + h, c:c + w] for p in panels]
        export_png(np.concatenate(panels, axis=1), out / f"vol{v:02d}_slice{i:03d}.png",
                   tuple(args.window or cfg["eval"]["window"]))
    print(f"report: {out / 'report.json'}")
    return 0


def compare_histories(histories: dict[str, list], steps_per_epoch: float | None = None) -> dict:
    """Convergence summary. Runs with a step-0 record are treated as transfer runs;
    for each, report when every other run first reaches its step-0 PL."""
    def when(step):
        if step is None:
            return None
        return {"step": step, "epoch": (step / steps_per_epoch) if steps_per_epoch else None}

    summary = {"runs": {}, "reach_transfer_start": []}
    for name, h in histories.items():
        if not h:
            raise CliError("schema", f"history {name} is empty")
        summary["runs"][name] = {
            "records": len(h),
            "first": {"step": h[0].step, "pl": h[0].pl, "wd": h[0].wd, "mse": h[0].mse},
            "final": {"step": h[-1].step, "pl": h[-1].pl, "wd": h[-1].wd, "mse": h[-1].mse},
            "best_pl": min(r.pl for r in h),
            "best_mse": min(r.mse for r in h),
        }
    for tname, th in histories.items():
        if th[0].step != 0:
            continue
        target = th[0].pl
        for sname, sh in histories.items():
            if sname == tname:
                continue
            hit = next((r.step for r in sh if r.pl <= target), None)
            summary["reach_transfer_start"].append({"transfer": tname, "other": sname, "target_pl": target,
                                                    "reached": when(hit)})
    return summary


def cmd_compare(args, cfg) -> int:
    hists = {}
    labels = args.labels or [Path(p).parent.name + "/" + Path(p).name for p in args.histories]
    if len(labels) != len(args.histories):
        raise CliError("usage", "--labels must match --histories")
    for label, p in zip(labels, args.histories):
        if not Path(p).exists():
            raise CliError("missing_file", f"history not found: {p}")
        try:
            hists[label] = read_history(p)
        except (ValueError, KeyError) as exc:
            raise CliError("schema", f"{p}: {exc}") from exc
    summary = compare_histories(hists, args.steps_per_epoch)
    print(f"{'run':<32} {'records':>7} {'final pl':>12} {'final wd':>12} {'final mse':>12} {'best mse':>12}")
    for name, s in summary["runs"].items():
        f = s["final"]
        print(f"{name:<32} {s['records']:>7} {f['pl']:>12.6g} {f['wd']:>12.6g} {f['mse']:>12.6g} {s['best_mse']:>12.6g}")
    for item in summary["reach_transfer_start"]:
        r = item["reached"]
        where = "never" if r is None else (f"step {r['step']}" + (f" (epoch {r['epoch']:.3g})" if r["epoch"] is not None else ""))
        print(f"{item['other']} reaches {item['transfer']} step-0 PL {item['target_pl']:.6g}: {where}")
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpce", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    p.add_argument("--data-dir", help="dataset root (default: $CPCE_DATA_DIR or ./cpce_data)")
    p.add_argument("--runs-dir", help="parent directory for run outputs")
    p.add_argument("--seed", type=int)
    p.add_argument("--reference", action="store_true", help="single-threaded deterministic mode")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="generate phantom volumes, low-dose copies and patch coordinates")

    t = sub.add_parser("train", help="train a generator/critic pair")
    t.add_argument("--init", choices=["scratch"], default=None)
    t.add_argument("--from", dest="from_ckpt", help="2D checkpoint to inflate and fine-tune")
    t.add_argument("--slices", type=int, help="slice count d")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output directory (default: run directory named by config hash)")
    t.add_argument("--quiet", action="store_true")

    i = sub.add_parser("inflate", help="inflate a 2D checkpoint to d slices")
    i.add_argument("--from", dest="from_ckpt", required=True)
    i.add_argument("--slices", type=int, required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--verify", help="volume file to check initialization equivalence on")
    i.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)

    d = sub.add_parser("denoise", help="denoise every slice of a volume")
    d.add_argument("--model", required=True)
    d.add_argument("--volume", required=True)
    d.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="PSNR/SSIM/PL/TML report over a test set")
    e.add_argument("--model", required=True, help="checkpoint, or 'none' for the raw low-dose input")
    e.add_argument("--testset", required=True, help="folder of *_ld.cpce / *_nd.cpce pairs")
    e.add_argument("--out")
    e.add_argument("--png", type=int, nargs=2, metavar=("VOLUME", "SLICE"),
                   help="write a low-dose | denoised | normal-dose PNG strip")
    e.add_argument("--roi", type=int, nargs=4, metavar=("ROW", "COL", "H", "W"))
    e.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))

    c = sub.add_parser("compare", help="convergence comparison of history CSVs")
    c.add_argument("--histories", nargs="+", required=True)
    c.add_argument("--labels", nargs="+")
    c.add_argument("--steps-per-epoch", type=float)
    c.add_argument("--out")
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "inflate": cmd_inflate,
            "denoise": cmd_denoise, "evaluate": cmd_evaluate, "compare": cmd_compare}


def _fail(code: str, message: str) -> int:
    n = EXIT_CODES[code]
    print(f"error: code={code} exit={n} message={' '.join(str(message).split())}", file=sys.stderr)
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.reference:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data_dir or args.runs_dir:
        overrides["paths"] = {k: v for k, v in (("data_dir", args.data_dir), ("runs_dir", args.runs_dir)) if v}
    if getattr(args, "epochs", None) is not None:
        overrides["train"] = {"epochs": args.epochs}
    try:
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except ContainerFormatError as exc:
        return _fail("format", str(exc))
    except (ConfigurationError, ShapeError) as exc:
        return _fail("configuration", str(exc))
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))


if __name__ == "__main__":
    sys.exit(main())
