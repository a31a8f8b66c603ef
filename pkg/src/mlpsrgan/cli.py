"""Command-line entry point: degrade, train, upscale, metrics, compare, report.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime fault.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import data_io as D
from . import evalstats as E
from . import metrics as M
from . import trainer as TR
from .errors import ConfigError
from .resample import SLICE_FACTOR

EXIT_OK, EXIT_FAULT, EXIT_USAGE = 0, 1, 2
IMAGE_SUFFIXES = (".rt", ".pgm")


def _echo(path: Path, settings: dict) -> None:
    """Write the effective settings as ``key = value`` lines."""
    path.write_text("".join(f"{k} = {v}\n" for k, v in settings.items()))


def _settings(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------

def cmd_degrade(args) -> int:
    files = D.list_volume_files(args.input)
    if not files:
        raise ConfigError(f"no volumes found in {args.input}")
    volumes = [D.load_volume(f) for f in files]
    folds = args.folds if args.folds is not None else min(5, len(volumes))
    ds = D.build_dataset(volumes, folds, args.factor, args.blank_threshold)
    out = Path(args.out)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    records = []
    for p in ds.pairs:
        D.write_rt(out / "lr" / f"{p.id}.rt", p.lr.astype(np.float64))
        D.write_rt(out / "hr" / f"{p.id}.rt", p.hr.astype(np.float64))
        records.append({"id": p.id, "fold": p.fold, "lr": f"lr/{p.id}.rt", "hr": f"hr/{p.id}.rt"})
    D.write_manifest(out / "manifest.jsonl", records)
    _echo(out / "config.txt", {**_settings(args), "folds": folds})
    print(f"{len(records)} slices from {len(volumes)} volumes -> {out / 'manifest.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def train_config_from_args(args) -> TR.TrainConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = _parse_sets(args.set)
    for key, flag in (("num_rmrdb", args.rmrdb), ("iters", args.iters),
                      ("warmup_iters", args.warmup), ("seed", args.seed)):
        if flag is not None:
            overrides[key] = flag
    if args.no_discriminator:
        overrides["no_discriminator"] = "true"
    return TR.TrainConfig.from_text(text, overrides)


def cmd_train(args) -> int:
    config = train_config_from_args(args)
    ds = D.dataset_from_manifest(args.manifest)
    if len(ds) == 0:
        raise ConfigError(f"manifest {args.manifest} lists no slices")
    h, w = ds.pairs[0].lr.shape
    if (config.input_h, config.input_w) != (h, w):
        # the generator is sized from the data
        config = dataclasses.replace(config, input_h=h, input_w=w)
    if config.holdout_fold >= 0:
        ds, _ = ds.split(config.holdout_fold)
        if len(ds) == 0:
            raise ConfigError(f"holdout_fold {config.holdout_fold} leaves no training slices")
    resume = TR.load_checkpoint(args.resume) if args.resume else None
    state, history = TR.train(ds, config, args.out, resume=resume)
    print(f"{len(history.rows)} iterations -> {Path(args.out) / 'final.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# upscale
# ---------------------------------------------------------------------------

def cmd_upscale(args) -> int:
    ckpt = TR.load_checkpoint(args.ckpt)
    blend = TR.load_checkpoint(args.blend) if args.blend else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        recs = D.read_manifest(args.manifest)
        if args.fold is not None:
            recs = [r for r in recs if r["fold"] == args.fold]
        params = TR.blend_params(blend.g, ckpt.g, args.alpha) if blend else ckpt.g
        lrs = np.stack([D.load_image(r["lr"]) for r in recs]) if recs else np.zeros((0, 1, 1))
        srs = TR.upscale_slices(lrs, params, ckpt.config) if recs else []
        for r, sr in zip(recs, srs):
            D.write_rt(out / f"{r['id']}.rt", sr)
        count = len(recs)
    else:
        files = D.list_volume_files(args.input)
        if not files:
            raise ConfigError(f"no volumes found in {args.input}")
        for f in files:
            v = D.load_volume(f)
            if not args.no_normalize:
                v = D.normalize_volume(v)
            sr = TR.upscale_volume(v, ckpt, blend, args.alpha)
            name = f.name.split(".")[0]
            if f.suffix == ".rt":
                D.write_rt(out / f"{name}.rt", sr.data)
            else:
                D.save_nifti(out / f"{name}.nii", sr)
        count = len(files)
    _echo(out / "config.txt", _settings(args))
    print(f"upscaled {count} item(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics / compare / report
# ---------------------------------------------------------------------------

def _images(path: Path) -> dict[str, np.ndarray]:
    """Map image id to 2-D image; volumes contribute one image per first-axis slice."""
    out = {}
    for f in sorted(path.iterdir()):
        if f.suffix in IMAGE_SUFFIXES:
            img = D.load_image(f)
            if img.ndim == 2:
                out[f.stem] = img
                continue
            vol = img
        elif f.name.endswith(".nii"):
            vol = D.load_volume(f).data
        else:
            continue
        stem = f.name.split(".")[0]
        for i in range(vol.shape[0]):
            out[f"{stem}_s{i:03d}"] = vol[i]
    return out


def cmd_metrics(args) -> int:
    gen = _images(Path(args.gen))
    if not gen:
        raise ConfigError(f"no images found in {args.gen}")
    ref = _images(Path(args.ref)) if args.ref else None
    reports = []
    for key, img in gen.items():
        r = None
        if ref is not None:
            if key not in ref:
                raise ConfigError(f"no reference image for {key!r} in {args.ref}")
            r = ref[key]
        reports.append(M.evaluate_image(img, r, key, max_val=args.max_val,
                                        wavelet_order=args.wavelet_order, levels=args.levels))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    M.write_metrics_csv(out, reports)
    _echo(out.with_name(out.name + ".config.txt"), _settings(args))
    print(f"{len(reports)} images -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = E.compare_methods(M.read_metrics_csv(args.a), M.read_metrics_csv(args.b))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    E.write_compare_csv(out, rows)
    _echo(out.with_name(out.name + ".config.txt"), _settings(args))
    for r in rows:
        print(f"{r['metric']:<12} t={r['t']:.4g} p={r['p']:.4g} (n={r['n']})")
    return EXIT_OK


def _mean(values) -> str:
    vals = [v for v in values if v is not None]
    if not vals:
        return "-"
    m = float(np.mean(vals))
    return "inf" if np.isinf(m) else f"{m:.4f}"


def format_report(methods: list[tuple[str, list[M.MetricReport]]]) -> str:
    headers = ["Method", "PSNR", "SSIM", "Sharpness", "Entropy", "Wavelet-low"]
    rows = [[name] + [_mean(getattr(r, k) for r in reps) for k in M.CSV_FIELDS[1:]]
            for name, reps in methods]
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(wd) for c, wd in zip(cells, widths)).rstrip()
    out = [line(headers), line(["-" * wd for wd in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    methods = []
    for item in args.method:
        if "=" not in item:
            raise ConfigError(f"--method expects NAME=CSV, got {item!r}")
        name, path = item.split("=", 1)
        methods.append((name, M.read_metrics_csv(path)))
    text = format_report(methods)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _echo(out.with_name(out.name + ".config.txt"), _settings(args))
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlpsrgan", description="Slice-direction MRI super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("degrade", help="slice volumes and make LR/HR training pairs")
    s.add_argument("--in", dest="input", required=True, help="volume file or directory")
    s.add_argument("--out", required=True)
    s.add_argument("--factor", type=int, default=SLICE_FACTOR)
    s.add_argument("--folds", type=int, default=None, help="default: min(5, number of volumes)")
    s.add_argument("--blank-threshold", type=float, default=0.01)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="warm-up plus adversarial training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory for checkpoints and history")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--rmrdb", type=int)
    s.add_argument("--iters", type=int, help="adversarial iterations (overrides epochs)")
    s.add_argument("--warmup", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-discriminator", action="store_true")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("upscale", help="super-resolve volumes or manifest slices")
    s.add_argument("--ckpt", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="LR volume file or directory")
    src.add_argument("--manifest", help="upscale the LR slices listed in a manifest")
    s.add_argument("--fold", type=int, help="with --manifest, only this fold")
    s.add_argument("--out", required=True)
    s.add_argument("--blend", help="checkpoint to interpolate toward (e.g. warmup.ckpt)")
    s.add_argument("--alpha", type=float, default=1.0,
                   help="weight of --ckpt in the blend (1 keeps it unchanged)")
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_upscale)

    s = sub.add_parser("metrics", help="per-image quality metrics")
    s.add_argument("--gen", required=True)
    s.add_argument("--ref")
    s.add_argument("--out", required=True)
    s.add_argument("--max-val", type=float, default=1.0)
    s.add_argument("--wavelet-order", type=int, default=M.DEFAULT_WAVELET_ORDER)
    s.add_argument("--levels", type=int, default=M.WAVELET_LEVELS,
                   help="wavelet decomposition levels (lower it for narrow images)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("compare", help="paired log t-tests between two metric CSVs")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("report", help="per-method mean metrics table")
    s.add_argument("--method", action="append", required=True, metavar="NAME=CSV")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime fault: report and exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
