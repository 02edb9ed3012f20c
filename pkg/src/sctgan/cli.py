"""``sctgan`` command line: phantom, register, train, synthesize, evaluate, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes one run manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import MetricsRow, error_map, error_map_to_pgm, evaluate_subject, write_report
from .nn import Generator, load_checkpoint
from .phantom import PhantomSpec, generate_phantom, perturb_pose, random_pose, write_manifest, write_subject
from .registration import DegenerateFitError, RigidTransform, icp_register
from .study import load_dataset, run_phantom_study, subject_ids, train_folds
from .train import NumericalError, TrainConfig, synthesize_volume
from .volume import extract_point_cloud, load_volume, resample_trilinear, save_volume

log = logging.getLogger("sctgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- run manifest -----------------------------------------------------------------

def write_run_manifest(path, command, config, seed, inputs, outputs, started) -> Path:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "duration_s": round(time.time() - started, 3),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def manifest_for_file(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# -- commands ----------------------------------------------------------------------

def _read_json_arg(path):
    return json.loads(Path(path).read_text()) if path else {}


def cmd_phantom(args, started):
    spec = PhantomSpec.from_dict(_read_json_arg(args.spec))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i, sid in enumerate(subject_ids(args.count)):
        ph = generate_phantom(dataclasses.replace(spec, seed=spec.seed + i))
        ct = None
        entry_extra = {}
        if args.perturb_deg > 0 or args.perturb_vox > 0:
            xf = random_pose(rng, args.perturb_deg, args.perturb_vox, min(spec.spacing))
            ct = perturb_pose(ph.ct, xf)
            # the written CT samples the aligned one at xf(p): xf maps it back into MR space
            entry_extra["true_transform"] = xf.to_dict()
        entry = write_subject(ph, out, sid, ct)
        entries.append({**entry, **entry_extra})
        log.info("phantom %s written", sid)
    write_manifest(out, entries, spec, args.count)
    write_run_manifest(out / "run_manifest.json", "phantom",
                       dict(spec=spec.to_dict(), count=args.count, perturb_deg=args.perturb_deg,
                            perturb_vox=args.perturb_vox),
                       spec.seed, {"spec": args.spec or "<defaults>"}, {"out": out}, started)


def cmd_register(args, started):
    ct = load_volume(args.ct)
    mr = load_volume(args.mr)
    src = extract_point_cloud(ct, "high-CT")
    dst = extract_point_cloud(mr, "low-MR")
    res = icp_register(src, dst, max_iterations=args.max_iterations, tol=args.tol)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.transform.save(out)
    outputs = {"transform": out}
    if args.resampled_ct:
        aligned = resample_trilinear(ct, res.transform.inverse(), mr.grid)
        outputs["resampled_ct"] = save_volume(aligned, args.resampled_ct)
    log.info("ICP: %d iterations, rms %.4f mm, converged=%s", res.iterations,
             res.rms_residual, res.converged)
    write_run_manifest(manifest_for_file(out), "register",
                       dict(max_iterations=args.max_iterations, tol=args.tol,
                            iterations=res.iterations, rms_residual=res.rms_residual,
                            converged=res.converged),
                       None, {"ct": args.ct, "mr": args.mr}, outputs, started)


def train_config_from_args(args) -> TrainConfig:
    cfg = _read_json_arg(args.config)
    for f in dataclasses.fields(TrainConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            cfg[f.name] = val
    return TrainConfig.from_dict(cfg)


def cmd_train(args, started):
    cfg = train_config_from_args(args)
    data = load_dataset(args.data)
    out = Path(args.out)

    def progress(fold, row):
        log.info("fold %d epoch %d: g %.4f d %.4f l1 %.4f val %.4f", fold, row["epoch"],
                 row["g_loss"], row["d_loss"], row["l1_term"], row["val_l1"])

    plan, results = train_folds(data, args.folds, cfg, out, progress)
    summary = [dict(fold=f, best_epoch=r.best_epoch, best_val_l1=r.best_val_l1,
                    initial_val_l1=r.initial_val_l1) for f, r in enumerate(results)]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_run_manifest(out / "run_manifest.json", "train",
                       dict(train=cfg.to_dict(), folds=args.folds), cfg.seed,
                       {"data": args.data, "config": args.config or "<defaults>"},
                       {"out": out}, started)


def cmd_synthesize(args, started):
    if len(args.mr) != 3:
        raise UsageError("--mr takes exactly three echo files")
    params, meta = load_checkpoint(args.checkpoint)
    gnet = Generator(**meta["arch"]) if "arch" in meta else Generator()
    mr = [load_volume(p) for p in args.mr]
    sct = synthesize_volume(params, mr, gnet)
    path = save_volume(sct, args.out)
    write_run_manifest(manifest_for_file(args.out), "synthesize", dict(arch=gnet.config), None,
                       {"checkpoint": args.checkpoint, "mr": ",".join(args.mr)},
                       {"sct": path}, started)


def cmd_evaluate(args, started):
    ct, sct = load_volume(args.ct), load_volume(args.sct)
    subject = args.subject or Path(args.sct).stem
    row = evaluate_subject(ct, sct, subject, bone_hu=args.bone_hu, tissue_hu=args.tissue_hu)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(row.to_dict(), indent=2) + "\n")
    outputs = {"row": out}
    if args.error_maps:
        error_map_to_pgm(error_map(sct, ct), args.error_maps)
        outputs["error_maps"] = args.error_maps
    write_run_manifest(manifest_for_file(out), "evaluate",
                       dict(bone_hu=args.bone_hu, tissue_hu=args.tissue_hu), None,
                       {"ct": args.ct, "sct": args.sct}, outputs, started)


def cmd_report(args, started):
    rows_dir = Path(args.rows)
    paths = sorted(p for p in rows_dir.glob("*.json") if not p.name.endswith(".manifest.json"))
    if not paths:
        raise FileNotFoundError(f"no row files in {rows_dir}")
    rows = [MetricsRow.from_dict(json.loads(p.read_text())) for p in paths]
    out = Path(args.out)
    mean = write_report(rows, out)
    print(out.read_text().splitlines()[-1])
    write_run_manifest(manifest_for_file(out), "report", {}, None, {"rows": rows_dir},
                       {"csv": out, "json": out.with_suffix(".json")}, started)


def cmd_study(args, started):
    cfg = train_config_from_args(args)
    spec = PhantomSpec.from_dict(_read_json_arg(args.spec))
    res = run_phantom_study(args.out, count=args.count, k=args.folds, cfg=cfg, spec=spec)
    print(Path(args.out, "table.csv").read_text(), end="")
    log.info("baseline mean bone MAE %.1f HU", res.baseline_mean.mae_bone_hu)
    write_run_manifest(Path(args.out) / "run_manifest.json", "study",
                       dict(train=cfg.to_dict(), spec=spec.to_dict(), count=args.count,
                            folds=args.folds), cfg.seed, {}, {"out": args.out}, started)


# -- parser ---------------------------------------------------------------------------

def _add_train_overrides(p):
    p.add_argument("--config", help="TrainConfig JSON; flags below override it")
    for f in dataclasses.fields(TrainConfig):
        kind = {int: int, float: float, str: str}.get(type(f.default), int)
        if f.name == "gan_mode":
            kind = str
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sctgan", description="Synthetic CT from multi-echo MR: phantoms, "
                     "registration, training, synthesis and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate paired MR/CT phantom subjects")
    p.add_argument("--spec", help="PhantomSpec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--seed", type=int, help="base seed; subject i uses seed + i")
    p.add_argument("--perturb-deg", type=float, default=0.0,
                   help="write each CT misaligned by a random rotation up to this angle")
    p.add_argument("--perturb-vox", type=float, default=0.0,
                   help="and a random translation up to this many voxels")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="rigid CT-to-MR registration by ICP")
    p.add_argument("--ct", required=True)
    p.add_argument("--mr", required=True, help="first MR echo")
    p.add_argument("--out", required=True, help="transform JSON")
    p.add_argument("--resampled-ct", help="also write the CT resampled onto the MR grid")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="k-fold cGAN training on a phantom directory")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthetic CT from three MR echoes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mr", required=True, nargs="+", help="three echo files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="metrics row for one synthetic CT")
    p.add_argument("--ct", required=True)
    p.add_argument("--sct", required=True)
    p.add_argument("--out", required=True, help="row JSON")
    p.add_argument("--subject")
    p.add_argument("--bone-hu", type=float, default=200.0)
    p.add_argument("--tissue-hu", type=float, default=-200.0)
    p.add_argument("--error-maps", help="directory for per-slice PGM error maps")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="per-subject table with a mean row")
    p.add_argument("--rows", required=True, help="directory of row JSON files")
    p.add_argument("--out", required=True, help="CSV path; a JSON mirror is written beside it")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("study", help="phantom generation, k-fold training and evaluation in one run")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="PhantomSpec JSON")
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--folds", type=int, default=3)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        args.func(args, started)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DegenerateFitError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
