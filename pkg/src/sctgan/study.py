"""Cross-validated phantom study: generate, train per fold, synthesize the
held-out subjects and evaluate them against a constant-HU baseline."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import MetricsRow, evaluate_subject, write_report
from .nn import Discriminator, Generator, save_checkpoint
from .phantom import PhantomSpec, TissueModel, generate_phantom, write_manifest, write_subject
from .train import (
    FoldResult,
    TrainConfig,
    extract_sagittal_slices,
    make_folds,
    synthesize_volume,
    train_fold,
    write_loss_log,
)
from .volume import Volume3D, load_volume, save_volume

log = logging.getLogger(__name__)


def subject_ids(count: int) -> list[str]:
    return [f"s{i + 1:02d}" for i in range(count)]


def load_subject(data_dir, entry) -> tuple[list[Volume3D], Volume3D]:
    """MR echoes and CT of one manifest entry."""
    base = Path(data_dir)
    files = entry["files"]
    mr = [load_volume(base / files[f"mr_e{e}"]) for e in (1, 2, 3)]
    return mr, load_volume(base / files["ct"])


def load_dataset(data_dir) -> dict[str, tuple[list[Volume3D], Volume3D]]:
    doc = json.loads((Path(data_dir) / "manifest.json").read_text())
    return {e["id"]: load_subject(data_dir, e) for e in doc["subjects"]}


def save_fold(out_dir, fold_index: int, fold, result: FoldResult, gnet: Generator) -> Path:
    d = Path(out_dir) / f"fold{fold_index}"
    d.mkdir(parents=True, exist_ok=True)
    meta = dict(arch=gnet.config, fold=fold_index, train=fold.train, val=fold.val,
                test=fold.test, best_epoch=result.best_epoch,
                best_val_l1=result.best_val_l1, initial_val_l1=result.initial_val_l1)
    save_checkpoint(d / "best.ckpt", result.best_params, meta)
    save_checkpoint(d / "final.ckpt", result.final_params, {**meta, "final": True})
    write_loss_log(result.log, d / "loss_log.csv")
    return d


def train_folds(data: dict, k: int, cfg: TrainConfig, out_dir, progress=None):
    """Seeded k-fold training; returns ``(plan, results)`` and writes per-fold files."""
    ids = sorted(data)
    plan = make_folds(ids, k=k, seed=cfg.seed, expected=None)
    slices = {i: extract_sagittal_slices(*data[i], tissue_hu=cfg.tissue_hu) for i in ids}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(json.dumps([vars(f) for f in plan], indent=2) + "\n")
    results = []
    for f, fold in enumerate(plan):
        log.info("fold %d: train %s, val %s, test %s", f, fold.train, fold.val, fold.test)
        gnet, dnet = Generator(), Discriminator()
        cb = (lambda row, f=f: progress(f, row)) if progress else None
        res = train_fold([slices[i] for i in fold.train], [slices[i] for i in fold.val], cfg,
                         gnet, dnet, progress=cb)
        save_fold(out, f, fold, res, gnet)
        results.append(res)
    return plan, results


@dataclass
class StudyResult:
    rows: list
    baseline_rows: list
    mean: MetricsRow
    baseline_mean: MetricsRow
    folds: list
    fold_results: list = field(repr=False)


def run_phantom_study(out_dir, count: int = 9, k: int = 3, cfg: TrainConfig | None = None,
                      spec: PhantomSpec | None = None, progress=None) -> StudyResult:
    """Phantoms seeded ``spec.seed + i``; every subject is tested exactly once."""
    cfg = cfg or TrainConfig()
    spec = spec or PhantomSpec()
    out = Path(out_dir)
    data_dir = out / "data"
    entries, data = [], {}
    for i, sid in enumerate(subject_ids(count)):
        ph = generate_phantom(PhantomSpec.from_dict({**spec.to_dict(), "seed": spec.seed + i}))
        entries.append(write_subject(ph, data_dir, sid))
        data[sid] = (ph.mr, ph.ct)
    write_manifest(data_dir, entries, spec, count)

    plan, results = train_folds(data, k, cfg, out / "train", progress)
    baseline_hu = TissueModel().soft.hu
    rows, base_rows = [], []
    sct_dir, row_dir = out / "sct", out / "rows"
    row_dir.mkdir(parents=True, exist_ok=True)
    for fold, res in zip(plan, results):
        for sid in fold.test:
            mr, ct = data[sid]
            sct = synthesize_volume(res.best_params, mr)
            save_volume(sct, sct_dir / sid)
            row = evaluate_subject(ct, sct, sid, tissue_hu=cfg.tissue_hu)
            (row_dir / f"{sid}.json").write_text(json.dumps(row.to_dict(), indent=2) + "\n")
            rows.append(row)
            flat = Volume3D(np.full(ct.dims, baseline_hu), ct.spacing, ct.origin, "HU")
            base_rows.append(evaluate_subject(ct, flat, sid, tissue_hu=cfg.tissue_hu))
    rows.sort(key=lambda r: r.subject)
    base_rows.sort(key=lambda r: r.subject)
    mean = write_report(rows, out / "table.csv")
    base_mean = write_report(base_rows, out / "baseline_table.csv")
    return StudyResult(rows, base_rows, mean, base_mean, plan, results)
