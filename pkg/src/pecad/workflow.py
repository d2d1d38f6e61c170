"""Command implementations behind the ``pecad`` CLI.

All artifacts live under ``RunConfig.run_dir``::

    data/manifest.json, data/<patient>.ctvol.{json,raw}, data/<patient>.mask.{json,raw}
    split.json
    checkpoints/{drn,mixnet,fpnet,segmenter}.{pt,json}
    logs/<target>.jsonl
    eval_<split>.json
    triage/<patient>/<patient>_report.json, <patient>_<slice>.png
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dataset import DatasetManifest, Split, SplitAssignment, load_mask, load_volume, split_by_patient
from .metrics import PatientConfusion, image_metrics, mean_iou, patient_metrics
from .nets import Arch, build_classifier, build_segmenter, config_hash
from .phantom import generate_cohort
from .preprocess import build_fp_reduction_dataset, rebalance_upsample, volume_records
from .training import load_checkpoint, save_checkpoint, train_model
from .training.checkpoint import CheckpointMismatchError, sidecar_path
from .triage import (
    Label,
    TriageModels,
    cascade_label,
    ensemble_predict,
    load_model,
    patient_verdict,
    run_triage,
    segment_flagged,
)

log = logging.getLogger(__name__)

TARGETS = ("drn", "mixnet", "fpnet", "segmenter")
TABLE_ROWS = ("DRN", "MixNet", "Ensemble", "Ensemble with false-positive reduction")


class UsageError(ValueError):
    pass


def _paths(run: RunConfig) -> dict:
    root = run.run_dir
    return {
        "root": root,
        "data": root / "data",
        "manifest": root / "data" / "manifest.json",
        "split": root / "split.json",
        "checkpoints": root / "checkpoints",
        "logs": root / "logs",
    }


def model_config(run: RunConfig, target: str):
    if target == "drn":
        return run.classifier(Arch.DRN)
    if target == "mixnet":
        return run.classifier(Arch.MIXNET)
    if target == "fpnet":
        return run.fp_classifier()
    if target == "segmenter":
        return run.segmenter()
    raise UsageError(f"unknown training target {target!r}")


def cmd_synth(run: RunConfig, n_pe=None, n_non_pe=None) -> Path:
    n_pe = run.data["dataset"]["n_pe"] if n_pe is None else n_pe
    n_non_pe = run.data["dataset"]["n_non_pe"] if n_non_pe is None else n_non_pe
    if n_pe < 0 or n_non_pe < 0 or n_pe + n_non_pe == 0:
        raise UsageError("synth needs a non-empty cohort (--pe/--non-pe)")
    p = _paths(run)
    generate_cohort(n_pe, n_non_pe, run.seed, run.phantom_template(), p["data"])
    return p["manifest"]


def cmd_split(run: RunConfig) -> Path:
    p = _paths(run)
    if not p["manifest"].exists():
        raise FileNotFoundError(f"no manifest at {p['manifest']}; run `pecad synth` first")
    manifest = DatasetManifest.load(p["manifest"])
    sec = run.data["dataset"]
    split = split_by_patient(manifest, tuple(sec["ratios"]), run.seed, stratify=bool(sec["stratify"]))
    return split.save(p["split"])


def _load_inputs(run: RunConfig):
    p = _paths(run)
    for key in ("manifest", "split"):
        if not p[key].exists():
            raise FileNotFoundError(f"missing {p[key]}; run `pecad synth` and `pecad split` first")
    return DatasetManifest.load(p["manifest"]), SplitAssignment.load(p["split"])


def _study(manifest: DatasetManifest, pid: str):
    e = manifest.entry(pid)
    volume = load_volume(manifest.resolve(e.volume_path))
    masks = load_mask(manifest.resolve(e.mask_path)) if e.mask_path else None
    return volume, masks


def _records(run, manifest, pids):
    cfg = run.preprocess()
    out = []
    for pid in pids:
        volume, masks = _study(manifest, pid)
        out.extend(volume_records(volume, cfg, masks=masks))
    return out


def _fp_records(run, manifest, pids):
    pe, non_pe = [], []
    for pid in pids:
        volume, masks = _study(manifest, pid)
        if volume.pe_label:
            if masks is None:
                raise ValueError(f"PE study {pid} has no mask; slice labels unknown")
            pe.append((volume, masks))
        else:
            non_pe.append(volume)
    return build_fp_reduction_dataset(pe, non_pe, run.preprocess()), len(pe)


def cmd_train(run: RunConfig, target: str, overwrite: bool = False) -> Path:
    if target not in TARGETS:
        raise UsageError(f"target must be one of {', '.join(TARGETS)}")
    manifest, split = _load_inputs(run)
    p = _paths(run)
    mcfg = model_config(run, target)
    tcfg = run.training(target)
    ckpt_path = p["checkpoints"] / f"{target}.pt"
    if sidecar_path(ckpt_path).exists() and not overwrite:
        existing = json.loads(sidecar_path(ckpt_path).read_text())
        if existing.get("config_hash") != config_hash(mcfg):
            raise CheckpointMismatchError(
                f"{ckpt_path} was trained with a different model config; pass --overwrite to replace it"
            )

    train_ids, val_ids = split.patients(Split.TRAIN), split.patients(Split.VAL)
    if target == "fpnet":
        train, n_pe = _fp_records(run, manifest, train_ids)
        if n_pe == 0 or not any(r.is_pe for r in train):
            raise ValueError("fpnet needs PE patients in the training split (empty positive set)")
        val, _ = _fp_records(run, manifest, val_ids)
    elif target == "segmenter":
        train = [r for r in _records(run, manifest, train_ids) if r.is_pe]
        val = [r for r in _records(run, manifest, val_ids) if r.is_pe]
        if not train:
            raise ValueError("segmenter needs masked PE slices in the training split")
    else:
        train = rebalance_upsample(_records(run, manifest, train_ids), run.preprocess().upsample_factor)
        val = _records(run, manifest, val_ids)

    torch.manual_seed(tcfg.seed)
    model = build_segmenter(mcfg) if target == "segmenter" else build_classifier(mcfg)
    log.info("training %s on %d records (%d val)", target, len(train), len(val))
    ckpt = train_model(model, train, val, tcfg, model_config=mcfg,
                       log_path=p["logs"] / f"{target}.jsonl")
    ckpt.metrics = {**ckpt.metrics, "run_config_hash": run.hash}
    return save_checkpoint(ckpt, ckpt_path)


def load_models(run: RunConfig, need_segmenter: bool = True) -> TriageModels:
    ck = _paths(run)["checkpoints"]
    missing = [t for t in TARGETS if not (ck / f"{t}.pt").exists()]
    if not need_segmenter and "segmenter" in missing:
        missing.remove("segmenter")
    if missing:
        raise FileNotFoundError(f"missing checkpoints: {', '.join(missing)} (run `pecad train <target>`)")
    digests = {}
    models = {}
    for target in TARGETS:
        if not (ck / f"{target}.pt").exists():
            continue
        kind = "segmenter" if target == "segmenter" else "classifier"
        models[target], digests[target] = load_model(ck / f"{target}.pt", model_config(run, target), kind)
    return TriageModels(
        members=[models["drn"], models["mixnet"]],
        fp_net=models["fpnet"],
        segmenter=models.get("segmenter"),
        digests=digests,
    )


def _row(labels, scores, preds=None, threshold=0.5):
    m = image_metrics(labels, scores, threshold, preds)
    return {"precision": m["precision"], "recall": m["recall"], "auc": m["auc"]}


def evaluate(run: RunConfig, models: TriageModels, manifest: DatasetManifest, pids) -> dict:
    """Table-2-layout per-image rows, per-patient rates and mean IoU for ``pids``."""
    threshold = float(run.data["metrics"]["threshold"])
    tcfg = run.triage()
    records = _records(run, manifest, pids)
    if not records:
        raise ValueError("no images in the evaluation split")
    x = torch.as_tensor(np.stack([r.image for r in records])[:, None])
    labels = np.array([int(r.is_pe) for r in records])
    drn = ensemble_predict(models.members[:1], x)
    mix = ensemble_predict(models.members[1:], x)
    ens = (drn + mix) / 2.0
    fp = ensemble_predict([models.fp_net], x)
    final = np.array([cascade_label(float(e), float(f), threshold) is Label.PE for e, f in zip(ens, fp)],
                     dtype=int)
    per_image = {
        "DRN": _row(labels, drn, threshold=threshold),
        "MixNet": _row(labels, mix, threshold=threshold),
        "Ensemble": _row(labels, ens, threshold=threshold),
        # min(ensemble, fp) >= t exactly when the cascade calls PE
        "Ensemble with false-positive reduction": _row(labels, np.minimum(ens, fp), preds=final),
    }

    truth, verdicts = [], []
    for pid in pids:
        idx = [i for i, r in enumerate(records) if r.patient_id == pid]
        v = patient_verdict([Label.PE if final[i] else Label.NON_PE for i in idx], pid)
        truth.append(manifest.entry(pid).pe_label)
        verdicts.append(v.verdict is Label.PE)
    pc = PatientConfusion.from_verdicts(truth, verdicts)
    per_patient = {**patient_metrics(pc), "confusion": {"tp": pc.tp, "fp": pc.fp, "tn": pc.tn, "fn": pc.fn}}

    masked = [i for i, r in enumerate(records) if r.mask is not None and r.mask.any()]
    segmentation: dict = {"n_masked_images": len(masked)}
    if masked and models.segmenter is not None:
        images = {i: records[i].image for i in masked}
        pred = segment_flagged(images, models.segmenter, masked, tcfg.mask_threshold)
        segmentation["mean_iou"] = mean_iou([pred[i] for i in masked], [records[i].mask for i in masked])

    return {
        "config_hash": run.hash,
        "threshold": threshold,
        "n_patients": len(pids),
        "n_images": len(records),
        "per_image": per_image,
        "table": [{"model": name, **per_image[name]} for name in TABLE_ROWS],
        "per_patient": per_patient,
        "segmentation": segmentation,
        "model_digests": models.digests,
    }


def format_table(report: dict) -> str:
    """Plain-text per-image table plus the per-patient line of an eval report."""
    lines = [f"{'model':<40} {'precision':>9} {'recall':>9} {'AUC':>9}"]
    for row in report["table"]:
        auc = "n/a" if row["auc"] is None else f"{row['auc']:.3f}"
        lines.append(f"{row['model']:<40} {row['precision']:>9.3f} {row['recall']:>9.3f} {auc:>9}")
    pp = report["per_patient"]
    lines.append(f"per patient: sensitivity {pp['sensitivity']:.3f} specificity {pp['specificity']:.3f} "
                 f"ppv {pp['ppv']:.3f} npv {pp['npv']:.3f}")
    if "mean_iou" in report["segmentation"]:
        lines.append(f"mean IoU {report['segmentation']['mean_iou']:.3f}")
    return "\n".join(lines)


def cmd_eval(run: RunConfig, split: str = "TEST") -> Path:
    split = Split(split.upper())
    if split is Split.TRAIN:
        raise UsageError("eval runs on VAL or TEST")
    manifest, assignment = _load_inputs(run)
    models = load_models(run)
    report = evaluate(run, models, manifest, assignment.patients(split))
    report["split"] = split.value
    path = run.run_dir / f"eval_{split.value.lower()}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def cmd_triage(run: RunConfig, volume_path, out_dir=None):
    """Returns (report, report path)."""
    volume = load_volume(volume_path)
    models = load_models(run)
    out_dir = Path(out_dir) if out_dir else run.run_dir / "triage" / volume.patient_id
    report = run_triage(volume, models, run.triage(), out_dir, config_digest=run.hash)
    return report, out_dir / f"{volume.patient_id}_report.json"
