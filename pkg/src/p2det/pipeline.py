"""End-to-end workflows shared by the CLI and the acceptance tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from p2det import checkpoint
from p2det.config import RunConfig, parse_config
from p2det.dataset import SceneRecord, load_dataset, write_dataset
from p2det.detector import Detection, Model, predict, train
from p2det.evaluation import evaluate
from p2det.losses import LossBreakdown
from p2det.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    model: Model
    config: RunConfig
    norm: tuple[float, float]
    history: list[LossBreakdown]
    steps: int = 0  # survives a checkpoint round trip, unlike ``history``


def generate(cfg: RunConfig, out: str | Path) -> dict:
    d = cfg.data
    return write_dataset(out, cfg.scene, d.seed, d.n_train, d.n_test)


def _norm_from_manifest(manifest: dict) -> tuple[float, float]:
    sc = manifest["scene_config"]
    return float(sc["norm_mean"]), float(sc["norm_std"])


def train_on_dataset(cfg: RunConfig, data_dir: str | Path, on_step: Callable[[int, LossBreakdown], None] | None = None) -> TrainedModel:
    """Train from the dataset's train split; normalization comes from the dataset's scene config."""
    records, manifest = load_dataset(data_dir, "train")
    norm = _norm_from_manifest(manifest)
    model = Model(cfg.model, init_seed=cfg.train.init_seed)
    history = train(model, records, cfg.train, cfg.assigner.settings(), cfg.loss.settings(), norm, on_step)
    return TrainedModel(model, cfg, norm, history, len(history))


def checkpoint_meta(tm: TrainedModel) -> dict:
    return {"run_config": tm.config.model_dump(mode="json"), "norm": list(tm.norm), "steps": tm.steps}


def save_model(path: str | Path, tm: TrainedModel) -> None:
    checkpoint.save(path, {k: t.data for k, t in tm.model.params.items()}, checkpoint_meta(tm))


def load_model(path: str | Path) -> TrainedModel:
    tensors, meta = checkpoint.load(path)
    try:
        cfg = parse_config(meta["run_config"])
        norm = tuple(float(v) for v in meta["norm"])
        steps = int(meta["steps"])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"checkpoint meta lacks {exc}") from None
    template = Model(cfg.model, init_seed=0).params
    if set(template) != set(tensors):
        raise checkpoint.CheckpointError("checkpoint tensors do not match the model config")
    bad = [k for k in template if template[k].shape != tensors[k].shape]
    if bad:
        raise checkpoint.CheckpointError(f"shape mismatch for {bad[:3]}")
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in tensors.items()}
    return TrainedModel(Model(cfg.model, params=params), cfg, norm, [], steps)


def detect(tm: TrainedModel, image: np.ndarray, prompts) -> list[Detection]:
    e = tm.config.eval
    return predict(tm.model, image, prompts, tm.norm, e.score_thresh, e.nms_iou, e.max_dets)


def evaluate_model(tm: TrainedModel, records: Sequence[SceneRecord]):
    """(metrics, curves, detections per record) on ``records``."""
    per_image, all_dets = [], []
    for rec in records:
        dets = detect(tm, rec.image, rec.prompts)
        all_dets.append(dets)
        per_image.append((dets, [d.score for d in dets], rec.gts))
    metrics, curves = evaluate(per_image, tm.config.eval.iou_thresholds, tm.config.eval.max_dets)
    return metrics, curves, all_dets


def evaluate_on_dataset(tm: TrainedModel, data_dir: str | Path, split: str = "test"):
    records, _ = load_dataset(data_dir, split)
    return evaluate_model(tm, records)


def metrics_json(metrics: dict[str, float]) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def curves_csv(curves) -> str:
    lines = ["iou_threshold,rank,precision,recall"]
    for thr in sorted(curves):
        precision, recall = curves[thr]
        lines.extend(f"{float(thr)!r},{i + 1},{float(p)!r},{float(r)!r}" for i, (p, r) in enumerate(zip(precision, recall)))
    return "\n".join(lines) + "\n"


def detections_jsonl(image_id: str, dets: Sequence[Detection]) -> str:
    rows = [
        json.dumps({"image": image_id, "corners": d.quad.ravel().tolist(), "score": d.score, "class": d.class_id},
                   sort_keys=True, separators=(",", ":"))
        for d in dets
    ]
    return "".join(r + "\n" for r in rows)


__all__ = [
    "TrainedModel",
    "generate",
    "train_on_dataset",
    "save_model",
    "load_model",
    "detect",
    "evaluate_model",
    "evaluate_on_dataset",
    "metrics_json",
    "curves_csv",
    "detections_jsonl",
]
