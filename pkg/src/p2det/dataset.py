"""On-disk synthetic dataset.

Directory layout::

    dataset.json        config, seed, PRNG name, format version, split lists
    scenes/{id}.f32     raw little-endian float32, S x S, row-major
    annotations.jsonl   {"image", "corners": [x1, y1, ..., x4, y4], "class"} per GT
    prompts.jsonl       {"image", "points": [[x, y], ...]} per scene
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from p2det.geometry import OrientedBox, canonical_quad, corners_to_obb, obb_to_corners
from p2det.prompt_encoder import PointPrompt
from p2det.synthgen import PRNG_ALGORITHM, SceneConfig, gen_scene

DATASET_VERSION = 1
SPLITS = ("train", "test")


class DatasetError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class SceneRecord:
    id: str
    image: np.ndarray  # (1, S, S) float64 (values exactly representable in float32)
    gts: list[OrientedBox]
    prompts: list[PointPrompt]


def scene_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(out: str | Path, cfg: SceneConfig, seed: int, n_train: int, n_test: int) -> dict:
    out = Path(out)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {}
    ann_lines, prompt_lines = [], []
    for split, count in (("train", n_train), ("test", n_test)):
        ids = []
        for i in range(count):
            sid = f"{split}_{i:04d}"
            scene = gen_scene(cfg, scene_seed(seed, split, i))
            (out / "scenes" / f"{sid}.f32").write_bytes(scene.image[0].astype("<f4").tobytes())
            for gt in scene.gts:
                ann_lines.append(_dump_line({"image": sid, "corners": obb_to_corners(gt).ravel().tolist(), "class": 0}))
            prompt_lines.append(_dump_line({"image": sid, "points": [[p.x, p.y] for p in scene.prompts]}))
            ids.append(sid)
        splits[split] = ids
    (out / "annotations.jsonl").write_text("".join(line + "\n" for line in ann_lines))
    (out / "prompts.jsonl").write_text("".join(line + "\n" for line in prompt_lines))
    manifest = {
        "format_version": DATASET_VERSION,
        "prng": PRNG_ALGORITHM,
        "seed": seed,
        "scene_config": cfg.model_dump(mode="json"),
        "splits": splits,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{n}: {exc.msg}") from None
    return rows


def load_annotations(path: str | Path) -> dict[str, list[OrientedBox]]:
    """GT boxes per image; corners may be in any winding."""
    out: dict[str, list[OrientedBox]] = defaultdict(list)
    for n, row in enumerate(read_jsonl(path), 1):
        try:
            out[row["image"]].append(corners_to_obb(canonical_quad(row["corners"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: bad annotation on record {n}: {exc}") from None
    return dict(out)


def load_prompts(path: str | Path) -> dict[str, list[PointPrompt]]:
    try:
        return {row["image"]: [PointPrompt(float(x), float(y)) for x, y in row["points"]] for row in read_jsonl(path)}
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: bad prompt record: {exc}") from None


def read_scene_image(path: str | Path) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    side = int(round(np.sqrt(raw.size)))
    if side * side != raw.size:
        raise DatasetError(f"{path}: {raw.size} floats do not form a square image")
    return raw.astype(np.float64).reshape(1, side, side)


def load_dataset(root: str | Path, split: str) -> tuple[list[SceneRecord], dict]:
    root = Path(root)
    try:
        manifest = json.loads((root / "dataset.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root / 'dataset.json'}: {exc.msg}") from None
    if manifest.get("format_version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')!r}")
    if split not in manifest.get("splits", {}):
        raise DatasetError(f"split {split!r} not in dataset")
    anns = load_annotations(root / "annotations.jsonl")
    prompts = load_prompts(root / "prompts.jsonl")
    records = [
        SceneRecord(sid, read_scene_image(root / "scenes" / f"{sid}.f32"), anns.get(sid, []), prompts.get(sid, []))
        for sid in manifest["splits"][split]
    ]
    return records, manifest
