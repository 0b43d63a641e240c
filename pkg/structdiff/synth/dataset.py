"""
Synthetic dataset generation, on-disk format and torch datasets

Disk layout under out_dir:
    rgb/<id>.png      8-bit RGB
    depth/<id>.png    16-bit gray, value = round((depth + 1) / 2 * 65535)
    normal/<id>.png   8-bit RGB, value = round((n + 1) / 2 * 255)
    manifest.jsonl    one row per sample, "schema": 1
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset
from tqdm import tqdm

from structdiff.synth.figure import (
    FIGURE_COLORS,
    JOINTS,
    Keypoint,
    ModalityBundle,
    foreground_bbox,
    rasterize_skeleton,
    render_scene,
    sample_scene_params,
    shade,
)
from structdiff.utils.errors import DatasetIOError, InvalidRangeError, RenderError, SchemaError
from structdiff.utils.helpers import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
MANIFEST_NAME = "manifest.jsonl"


def sample_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "sample", index)


def split_assignment(n: int, seed: int, val_fraction: float = 0.1) -> List[str]:
    """The round(n * val_fraction) samples with the lowest seed-hash go to val."""
    n_val = int(round(n * val_fraction))
    hashes = [hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in range(n)]
    val = set(sorted(range(n), key=lambda i: hashes[i])[:n_val])
    return ["val" if i in val else "train" for i in range(n)]


def aesthetic_score(seed: int) -> float:
    """Stand-in aesthetic score in [3.5, 6.5), deterministic per sample."""
    rng = np.random.default_rng(derive_seed(seed, "aesthetic"))
    return round(float(rng.uniform(3.5, 6.5)), 3)


def render_sample(seed: int, index: int, R: int, margin: int = 0, crop: bool = False) -> ModalityBundle:
    params = sample_scene_params(sample_seed(seed, index))
    top = left = 0
    if margin and crop:
        rng = np.random.default_rng(derive_seed(seed, "crop", index))
        top, left = (int(v) for v in rng.integers(0, margin + 1, size=2))
    elif margin:
        top = left = margin // 2
    return render_scene(params, R, margin=margin, crop_top=top, crop_left=left)


# ---------------------------------------------------------------------------
# PNG codecs
# ---------------------------------------------------------------------------

def encode_rgb(rgb: np.ndarray) -> Image.Image:
    q = np.round((np.asarray(rgb) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    return Image.fromarray(q.transpose(1, 2, 0), mode="RGB")


def decode_rgb(img: Image.Image) -> np.ndarray:
    return (np.asarray(img.convert("RGB"), dtype=np.float32) / 127.5 - 1.0).transpose(2, 0, 1).copy()


def encode_depth(depth: np.ndarray) -> Image.Image:
    q = np.round((np.asarray(depth[0], dtype=np.float64) + 1.0) / 2.0 * 65535.0).clip(0, 65535).astype(np.uint16)
    return Image.fromarray(q)


def decode_depth(img: Image.Image) -> np.ndarray:
    q = np.asarray(img).astype(np.float64)
    return (q / 65535.0 * 2.0 - 1.0)[None].astype(np.float32)


def encode_normal(normal: np.ndarray) -> Image.Image:
    q = np.round((np.asarray(normal) + 1.0) / 2.0 * 255.0).clip(0, 255).astype(np.uint8)
    return Image.fromarray(q.transpose(1, 2, 0), mode="RGB")


def decode_normal(img: Image.Image) -> np.ndarray:
    n = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=0, keepdims=True)
    return (n / np.maximum(norm, 1e-6)).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest rows
# ---------------------------------------------------------------------------

def manifest_row(bundle: ModalityBundle, index: int, seed: int, split: str) -> Dict:
    image_id = f"{index:06d}"
    R = bundle.resolution
    bbox = foreground_bbox(bundle.limb_ids)
    bboxes = [] if bbox is None else [{"x": bbox[0], "y": bbox[1], "w": bbox[2], "h": bbox[3], "confidence": 1.0}]
    annotations = [] if bbox is None else [{"label": "figure", "x": bbox[0], "y": bbox[1], "w": bbox[2], "h": bbox[3]}]
    return {
        "schema": MANIFEST_SCHEMA,
        "index": index,
        "image_id": image_id,
        "seed": sample_seed(seed, index),
        "split": split,
        "resolution": R,
        "attributes": list(bundle.attributes),
        "keypoints": [[round(k.x, 4), round(k.y, 4), bool(k.visible)] for k in bundle.keypoints],
        "sizecrop": list(bundle.sizecrop),
        "files": {
            "rgb": f"rgb/{image_id}.png",
            "depth": f"depth/{image_id}.png",
            "normal": f"normal/{image_id}.png",
        },
        "width": R,
        "height": R,
        "human_bboxes": bboxes,
        "aesthetic_score": aesthetic_score(sample_seed(seed, index)),
        "annotations": annotations,
        "outpaint_margin": 0,
    }


def read_manifest(path: Union[str, Path]) -> List[Dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path, "r", encoding="utf-8") as f:
            rows = [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise DatasetIOError(f"could not read manifest {path}: {e}", {"path": str(path)}) from e
    for row in rows:
        if row.get("schema") != MANIFEST_SCHEMA:
            raise SchemaError(f"unsupported manifest schema in {path}", {"row": row.get("index"), "schema": row.get("schema")})
    return rows


def load_bundle(row: Dict, root: Union[str, Path]) -> ModalityBundle:
    """Read one manifest row back from its PNG files."""
    root = Path(root)
    try:
        rgb = decode_rgb(Image.open(root / row["files"]["rgb"]))
        depth = decode_depth(Image.open(root / row["files"]["depth"]))
        normal = decode_normal(Image.open(root / row["files"]["normal"]))
    except OSError as e:
        raise DatasetIOError(f"could not read sample {row.get('image_id')}: {e}", {"root": str(root)}) from e
    keypoints = [Keypoint(float(x), float(y), bool(v)) for x, y, v in row["keypoints"]]
    background = depth[0] <= -1.0 + 1e-4
    limb_ids = np.where(background, -1, 0).astype(np.int64)
    return ModalityBundle(
        rgb=rgb, depth=depth, normal=normal, keypoints=keypoints,
        attributes=tuple(row["attributes"]), limb_ids=limb_ids,
        sizecrop=tuple(row.get("sizecrop", (rgb.shape[-1], rgb.shape[-1], 0, 0))),
    )


def _write_sample(out_dir: Path, bundle: ModalityBundle, row: Dict):
    for key, encode in (("rgb", encode_rgb), ("depth", encode_depth), ("normal", encode_normal)):
        target = out_dir / row["files"][key]
        try:
            encode(getattr(bundle, key)).save(target, "PNG")
        except OSError as e:
            raise DatasetIOError(f"could not write {target}: {e}", {"path": str(target)}) from e


def generate_dataset(n: int, R: int, seed: int, out_dir: Union[str, Path], val_fraction: float = 0.1, workers: int = 0, validate: bool = False) -> Dict:
    """
    Render n samples to out_dir and write the JSONL manifest.

    Returns:
        Dict with manifest path, counts per split and the manifest rows
    """
    if n < 1:
        raise InvalidRangeError("need at least one sample", {"n": n})
    out_dir = Path(out_dir)
    try:
        for sub in ("rgb", "depth", "normal"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"could not create {out_dir}: {e}", {"path": str(out_dir)}) from e

    splits = split_assignment(n, seed, val_fraction)

    def work(index: int) -> Dict:
        bundle = render_sample(seed, index, R)
        if validate:
            problems = validate_bundle(bundle)
            if problems:
                raise RenderError(f"sample {index} violates invariants", {"problems": problems})
        row = manifest_row(bundle, index, seed, splits[index])
        _write_sample(out_dir, bundle, row)
        return row

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(work, range(n)), total=n, desc="gen-data"))
    else:
        rows = [work(i) for i in tqdm(range(n), desc="gen-data")]

    manifest_path = out_dir / MANIFEST_NAME
    try:
        with open(manifest_path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"could not write {manifest_path}: {e}", {"path": str(manifest_path)}) from e

    counts = {"train": splits.count("train"), "val": splits.count("val")}
    logger.info(f"✅ Generated {n} samples at R={R} into {out_dir} ({counts['train']} train / {counts['val']} val)")
    return {"manifest": str(manifest_path), "counts": counts, "rows": rows}


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def validate_bundle(bundle: ModalityBundle, atol: float = 1e-4) -> List[str]:
    """Return a list of invariant violations (empty when the bundle is valid)."""
    problems = []
    R = bundle.resolution
    if bundle.depth.shape[-2:] != bundle.rgb.shape[-2:] or bundle.normal.shape[-2:] != bundle.rgb.shape[-2:]:
        problems.append("maps differ in size")
        return problems
    if bundle.rgb.min() < -1 - 1e-6 or bundle.rgb.max() > 1 + 1e-6:
        problems.append("rgb outside [-1, 1]")
    if bundle.depth.min() < -1 - 1e-6 or bundle.depth.max() > 1 + 1e-6:
        problems.append("depth outside [-1, 1]")
    norms = np.linalg.norm(bundle.normal.astype(np.float64), axis=0)
    if np.max(np.abs(norms - 1.0)) > atol:
        problems.append("normal not unit length")
    bg = bundle.limb_ids < 0
    if bg.any():
        sentinel = bundle.normal[:, bg]
        if np.max(np.abs(sentinel - np.array([[0.0], [0.0], [1.0]]))) > atol:
            problems.append("background normal is not the sentinel")
    for name, k in zip(JOINTS, bundle.keypoints):
        if k.visible and not (0 <= k.x < R and 0 <= k.y < R):
            problems.append(f"visible keypoint {name} out of bounds")
    if bundle.params is not None:
        fg = ~bg
        if fg.any():
            lit = shade(bundle.normal.astype(np.float64), FIGURE_COLORS[bundle.params.color_id])
            stored = (bundle.rgb.astype(np.float64) + 1.0) / 2.0
            if np.max(np.abs(lit[:, fg] - stored[:, fg])) > 2.0 / 255.0:
                problems.append("rgb does not match relit normals")
    return problems


# ---------------------------------------------------------------------------
# torch datasets
# ---------------------------------------------------------------------------

def bundle_to_item(bundle: ModalityBundle) -> Dict[str, torch.Tensor]:
    R = bundle.resolution
    return {
        "rgb": torch.from_numpy(np.ascontiguousarray(bundle.rgb)),
        "depth": torch.from_numpy(np.ascontiguousarray(bundle.depth)),
        "normal": torch.from_numpy(np.ascontiguousarray(bundle.normal)),
        "pose": torch.from_numpy(rasterize_skeleton(bundle.keypoints, R)),
        "attrs": torch.tensor(bundle.attributes, dtype=torch.long),
        "sizecrop": torch.tensor(bundle.sizecrop, dtype=torch.float32),
        "keypoints": torch.from_numpy(bundle.keypoint_array()),
    }


class SceneDataset(Dataset):
    """
    Samples addressed by (seed, index).

    source="render" re-renders each sample from its seed at any resolution,
    source="disk" reads the PNGs listed in the manifest.
    """

    def __init__(self, rows: List[Dict], resolution: Optional[int] = None, root: Optional[Union[str, Path]] = None, source: str = "render", crop_margin: int = 0, cache: bool = True):
        if source not in ("render", "disk"):
            raise InvalidRangeError(f"unknown dataset source '{source}'")
        if source == "disk" and root is None:
            raise InvalidRangeError("disk datasets need a root directory")
        self.rows = list(rows)
        self.resolution = resolution or (self.rows[0]["resolution"] if self.rows else 48)
        self.root = Path(root) if root is not None else None
        self.source = source
        self.crop_margin = crop_margin
        self.cache = cache
        self._items: Dict[int, Dict[str, torch.Tensor]] = {}
        if source == "disk" and self.rows and self.rows[0]["resolution"] != self.resolution:
            raise InvalidRangeError(
                "disk datasets are only available at their stored resolution",
                {"stored": self.rows[0]["resolution"], "requested": self.resolution},
            )

    @classmethod
    def from_manifest(cls, path: Union[str, Path], split: Optional[str] = None, **kwargs) -> "SceneDataset":
        path = Path(path)
        root = path if path.is_dir() else path.parent
        rows = read_manifest(path)
        if split is not None:
            rows = [r for r in rows if r["split"] == split]
        kwargs.setdefault("root", root)
        return cls(rows, **kwargs)

    @classmethod
    def synthetic(cls, n: int, seed: int, resolution: int = 48, split: Optional[str] = None, val_fraction: float = 0.1, **kwargs) -> "SceneDataset":
        """In-memory dataset with the same seeds and splits generate_dataset would write."""
        splits = split_assignment(n, seed, val_fraction)
        rows = [
            {"index": i, "seed": sample_seed(seed, i), "split": splits[i], "resolution": resolution}
            for i in range(n)
            if split is None or splits[i] == split
        ]
        return cls(rows, resolution=resolution, **kwargs)

    def __len__(self) -> int:
        return len(self.rows)

    def bundle(self, idx: int) -> ModalityBundle:
        row = self.rows[idx]
        if self.source == "disk":
            return load_bundle(row, self.root)
        params = sample_scene_params(row["seed"])
        if self.crop_margin:
            margin = self.crop_margin * self.resolution // 48
            rng = np.random.default_rng(derive_seed(row["seed"], "crop"))
            top, left = (int(v) for v in rng.integers(0, margin + 1, size=2))
            return render_scene(params, self.resolution, margin=margin, crop_top=top, crop_left=left)
        return render_scene(params, self.resolution)

    def __getitem__(self, idx: int) -> Dict[str, torch.Tensor]:
        if idx in self._items:
            return self._items[idx]
        item = bundle_to_item(self.bundle(idx))
        if self.cache:
            self._items[idx] = item
        return item

    def stacked(self, indices: Optional[Iterable[int]] = None) -> Dict[str, torch.Tensor]:
        """Collate a set of items into batch tensors."""
        indices = range(len(self)) if indices is None else indices
        items = [self[i] for i in indices]
        return {k: torch.stack([it[k] for it in items]) for k in items[0]}
