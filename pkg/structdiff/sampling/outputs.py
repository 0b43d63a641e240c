"""
Sample outputs: labeled PNG grids and compressed array bundles
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from structdiff.utils.errors import DatasetIOError, SchemaError

logger = logging.getLogger(__name__)

GRID_COLUMNS = ("pose", "normal", "depth", "coarse RGB", "refined RGB")
HEADER_HEIGHT = 18
SAMPLE_KEYS = ("rgb", "depth", "normal", "pose", "attrs", "keypoints", "rgb_high")


def to_image(x: Optional[torch.Tensor], kind: str, size: int) -> Image.Image:
    """One [C, H, W] tensor to an RGB tile; missing tensors become gray tiles."""
    if x is None:
        return Image.new("RGB", (size, size), (64, 64, 64))
    arr = x.detach().cpu().to(torch.float32).numpy()
    if kind == "pose":
        arr = arr.clip(0.0, 1.0)
    else:
        arr = ((arr + 1.0) / 2.0).clip(0.0, 1.0)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    img = Image.fromarray(np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8), mode="RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return img


def _font():
    try:
        return ImageFont.truetype("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf", 11)
    except OSError:
        logger.debug("System fonts not found, using default")
        return ImageFont.load_default()


def write_labeled_grid(
    path: Union[str, Path],
    pose: torch.Tensor,
    normal: Optional[torch.Tensor],
    depth: Optional[torch.Tensor],
    coarse: Optional[torch.Tensor],
    refined: Optional[torch.Tensor] = None,
) -> Path:
    """
    One row per sample, columns pose | normal | depth | coarse RGB | refined RGB.
    Every tile is resized to the largest input resolution.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [pose, normal, depth, coarse, refined]
    kinds = ["pose", "normal", "depth", "rgb", "rgb"]
    size = max(x.shape[-1] for x in columns if x is not None)
    B = pose.shape[0]
    tile_w = max(size, 72)
    grid = Image.new("RGB", (tile_w * len(columns), HEADER_HEIGHT + size * B), (255, 255, 255))
    draw = ImageDraw.Draw(grid)
    font = _font()
    for c, label in enumerate(GRID_COLUMNS):
        bbox = draw.textbbox((0, 0), label, font=font)
        x = c * tile_w + (tile_w - (bbox[2] - bbox[0])) / 2
        draw.text((x, 2), label, font=font, fill=(0, 0, 0))
    for b in range(B):
        for c, (x, kind) in enumerate(zip(columns, kinds)):
            tile = to_image(x[b] if x is not None else None, kind, size)
            grid.paste(tile, (c * tile_w + (tile_w - size) // 2, HEADER_HEIGHT + b * size))
    grid.save(path)
    logger.info(f"Wrote sample grid {path} ({B} rows)")
    return path


def save_samples(path: Union[str, Path], **arrays: Optional[torch.Tensor]) -> Path:
    """Store sample tensors (rgb, depth, normal, pose, attrs, keypoints, rgb_high) as one .npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    unknown = [k for k in arrays if k not in SAMPLE_KEYS]
    if unknown:
        raise SchemaError(f"unknown sample arrays {unknown}", {"allowed": list(SAMPLE_KEYS)})
    data = {k: v.detach().cpu().numpy() for k, v in arrays.items() if v is not None}
    np.savez_compressed(path, **data)
    return path


def load_samples(path: Union[str, Path]) -> Dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"sample file not found: {path}", {"path": str(path)})
    with np.load(path) as data:
        return {k: torch.from_numpy(data[k]) for k in data.files}


def list_sample_files(directory: Union[str, Path]) -> List[Path]:
    return sorted(Path(directory).glob("*.npz"))
