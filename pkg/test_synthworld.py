"""
Unit tests for the synthetic scene renderer and dataset format
"""
import hashlib
import json
import math

import numpy as np
import pytest
import torch

from structdiff.synth.dataset import (
    MANIFEST_NAME,
    SceneDataset,
    decode_depth,
    encode_depth,
    generate_dataset,
    read_manifest,
    render_sample,
    split_assignment,
    validate_bundle,
)
from structdiff.synth.figure import (
    BASE_RADII,
    JOINTS,
    LIMB_NAMES,
    LIMBS,
    REFERENCE_RES,
    SENTINEL_NORMAL,
    SceneParams,
    joint_positions,
    rasterize_skeleton,
    render_scene,
    sample_scene_params,
)
from structdiff.utils.errors import DatasetIOError, InvalidRangeError, SchemaError


@pytest.mark.parametrize("R", [16, 48])
def test_rendered_scenes_satisfy_invariants(R):
    """
    Test that rendered bundles pass every modality invariant.

    This test verifies:
    - rgb and depth lie in [-1, 1]
    - normals are unit length with the sentinel on background
    - rgb equals the relit normals on the figure
    """
    for index in range(6):
        bundle = render_sample(0, index, R)
        assert bundle.rgb.shape == (3, R, R)
        assert bundle.depth.shape == (1, R, R)
        assert bundle.normal.shape == (3, R, R)
        assert len(bundle.keypoints) == len(JOINTS)
        assert validate_bundle(bundle) == []


def test_render_is_deterministic():
    """Test that the same (seed, index) always renders the same scene."""
    a = render_sample(7, 2, 32)
    b = render_sample(7, 2, 32)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)
    assert a.attributes == b.attributes


def test_background_depth_is_far_plane():
    """
    Test that background pixels carry depth -1 and figure pixels are nearer.
    """
    bundle = render_sample(0, 0, 48)
    bg = bundle.limb_ids < 0
    assert bg.any() and (~bg).any()
    assert np.allclose(bundle.depth[0][bg], -1.0)
    assert np.all(bundle.depth[0][~bg] > -1.0)


def test_render_rejects_small_canvas_and_bad_crop():
    params = sample_scene_params(0)
    with pytest.raises(InvalidRangeError):
        render_scene(params, 8)
    with pytest.raises(InvalidRangeError):
        render_scene(params, 32, margin=4, crop_top=5)


def test_margin_crop_records_sizecrop():
    """Test that rendering on a larger canvas stores (size, size, top, left)."""
    params = sample_scene_params(3)
    bundle = render_scene(params, 32, margin=8, crop_top=2, crop_left=6)
    assert bundle.sizecrop == (40, 40, 2, 6)
    assert bundle.rgb.shape == (3, 32, 32)


def test_skeleton_raster_colors_visible_limbs():
    """
    Test that the pose raster draws limbs and leaves background black.

    This test verifies:
    - output is float [3, R, R] in [0, 1]
    - some pixels are drawn
    - hiding every joint yields an empty raster
    """
    bundle = render_sample(0, 1, 32)
    raster = rasterize_skeleton(bundle.keypoints, 32)
    assert raster.shape == (3, 32, 32)
    assert raster.min() >= 0.0 and raster.max() <= 1.0
    assert raster.sum() > 0
    hidden = [k._replace(visible=False) for k in bundle.keypoints]
    assert rasterize_skeleton(hidden, 32).sum() == 0


def test_split_assignment_counts():
    splits = split_assignment(20, 0, val_fraction=0.25)
    assert splits.count("val") == 5
    assert splits == split_assignment(20, 0, val_fraction=0.25)


def test_depth_png_quantization():
    """Test that 16-bit depth PNGs round-trip within one quantization step."""
    depth = np.linspace(-1, 1, 256, dtype=np.float32).reshape(1, 16, 16)
    restored = decode_depth(encode_depth(depth))
    assert np.max(np.abs(restored - depth)) <= 2.0 / 65535 + 1e-6


def test_generate_dataset_writes_manifest(tiny_dataset, tmp_path):
    """
    Test that generate_dataset writes PNGs and a JSONL manifest.

    This test verifies:
    - one manifest row per sample with schema 1
    - split counts match the requested fraction
    - the disk dataset reloads the stored maps
    """
    out = tmp_path / "data"
    rows = read_manifest(out / MANIFEST_NAME)

    assert len(rows) == 12
    assert tiny_dataset["counts"] == {"train": 9, "val": 3}
    assert all(r["schema"] == 1 for r in rows)
    assert (out / rows[0]["files"]["rgb"]).exists()
    assert (out / rows[0]["files"]["depth"]).exists()

    disk = SceneDataset.from_manifest(out / MANIFEST_NAME, source="disk")
    rendered = SceneDataset.synthetic(12, 0, 16, val_fraction=0.25)
    item, reference = disk[0], rendered[0]
    assert item["rgb"].shape == (3, 16, 16)
    assert torch.allclose(item["rgb"], reference["rgb"], atol=1e-5)
    assert torch.allclose(item["depth"], reference["depth"], atol=1e-4)


def test_synthetic_dataset_matches_split(tiny_dataset):
    train = SceneDataset.synthetic(12, 0, 16, split="train", val_fraction=0.25)
    val = SceneDataset.synthetic(12, 0, 16, split="val", val_fraction=0.25)
    assert len(train) == 9 and len(val) == 3
    batch = train.stacked([0, 1])
    assert batch["attrs"].shape == (2, 3)
    assert batch["keypoints"].shape == (2, 9, 3)


def test_manifest_errors(tmp_path):
    with pytest.raises(DatasetIOError):
        read_manifest(tmp_path / "missing.jsonl")
    bad = tmp_path / MANIFEST_NAME
    bad.write_text(json.dumps({"schema": 99, "index": 0}) + "\n")
    with pytest.raises(SchemaError):
        read_manifest(bad)


def _digest(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


def _limb_coverage(params: SceneParams, R: int):
    """Capsule mask per limb, each limb drawn on its own."""
    scale = R / REFERENCE_RES
    pos = {k: v * scale for k, v in joint_positions(params).items()}
    ys, xs = np.meshgrid(np.arange(R) + 0.5, np.arange(R) + 0.5, indexing="ij")
    masks = {}
    for name, (j1, j2) in LIMBS.items():
        if params.lengths[name] <= 0:
            masks[name] = np.zeros((R, R), dtype=bool)
            continue
        a, b = pos[j1], pos[j2]
        r = params.radii[name] * scale
        ab = b - a
        u = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / float(ab @ ab), 0.0, 1.0)
        dx = xs - (a[0] + u * ab[0])
        dy = ys - (a[1] + u * ab[1])
        masks[name] = dx * dx + dy * dy < r * r
    return masks


def _single_limb_scene(name: str, length: float, radius: float, angle: float, root) -> SceneParams:
    return SceneParams(
        angles={n: (angle if n == name else 0.0) for n in LIMB_NAMES},
        lengths={n: (length if n == name else 0.0) for n in LIMB_NAMES},
        radii={n: (radius if n == name else BASE_RADII[n]) for n in LIMB_NAMES},
        depth_offsets={n: 0.1 * i for i, n in enumerate(LIMB_NAMES)},
        root=root,
    )


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_nearest_limb_wins_every_pixel(seed):
    """
    Test the depth ordering against a brute-force per-limb coverage.

    This test verifies:
    - a pixel is figure exactly when some limb capsule covers it
    - the visible limb is the covering limb with the smallest depth offset
    - depth increases towards the camera with the winning limb
    """
    params = sample_scene_params(seed)
    bundle = render_scene(params, REFERENCE_RES)
    masks = _limb_coverage(params, REFERENCE_RES)
    covered = np.stack([masks[n] for n in LIMB_NAMES])
    offsets = np.array([params.depth_offsets[n] for n in LIMB_NAMES])

    assert np.array_equal(covered.any(axis=0), bundle.limb_ids >= 0)
    ranked = np.where(covered, offsets[:, None, None], np.inf)
    expected = np.where(covered.any(axis=0), ranked.argmin(axis=0), -1)
    assert np.array_equal(bundle.limb_ids, expected)


@pytest.mark.parametrize("seed", [0, 5, 11])
def test_visible_keypoints_lie_on_their_limbs(seed):
    """Test that every visible joint's pixel is covered by a limb ending at that joint."""
    params = sample_scene_params(seed)
    bundle = render_scene(params, REFERENCE_RES)
    masks = _limb_coverage(params, REFERENCE_RES)

    for name, k in zip(JOINTS, bundle.keypoints):
        if not k.visible:
            continue
        y, x = int(math.floor(k.y)), int(math.floor(k.x))
        own = [limb for limb, ends in LIMBS.items() if name in ends and params.lengths[limb] > 0]
        assert any(masks[limb][y, x] for limb in own), name
        assert bundle.limb_ids[y, x] >= 0


def test_zero_length_limbs_render_as_background():
    """
    Test that limbs of zero length draw nothing.

    This test verifies:
    - a zeroed forearm never appears in the limb id map
    - a figure with every limb zeroed renders as pure background
    """
    params = sample_scene_params(0)
    params.lengths["l_forearm"] = 0.0
    bundle = render_scene(params, REFERENCE_RES)
    assert not (bundle.limb_ids == LIMB_NAMES.index("l_forearm")).any()
    assert validate_bundle(bundle) == []

    empty = sample_scene_params(0)
    empty.lengths = {n: 0.0 for n in LIMB_NAMES}
    bundle = render_scene(empty, REFERENCE_RES)
    assert (bundle.limb_ids == -1).all()
    assert np.allclose(bundle.depth, -1.0)
    assert np.allclose(bundle.normal, np.array(SENTINEL_NORMAL, dtype=np.float32)[:, None, None])


def test_centered_capsule_is_mirror_symmetric():
    """
    Test that a single vertical capsule centered on the canvas renders symmetrically.

    This test verifies:
    - the limb mask and depth are symmetric left-right and top-bottom
    - the normal x and y components flip sign under the matching mirror
    """
    params = _single_limb_scene("torso", 12.0, 3.3, math.pi, root=(24.0, 30.0))
    bundle = render_scene(params, REFERENCE_RES)
    mask = bundle.limb_ids >= 0
    depth, normal = bundle.depth[0], bundle.normal

    assert mask.sum() > 0
    for axis in (0, 1):
        assert np.array_equal(mask, np.flip(mask, axis))
        assert np.allclose(depth, np.flip(depth, axis), atol=1e-6)
    assert np.allclose(normal[0], -np.flip(normal[0], 1), atol=1e-6)
    assert np.allclose(normal[1], -np.flip(normal[1], 0), atol=1e-6)
    assert np.allclose(normal[2], np.flip(normal[2], 1), atol=1e-6)


def test_golden_render(golden):
    """Test the fixed-seed render against its stored digests."""
    bundle = render_sample(0, 0, 32)
    golden(
        "render_seed0_index0_r32",
        {
            "rgb": _digest(np.round((bundle.rgb + 1.0) * 127.5).astype(np.uint8)),
            "depth": _digest(np.round((bundle.depth + 1.0) / 2.0 * 65535.0).astype(np.uint16)),
            "limb_ids": _digest(bundle.limb_ids.astype(np.int8)),
            "keypoints": [[round(k.x, 4), round(k.y, 4), k.visible] for k in bundle.keypoints],
            "attributes": list(bundle.attributes),
        },
    )


def test_golden_skeleton_raster(golden):
    """Test the seed-0 figure's pose raster against its stored digest."""
    bundle = render_scene(sample_scene_params(0), REFERENCE_RES)
    raster = rasterize_skeleton(bundle.keypoints, REFERENCE_RES)
    golden("skeleton_seed0_r48", {"raster": _digest(np.round(raster * 255.0).astype(np.uint8)), "drawn": int((raster.sum(axis=0) > 0).sum())})


@pytest.mark.slow
def test_invariants_hold_for_many_seeds():
    """Test that 1000 sampled scenes all render without invariant violations."""
    for seed in range(1000):
        bundle = render_scene(sample_scene_params(seed), REFERENCE_RES)
        assert validate_bundle(bundle) == [], seed
