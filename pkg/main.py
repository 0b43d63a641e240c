"""
structdiff command line

Subcommands: gen-data, filter-data, train-stage1, train-estimator,
train-stage2, sample, eval, ablate. Settings that change results come from
the YAML config; flags only carry paths, seeds and verbosity. Every run
prints a JSON result envelope and writes runs/<name>/manifest.json.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from dotenv import load_dotenv
from PIL import Image

from structdiff.config import StructDiffConfig, load_config
from structdiff.curation.rules import run_pipeline as run_curation
from structdiff.evaluation.ablation import run_ablation
from structdiff.evaluation.estimator import EstimatorTrainer, load_estimator
from structdiff.evaluation.metrics import evaluate_samples
from structdiff.models.refiner import ConditionSet
from structdiff.sampling.outputs import list_sample_files, load_samples, save_samples, write_labeled_grid
from structdiff.sampling.pipeline import GenerationPipeline, conditions_from_dataset, keypoints_from_array
from structdiff.sampling.sampler import default_sizecrop, sample_stage1, sample_stage2
from structdiff.synth.dataset import SceneDataset, decode_depth, decode_normal, generate_dataset
from structdiff.training.checkpoint import load_refiner_checkpoint, load_stage1_checkpoint
from structdiff.training.refiner_trainer import RefinerTrainer
from structdiff.training.stage1 import Stage1Trainer, refiner_base_config
from structdiff.utils.errors import ConfigError, StructDiffError
from structdiff.utils.helpers import derive_seed, get_run_path, log_run_event, seed_everything
from structdiff.utils.manifest import write_manifest
from structdiff.utils.responses import error_response, success_response

logger = logging.getLogger("structdiff.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class CLIParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(verbosity: int = 0):
    """Write all events to <log dir>/app.log and stderr."""
    logs_dir = Path(os.getenv("STRUCTDIFF_LOG_DIR", "./logs"))
    logs_dir.mkdir(parents=True, exist_ok=True)
    level = logging.DEBUG if verbosity > 0 else logging.WARNING if verbosity < 0 else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(logs_dir / "app.log"),
            logging.StreamHandler(),
        ],
        force=True,
    )


# ============================================================================
# SUBCOMMANDS
# ============================================================================
# Each handler returns (data, outputs); outputs are hashed into the manifest.


def cmd_gen_data(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    n = args.n or cfg.data.n
    out_dir = Path(args.out) if args.out else run_dir / "data"
    result = generate_dataset(n, cfg.data.resolution, cfg.seed, out_dir, cfg.data.val_fraction, cfg.runtime.workers, validate=args.validate)
    return {"dataset": result["manifest"], "counts": result["counts"]}, [Path(result["manifest"])]


def cmd_filter_data(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    in_path = Path(args.input)
    if not in_path.is_file():
        raise UsageError(f"input file not found: {in_path}")
    out_path = Path(args.out) if args.out else run_dir / "curated.jsonl"
    stats_path = Path(args.stats) if args.stats else out_path.with_suffix(".stats.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(in_path, "r", encoding="utf-8", errors="surrogateescape") as src, open(out_path, "w", encoding="utf-8") as dst:
        stats = run_curation(src, dst, cfg.curation, cfg.runtime.workers)
    with open(stats_path, "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    return {"kept": stats["kept"], "total": stats["total"], "rejected": stats["rejected"], "out": str(out_path), "stats": str(stats_path)}, [out_path, stats_path]


def _training_data(args, cfg: StructDiffConfig, resolution: int, split: str = "train") -> SceneDataset:
    if getattr(args, "data", None):
        dataset = SceneDataset.from_manifest(args.data, split=split, source="render", resolution=resolution, crop_margin=cfg.data.random_crop_margin)
    else:
        dataset = SceneDataset.synthetic(cfg.data.n, cfg.seed, resolution, split=split, val_fraction=cfg.data.val_fraction, crop_margin=cfg.data.random_crop_margin)
    if len(dataset) == 0:
        raise UsageError(f"no {split} samples available")
    return dataset


def cmd_train_stage1(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    if args.refiner_base:
        cfg = refiner_base_config(cfg)
    dataset = _training_data(args, cfg, cfg.data.resolution)
    trainer = Stage1Trainer(cfg, dataset, run_dir=run_dir)
    result = trainer.train()
    return result, [Path(result["checkpoint"]), run_dir / "losses.csv"]


def cmd_train_estimator(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    train_set = _training_data(args, cfg, cfg.data.resolution, "train")
    val_set = _training_data(args, cfg, cfg.data.resolution, "val")
    metrics = EstimatorTrainer(cfg, train_set, val_set, run_dir=run_dir).train()
    return metrics, [Path(metrics["checkpoint"])]


def cmd_train_stage2(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    base = Path(args.base)
    if not base.is_file():
        raise UsageError(f"base checkpoint not found: {base}")
    dataset = _training_data(args, cfg, cfg.data.resolution * cfg.refiner.resolution_factor)
    result = RefinerTrainer(cfg, base, dataset, run_dir=run_dir).train()
    return result, [Path(result["checkpoint"]), run_dir / "refiner_losses.csv"]


def _load_structure(path: str, kind: str, size: int) -> torch.Tensor:
    """A user-supplied depth or normal map from .npy/.npz or a PNG written by gen-data."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{kind} override not found: {p}")
    if p.suffix == ".npz":
        with np.load(p) as data:
            arr = data[kind]
    elif p.suffix == ".npy":
        arr = np.load(p)
    else:
        img = Image.open(p)
        arr = decode_depth(img) if kind == "depth" else decode_normal(img)
    x = torch.as_tensor(np.asarray(arr, dtype=np.float32))
    if x.ndim == 3:
        x = x[None]
    if x.ndim == 2:
        x = x[None, None]
    if x.shape[-1] != size:
        x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


def cmd_sample(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    steps = args.steps or cfg.sample.steps
    scale = cfg.sample.cfg if args.cfg is None else args.cfg
    device = cfg.runtime.device
    R = cfg.data.resolution
    high = R * cfg.refiner.resolution_factor
    B = cfg.sample.batch
    scenes = SceneDataset.synthetic(max(B, 1), derive_seed(cfg.seed, "sample"), R, val_fraction=0.0)
    cond = conditions_from_dataset(scenes, range(B))
    samples_dir = run_dir / "samples"
    grid_path = Path(args.out_grid) if args.out_grid else samples_dir / "grid.png"
    arrays: Dict[str, Optional[torch.Tensor]] = {"attrs": cond["attrs"], "pose": cond["pose"], "keypoints": cond["keypoints"]}

    if args.stage == "1":
        if not args.stage1:
            raise UsageError("--stage1 checkpoint is required")
        net, schedule, stats, payload = load_stage1_checkpoint(args.stage1, device=device)
        trace: List[Dict] = []
        out = sample_stage1(net, schedule, stats, cond["attrs"], cond["pose"], steps=steps, cfg=scale, seed=cfg.seed, prediction=payload["prediction"], trace=trace)
        arrays.update(out)
    elif args.stage == "2":
        if not args.refiner:
            raise UsageError("--refiner checkpoint is required")
        refiner, schedule, stats, _ = load_refiner_checkpoint(args.refiner, args.base, device=device)
        gt = SceneDataset.synthetic(max(B, 1), derive_seed(cfg.seed, "sample"), high, val_fraction=0.0).stacked(range(B))
        depth = _load_structure(args.override_depth, "depth", high) if args.override_depth else gt["depth"]
        normal = _load_structure(args.override_normal, "normal", high) if args.override_normal else gt["normal"]
        cs = ConditionSet(pose_raster=gt["pose"], depth_map=depth.expand(B, -1, -1, -1), normal_map=normal.expand(B, -1, -1, -1), attrs=gt["attrs"], sizecrop=default_sizecrop(B, high))
        arrays["rgb_high"] = sample_stage2(refiner, schedule, stats, cs, steps=steps, cfg=scale, seed=cfg.seed)
        arrays.update({"depth": depth.expand(B, -1, -1, -1), "normal": normal.expand(B, -1, -1, -1), "pose": gt["pose"]})
    else:
        if not (args.stage1 and args.refiner):
            raise UsageError("--stage1 and --refiner checkpoints are required")
        pipeline = GenerationPipeline.from_checkpoints(args.stage1, args.refiner, args.base, device=device, steps=steps, cfg=scale)
        overrides = {}
        if args.override_depth:
            overrides["override_depth"] = _load_structure(args.override_depth, "depth", high).expand(B, -1, -1, -1)
        if args.override_normal:
            overrides["override_normal"] = _load_structure(args.override_normal, "normal", high).expand(B, -1, -1, -1)
        rgb, depth, normal, rgb_high = pipeline.run(
            cond["attrs"], cond["pose"], seed=cfg.seed, keypoints=[keypoints_from_array(k) for k in cond["keypoints"]], **overrides
        )
        arrays.update({"rgb": rgb, "depth": depth, "normal": normal, "rgb_high": rgb_high})

    samples_path = save_samples(samples_dir / f"stage{args.stage}.npz", **arrays)
    write_labeled_grid(grid_path, arrays["pose"], arrays.get("normal"), arrays.get("depth"), arrays.get("rgb"), arrays.get("rgb_high"))
    finite = all(bool(torch.isfinite(v.float()).all()) for k, v in arrays.items() if v is not None and k not in ("attrs",))
    return {"samples": str(samples_path), "grid": str(grid_path), "n": B, "steps": steps, "cfg": scale, "finite": finite}, [samples_path, grid_path]


def cmd_eval(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    estimator = load_estimator(args.estimator, device=cfg.runtime.device)
    source = Path(args.samples)
    files = list_sample_files(source) if source.is_dir() else [source]
    if not files:
        raise UsageError(f"no sample files under {source}")
    real = SceneDataset.synthetic(cfg.ablation.n_eval, derive_seed(cfg.seed, "eval"), cfg.data.resolution, val_fraction=0.0).stacked()["rgb"]
    report = {}
    for f in files:
        samples = load_samples(f)
        if "rgb" not in samples and "rgb_high" in samples:
            samples["rgb"] = torch.nn.functional.interpolate(samples["rgb_high"], size=real.shape[-2:], mode="area")
        samples = {k: v for k, v in samples.items() if k in ("rgb", "depth", "normal", "keypoints")}
        for k in ("depth", "normal"):
            if k in samples and samples[k].shape[-1] != samples["rgb"].shape[-1]:
                samples.pop(k)
        report[f.name] = evaluate_samples(estimator, samples, real)
    out_path = run_dir / "eval" / "metrics.json"
    with open(out_path, "w", encoding="utf-8") as fp:
        json.dump(report, fp, indent=2, sort_keys=True)
    return {"metrics": report, "report": str(out_path)}, [out_path]


def cmd_ablate(args, cfg: StructDiffConfig, run_dir: Path) -> Tuple[Dict, List[Path]]:
    suite = args.suite or cfg.ablation.suite
    kwargs = {}
    if args.estimator:
        kwargs["estimator"] = load_estimator(args.estimator, device=cfg.runtime.device)
    report = run_ablation(cfg, suite, run_dir / "eval", **kwargs)
    reports = report.values() if suite == "all" else [report]
    outputs = [Path(r[k]) for r in reports for k in ("report_path", "ordering_path")]
    return {"suite": suite, "reports": [str(p) for p in outputs], "warnings": [w for r in reports for w in r["warnings"]]}, outputs


COMMANDS = {
    "gen-data": cmd_gen_data,
    "filter-data": cmd_filter_data,
    "train-stage1": cmd_train_stage1,
    "train-estimator": cmd_train_estimator,
    "train-stage2": cmd_train_stage2,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ============================================================================
# PARSER
# ============================================================================


def build_parser() -> CLIParser:
    common = CLIParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--run-name", help="Run directory name under the runs directory")
    common.add_argument("--runs-dir", help="Runs directory (default $STRUCTDIFF_RUNS_DIR or ./runs)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="count", default=0)

    parser = CLIParser(prog="structdiff", description="Two-stage structure-aware diffusion on a synthetic figure world")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CLIParser)

    p = sub.add_parser("gen-data", parents=[common], help="Render the synthetic dataset")
    p.add_argument("--n", type=int, help="Number of samples (overrides data.n)")
    p.add_argument("--out", help="Output directory (default runs/<name>/data)")
    p.add_argument("--validate", action="store_true", help="Check every bundle against its invariants")

    p = sub.add_parser("filter-data", parents=[common], help="Apply the curation rules to a JSONL file")
    p.add_argument("--in", dest="input", required=True, help="Input JSONL")
    p.add_argument("--out", help="Kept records JSONL")
    p.add_argument("--stats", help="Statistics JSON")

    p = sub.add_parser("train-stage1", parents=[common], help="Train the structural diffusion model")
    p.add_argument("--data", help="Dataset manifest (default: render from the config seed)")
    p.add_argument("--refiner-base", action="store_true", help="Train the RGB-only epsilon base for the refiner")

    p = sub.add_parser("train-estimator", parents=[common], help="Train and gate the evaluation estimator")
    p.add_argument("--data", help="Dataset manifest")

    p = sub.add_parser("train-stage2", parents=[common], help="Train the structure-guided refiner")
    p.add_argument("--base", required=True, help="Frozen base checkpoint")
    p.add_argument("--data", help="Dataset manifest")

    p = sub.add_parser("sample", parents=[common], help="Generate samples and a labeled grid")
    p.add_argument("--stage", choices=["1", "2", "pipeline"], default="pipeline")
    p.add_argument("--stage1", help="Stage-1 checkpoint")
    p.add_argument("--refiner", help="Refiner checkpoint")
    p.add_argument("--base", help="Refiner base checkpoint (default: the recorded path)")
    p.add_argument("--steps", type=int, help="DDIM steps (overrides sample.steps)")
    p.add_argument("--cfg", type=float, help="Guidance scale (overrides sample.cfg)")
    p.add_argument("--override-depth", help="Depth map replacing the stage-1 prediction")
    p.add_argument("--override-normal", help="Normal map replacing the stage-1 prediction")
    p.add_argument("--out-grid", help="Grid PNG path")

    p = sub.add_parser("eval", parents=[common], help="Score sample files with the estimator")
    p.add_argument("--samples", required=True, help="Sample .npz file or directory")
    p.add_argument("--estimator", required=True, help="Gated estimator checkpoint")

    p = sub.add_parser("ablate", parents=[common], help="Run an ablation suite")
    p.add_argument("--suite", choices=["structural", "refiner", "all"])
    p.add_argument("--estimator", help="Gated estimator checkpoint (trained when omitted)")
    return parser


def _emit(envelope: Dict):
    print(json.dumps(envelope, indent=2, sort_keys=True, default=str))


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose - args.quiet)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides({"seed": args.seed})
    except FileNotFoundError as e:
        _emit(error_response("CONFIG_NOT_FOUND", str(e)))
        return EXIT_USAGE
    except ConfigError as e:
        _emit(error_response(e.error_code, e.message, e.details))
        return EXIT_USAGE

    run_name = args.run_name or args.command
    run_dir = get_run_path(run_name, Path(args.runs_dir) if args.runs_dir else None)
    seed_everything(cfg.seed, cfg.runtime.deterministic)
    start = time.time()
    try:
        data, outputs = COMMANDS[args.command](args, cfg, run_dir)
    except UsageError as e:
        log_run_event(args.command, run_name, "usage_error", {"message": str(e)}, run_dir)
        _emit(error_response("USAGE", str(e)))
        return EXIT_USAGE
    except StructDiffError as e:
        logger.error(f"{args.command} failed: {e.message}")
        log_run_event(args.command, run_name, "failure", e.to_dict(), run_dir)
        _emit(error_response(e.error_code, e.message, e.details))
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} failed")
        log_run_event(args.command, run_name, "failure", {"error": str(e)}, run_dir)
        _emit(error_response("RUNTIME_ERROR", str(e)))
        return EXIT_RUNTIME

    wall = time.time() - start
    manifest = write_manifest(run_dir, args.command, argv, cfg.model_dump(mode="json"), cfg.seed, outputs, wall)
    data = {**data, "run_dir": str(run_dir), "manifest": str(manifest)}
    log_run_event(args.command, run_name, "success", {"wall_time_s": round(wall, 3)}, run_dir)
    _emit(success_response(data, f"{args.command} finished"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
