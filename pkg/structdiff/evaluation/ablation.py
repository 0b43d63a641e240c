"""
Ablation harness

Each registry row is a set of dotted config overrides. The runner trains
every variant of a suite for each seed under the shared step budget,
evaluates it with a gated estimator and reports the per-seed metrics plus
how often the full model beats each variant.
"""

import csv
import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch.nn.functional as F

from structdiff.config import StructDiffConfig
from structdiff.evaluation.estimator import EstimatorNet, EstimatorTrainer
from structdiff.evaluation.metrics import estimate, evaluate_samples, fid_proxy, l2_depth_error, l2_normal_error
from structdiff.sampling.pipeline import GenerationPipeline, generate_pipeline_set, generate_stage1_set
from structdiff.synth.dataset import SceneDataset
from structdiff.training.refiner_trainer import RefinerTrainer
from structdiff.training.stage1 import Stage1Trainer, refiner_base_config
from structdiff.utils.errors import InvalidRangeError
from structdiff.utils.helpers import derive_seed

logger = logging.getLogger(__name__)

STRUCTURAL_ABLATIONS: Dict[str, Dict] = {
    "full": {},
    "denoise_rgb": {"model.modalities": ["rgb"]},
    "denoise_rgb_depth": {"model.modalities": ["rgb", "depth"]},
    "half_blocks": {"model.replicate": "half"},
    "two_blocks": {"model.replicate": "two"},
    "default_snr_eps": {"schedule.rescale_terminal": False, "schedule.prediction": "epsilon"},
    "different_timesteps": {"train.timestep_mode": "independent"},
}

REFINER_ABLATIONS: Dict[str, Dict] = {
    "full": {},
    "no_dropout": {"refiner.dropout": 0.0},
    "only_text": {"refiner.conditions": ["attrs"]},
    "cond_p": {"refiner.conditions": ["attrs", "pose"]},
    "cond_d": {"refiner.conditions": ["attrs", "depth"]},
    "cond_n": {"refiner.conditions": ["attrs", "normal"]},
    "cond_pd": {"refiner.conditions": ["attrs", "pose", "depth"]},
    "cond_pn": {"refiner.conditions": ["attrs", "pose", "normal"]},
    "cond_dn": {"refiner.conditions": ["attrs", "depth", "normal"]},
}

ABLATION_REGISTRY = {"structural": STRUCTURAL_ABLATIONS, "refiner": REFINER_ABLATIONS}

# lower is better for every reported metric
ORDERED_METRICS = ("fid_proxy", "l2_depth", "l2_normal")


def ordering_table(results: Dict[str, Dict[int, Dict[str, float]]]) -> List[Dict]:
    """Per variant and metric: in how many seeds the full model scores lower."""
    rows = []
    full = results.get("full", {})
    for variant, per_seed in results.items():
        if variant == "full":
            continue
        for metric in ORDERED_METRICS:
            seeds = [s for s in per_seed if metric in per_seed[s] and metric in full.get(s, {})]
            if not seeds:
                continue
            wins = sum(1 for s in seeds if full[s][metric] < per_seed[s][metric])
            rows.append(
                {
                    "variant": variant,
                    "metric": metric,
                    "seeds": len(seeds),
                    "full_wins": wins,
                    "full_better": wins * 2 > len(seeds),
                }
            )
    return rows


class AblationRunner:
    """
    Runs one suite ("structural" or "refiner") for a list of seeds.

    ``estimator`` scores every variant; ``companion`` supplies structures
    for variants that do not generate them. Both are trained on demand when
    not given, the companion with a different seed.
    """

    def __init__(self, cfg: StructDiffConfig, run_dir: Union[str, Path], estimator: Optional[EstimatorNet] = None, companion: Optional[EstimatorNet] = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        R = cfg.data.resolution
        self.train_set = SceneDataset.synthetic(cfg.data.n, cfg.seed, R, split="train", val_fraction=cfg.data.val_fraction)
        self.val_set = SceneDataset.synthetic(cfg.data.n, cfg.seed, R, split="val", val_fraction=cfg.data.val_fraction)
        self.eval_set = SceneDataset.synthetic(cfg.ablation.n_eval, derive_seed(cfg.seed, "eval"), R, val_fraction=0.0)
        self.estimator = estimator
        self.companion = companion
        self.warnings: List[str] = []

    def _estimators(self):
        if self.estimator is None:
            trainer = EstimatorTrainer(self.cfg, self.train_set, self.val_set)
            trainer.train()
            self.estimator = trainer.net
        if self.companion is None:
            trainer = EstimatorTrainer(self.cfg, self.train_set, self.val_set, seed=derive_seed(self.cfg.seed, "companion"))
            trainer.train()
            self.companion = trainer.net
        return self.estimator, self.companion

    def _variant_config(self, overrides: Dict, seed: int) -> StructDiffConfig:
        return self.cfg.with_overrides({**overrides, "seed": seed, "train.steps": self.cfg.ablation.steps})

    def _check_budget(self, suite: str, variant: str, seed: int, elapsed: float):
        if elapsed > self.cfg.ablation.budget_seconds:
            message = f"{suite}/{variant} seed {seed} took {elapsed:.0f}s, over the {self.cfg.ablation.budget_seconds:.0f}s budget"
            logger.warning(message)
            self.warnings.append(message)

    def run_structural_variant(self, variant: str, seed: int) -> Dict[str, float]:
        estimator, companion = self._estimators()
        cfg = self._variant_config(STRUCTURAL_ABLATIONS[variant], seed)
        start = time.time()
        trainer = Stage1Trainer(cfg, self.train_set, run_dir=None)
        trainer.train()
        samples = generate_stage1_set(
            trainer.state.ema.model,
            trainer.schedule,
            trainer.stats,
            self.eval_set,
            cfg.ablation.n_eval,
            steps=cfg.sample.steps,
            cfg=cfg.sample.cfg,
            seed=seed,
            batch_size=cfg.sample.batch,
            prediction=cfg.schedule.prediction,
        )
        # structures the variant does not generate come from the companion estimator
        predicted = estimate(companion, samples["rgb"])
        for m in ("depth", "normal"):
            if m not in samples:
                samples[m] = predicted[m]
        real = self.eval_set.stacked()["rgb"]
        metrics = evaluate_samples(estimator, samples, real)
        metrics["elapsed_s"] = time.time() - start
        self._check_budget("structural", variant, seed, metrics["elapsed_s"])
        return metrics

    def _refiner_inputs(self, seed: int):
        """Stage-1 model and frozen refiner base shared by every refiner row of one seed."""
        seed_dir = self.run_dir / f"seed_{seed}"
        base_cfg = refiner_base_config(self._variant_config({}, seed))
        base_data = SceneDataset.synthetic(self.cfg.data.n, self.cfg.seed, base_cfg.data.resolution, split="train", val_fraction=self.cfg.data.val_fraction)
        base_trainer = Stage1Trainer(base_cfg, base_data, run_dir=seed_dir / "base")
        (seed_dir / "base").mkdir(parents=True, exist_ok=True)
        base_path = Path(base_trainer.train()["checkpoint"])
        stage1 = Stage1Trainer(self._variant_config({}, seed), self.train_set, run_dir=None)
        stage1.train()
        return seed_dir, base_path, base_data, stage1

    def run_refiner_variant(self, variant: str, seed: int, inputs=None) -> Dict[str, float]:
        estimator, _ = self._estimators()
        seed_dir, base_path, base_data, stage1 = inputs or self._refiner_inputs(seed)
        cfg = self._variant_config(REFINER_ABLATIONS[variant], seed)
        start = time.time()
        run_dir = seed_dir / variant
        run_dir.mkdir(parents=True, exist_ok=True)
        trainer = RefinerTrainer(cfg, base_path, base_data, run_dir=run_dir)
        trainer.train()
        pipeline = GenerationPipeline(
            stage1.state.ema.model,
            stage1.schedule,
            stage1.stats,
            trainer.refiner,
            trainer.schedule,
            trainer.stats,
            steps=cfg.sample.steps,
            cfg=cfg.sample.cfg,
            stage1_prediction=cfg.schedule.prediction,
            resolution_factor=cfg.refiner.resolution_factor,
        )
        samples = generate_pipeline_set(pipeline, self.eval_set, cfg.ablation.n_eval, seed=seed, batch_size=cfg.sample.batch)
        R = cfg.data.resolution
        refined = F.interpolate(samples["rgb_high"], size=(R, R), mode="area")
        real = self.eval_set.stacked()["rgb"]
        metrics = {
            "n": int(refined.shape[0]),
            "fid_proxy": fid_proxy(estimator, refined, real),
            "l2_depth": l2_depth_error(estimator, {"rgb": refined, "depth": samples["depth"]}),
            "l2_normal": l2_normal_error(estimator, {"rgb": refined, "normal": samples["normal"]}),
            "elapsed_s": time.time() - start,
        }
        self._check_budget("refiner", variant, seed, metrics["elapsed_s"])
        return metrics

    def run(self, suite: str, seeds: Optional[Sequence[int]] = None, variants: Optional[Sequence[str]] = None) -> Dict:
        if suite not in ABLATION_REGISTRY:
            raise InvalidRangeError(f"unknown ablation suite '{suite}'", {"allowed": list(ABLATION_REGISTRY)})
        seeds = list(seeds if seeds is not None else self.cfg.ablation.seeds)
        names = list(variants) if variants is not None else list(ABLATION_REGISTRY[suite])
        if "full" not in names:
            names.insert(0, "full")
        results: Dict[str, Dict[int, Dict[str, float]]] = {name: {} for name in names}
        for seed in seeds:
            inputs = self._refiner_inputs(seed) if suite == "refiner" else None
            for name in names:
                logger.info(f"Ablation {suite}/{name} seed {seed}")
                if suite == "structural":
                    results[name][seed] = self.run_structural_variant(name, seed)
                else:
                    results[name][seed] = self.run_refiner_variant(name, seed, inputs)

        ordering = ordering_table(results)
        report = {
            "suite": suite,
            "seeds": seeds,
            "variants": names,
            "results": {name: {str(s): m for s, m in per_seed.items()} for name, per_seed in results.items()},
            "ordering": ordering,
            "warnings": list(self.warnings),
        }
        report_path = self.run_dir / f"ablation_{suite}.json"
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        csv_path = self.run_dir / f"ablation_{suite}_ordering.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["variant", "metric", "seeds", "full_wins", "full_better"])
            writer.writeheader()
            writer.writerows(ordering)
        report["report_path"] = str(report_path)
        report["ordering_path"] = str(csv_path)
        logger.info(f"✅ Ablation suite {suite} finished: {len(names)} variants x {len(seeds)} seeds")
        return report


def run_ablation(cfg: StructDiffConfig, suite: str, run_dir: Union[str, Path], seeds: Optional[Sequence[int]] = None, **kwargs) -> Dict:
    runner = AblationRunner(cfg, run_dir, **kwargs)
    if suite == "all":
        return {name: runner.run(name, seeds) for name in ABLATION_REGISTRY}
    return runner.run(suite, seeds)
