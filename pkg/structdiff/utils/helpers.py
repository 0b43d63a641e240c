"""
Shared utility functions for the CLI and the service classes
"""
import hashlib
import json
import logging
import os
import random
import re
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
import torch

logger = logging.getLogger(__name__)

RUN_SUBDIRS = ("ckpt", "samples", "eval")


def default_runs_dir() -> Path:
    return Path(os.getenv("STRUCTDIFF_RUNS_DIR", "./runs"))


def sanitize_run_name(text: str) -> str:
    """
    Sanitize text for use as a run directory name.

    Rules:
    - Lowercase, spaces to underscores
    - Keep alphanumerics, underscores, hyphens and dots
    - Collapse repeated underscores, strip leading/trailing separators
    """
    if not text:
        return ""
    text = text.lower().replace(" ", "_")
    text = re.sub(r"[^a-z0-9_.-]", "", text)
    text = re.sub(r"_+", "_", text)
    return text.strip("_.")


def get_run_path(run_name: str, runs_dir: Optional[Path] = None, subdir: Optional[str] = None) -> Path:
    """
    Run-scoped output path: runs/<name>/ or runs/<name>/<subdir>/.
    Creates the standard layout (ckpt/, samples/, eval/) on first use.
    """
    name = sanitize_run_name(run_name) or "default"
    root = Path(runs_dir) if runs_dir is not None else default_runs_dir()
    path = root / name
    for sub in RUN_SUBDIRS:
        (path / sub).mkdir(parents=True, exist_ok=True)
    if subdir:
        path = path / subdir
        path.mkdir(parents=True, exist_ok=True)
    return path


def log_run_event(command: str, run_name: Optional[str] = None, result: str = "success", details: Optional[dict] = None, run_dir: Optional[Path] = None):
    """Log a run event to app.log and, when a run directory is known, to its events.log"""
    line = f"{command} | run={run_name or 'none'} | {result} | {json.dumps(details or {}, sort_keys=True, default=str)}"
    logger.info(line)
    if run_dir is not None:
        with open(Path(run_dir) / "events.log", "a", encoding="utf-8") as f:
            f.write(f"{datetime.now().isoformat()} | {line}\n")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def seed_everything(seed: int, deterministic: bool = False):
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def make_generator(seed: int, device: Optional[torch.device] = None) -> torch.Generator:
    generator = torch.Generator(device=device if device is not None else "cpu")
    generator.manual_seed(int(seed))
    return generator


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit child seed from a parent seed and any number of keys."""
    text = ":".join(str(k) for k in (seed,) + keys)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1
