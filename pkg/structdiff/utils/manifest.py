"""
Run manifests

Every CLI run writes runs/<name>/manifest.json next to its outputs: the
command, argv, the full config echo, git describe, the seed, each output
file with its SHA-256, and the wall time.
"""

import json
import logging
import subprocess
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from structdiff.utils.helpers import sha256_file

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
VOLATILE_FIELDS = ("wall_time_s", "created_at")


def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else "unknown"


class RunManifest:
    """
    Manifest of one run directory.
    Outputs are stored relative to the run directory when they live inside it.
    """

    def __init__(self, run_dir: Union[str, Path], command: str, argv: Optional[List[str]] = None, config: Optional[Dict] = None, seed: Optional[int] = None):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.run_dir / MANIFEST_FILE
        self.data: Dict[str, Any] = {
            "command": command,
            "argv": list(argv or []),
            "config": config or {},
            "git_describe": git_describe(),
            "seed": seed,
            "outputs": {},
            "created_at": datetime.now().isoformat(),
            "wall_time_s": None,
        }

    def _key(self, path: Path) -> str:
        try:
            return str(path.resolve().relative_to(self.run_dir.resolve()))
        except ValueError:
            return str(path)

    def add_output(self, path: Union[str, Path]):
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                self.add_output(child)
            return
        if not path.is_file():
            logger.warning(f"Manifest output missing: {path}")
            return
        self.data["outputs"][self._key(path)] = sha256_file(path)

    def save(self, wall_time_s: Optional[float] = None) -> Path:
        if wall_time_s is not None:
            self.data["wall_time_s"] = round(float(wall_time_s), 3)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, sort_keys=True, default=str)
        logger.debug(f"Wrote manifest {self.path}")
        return self.path


def write_manifest(run_dir: Union[str, Path], command: str, argv: List[str], config: Dict, seed: int, outputs: List[Union[str, Path]], wall_time_s: float) -> Path:
    manifest = RunManifest(run_dir, command, argv, config, seed)
    for output in outputs:
        manifest.add_output(output)
    return manifest.save(wall_time_s)


def read_manifest(path: Union[str, Path]) -> Dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def manifest_fingerprint(manifest: Dict) -> Dict:
    """The manifest without fields that legitimately differ between identical runs."""
    return {k: v for k, v in manifest.items() if k not in VOLATILE_FIELDS}
