"""
Artifact layout and manifests shared by the pipeline stages.

Layout under the experiment out_dir:
    simulate/   clean/, reference/, <dose>mAs/{low,counts}/, phantoms/, splits.csv
    train/      <dose>mAs/<mode>.netp, <mode>.log, <mode>_sweeps.csv
    enhance/    <dose>mAs/<mode>/, timing.csv, custom/
    evaluate/   metrics.csv, images/
    report/     report.md, report.csv
    tune/       tune.csv

Every stage directory holds a manifest.json with the config hash, seed, package versions
and a digest of each deterministic output. Manifests carry no timestamps, so re-running a
stage with the same config rewrites it byte for byte.
"""

import hashlib
import json
import logging
import platform
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import pandas as pd

import sinomap
from sinomap.config import ExperimentConfig
from sinomap.errors import ManifestConflictError, MissingInputError
from sinomap.sinogram_io import atomic_write

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "scikit-image", "pandas", "pydantic")

METHODS = {"supervised": "sup-CNN", "unsupervised": "unsup-CNN", "semi": "semi-CNN"}
BASELINE = "FBP"

SPLIT_UNLABELED = "unlabeled"
SPLIT_PAIRED = "paired"
SPLIT_TEST = "test"


def stage_dir(cfg: ExperimentConfig, stage: str) -> Path:
    return Path(cfg.experiment.out_dir) / stage


def dose_tag(dose: float) -> str:
    return f"{dose:g}mAs"


def sample_name(index: int) -> str:
    return f"sample_{index:04d}"


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "sinomap": sinomap.__version__}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(directory: Path) -> Optional[dict]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def check_manifest(directory: Path, cfg: ExperimentConfig):
    """Refuse to overwrite artifacts produced by a different config or seed."""
    existing = read_manifest(directory)
    if existing is None:
        return
    if existing.get("seed") != cfg.seed:
        raise ManifestConflictError(
            f"{directory} was produced with seed {existing.get('seed')}, current seed is {cfg.seed}"
        )
    if existing.get("config_hash") != cfg.config_hash():
        raise ManifestConflictError(f"{directory} was produced by a different config; use a fresh --out directory")


def require_stage(cfg: ExperimentConfig, stage: str) -> Path:
    """Upstream stage directory, checked against the current config."""
    directory = stage_dir(cfg, stage)
    if read_manifest(directory) is None:
        raise MissingInputError(f"no {stage} outputs in {directory}; run `sinomap {stage}` first")
    check_manifest(directory, cfg)
    return directory


def require_file(path: Path) -> Path:
    if not Path(path).exists():
        raise MissingInputError(f"missing input: {path}")
    return Path(path)


def write_manifest(directory: Path, cfg: ExperimentConfig, stage: str, files: Iterable[Path],
                   extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    digests = {str(Path(f).relative_to(directory).as_posix()): file_digest(f) for f in sorted(files)}
    manifest = {
        "stage": stage,
        "experiment": cfg.experiment.name,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": package_versions(),
        "files": digests,
    }
    if extra:
        manifest.update(extra)
    path = directory / MANIFEST_NAME
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("[%s] Manifest written: %s (%d files)", stage, path, len(digests))
    return path


def save_table(df: pd.DataFrame, path: Path) -> Path:
    atomic_write(path, df.to_csv(index=False))
    return Path(path)


def load_splits(cfg: ExperimentConfig) -> Dict[str, List[int]]:
    path = require_file(stage_dir(cfg, "simulate") / "splits.csv")
    df = pd.read_csv(path)
    return {split: df.loc[df["split"] == split, "sample"].astype(int).tolist()
            for split in (SPLIT_UNLABELED, SPLIT_PAIRED, SPLIT_TEST)}
