#!/usr/bin/env python3
"""
Simulate the phantom dataset: clean, reference (high-dose) and low-dose sinograms.

This stage:
- Rasterizes one randomized head phantom per sample
- Projects it to a clean sinogram
- Draws the reference scan and one low-dose scan per dose level
- Splits samples into unlabeled / paired / test sets
- Runs the data quality gate over everything it wrote

Usage:
    python -m pipeline.simulate --config configs/smoke.ini
    sinomap simulate --config configs/smoke.ini --dump
"""

import logging
import sys
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from pipeline.manifest import (
    SPLIT_PAIRED,
    SPLIT_TEST,
    SPLIT_UNLABELED,
    check_manifest,
    dose_tag,
    sample_name,
    save_table,
    stage_dir,
    write_manifest,
)
from sinomap.config import ExperimentConfig
from sinomap.errors import ValidationError
from sinomap.geometry import forward_project, make_phantom
from sinomap.noise_sim import derive_seed, sample_low_dose
from sinomap.sinogram_io import KIND_COUNTS, export_pgm, read_kind, read_sinogram, write_preview, write_sinogram

logger = logging.getLogger(__name__)

PHANTOM_STREAM = 10
REFERENCE_STREAM = 11
DOSE_STREAM = 12
COUNT_FLOOR_SIGMAS = 10


def assign_splits(cfg: ExperimentConfig) -> pd.DataFrame:
    d = cfg.data
    splits = [SPLIT_UNLABELED] * d.n_unlabeled + [SPLIT_PAIRED] * d.n_pairs + [SPLIT_TEST] * d.n_test
    return pd.DataFrame({"sample": range(len(splits)), "split": splits})


def simulate_sample(cfg: ExperimentConfig, index: int) -> Dict[str, object]:
    """Phantom, clean and reference sinograms, and (PhotonData, x) per dose for one sample."""
    geom = cfg.make_geometry()
    img = make_phantom(cfg.phantom_spec(), seed=derive_seed(cfg.seed, PHANTOM_STREAM, index))
    clean = forward_project(img, geom)
    if cfg.scan.reference == "noiseless":
        reference = clean
    else:
        _, reference = sample_low_dose(clean, cfg.high_dose_scan(), derive_seed(cfg.seed, REFERENCE_STREAM, index))
    doses = {}
    for d_idx, dose in enumerate(cfg.scan.doses):
        doses[dose] = sample_low_dose(clean, cfg.scan_for(dose), derive_seed(cfg.seed, DOSE_STREAM, d_idx, index))
    return {"phantom": img, "clean": clean, "reference": reference, "doses": doses}


def check_finite(paths: List[Path]) -> Tuple[bool, List[str]]:
    violations = []
    for path in paths:
        data = read_sinogram(path)
        field = getattr(data, "I", data)
        if not np.all(np.isfinite(field)):
            violations.append(f"{path.name}: non-finite values")
    return not violations, violations


def check_shapes(paths: List[Path], shape: Tuple[int, int]) -> Tuple[bool, List[str]]:
    violations = []
    for path in paths:
        data = read_sinogram(path)
        field = getattr(data, "I", data)
        if field.shape != shape:
            violations.append(f"{path.name}: shape {field.shape}, expected {shape}")
    return not violations, violations


def check_counts(paths: List[Path], sigma: float) -> Tuple[bool, List[str]]:
    """Counts files must be kind 1 with measured counts no lower than the electronic noise allows."""
    floor = -COUNT_FLOOR_SIGMAS * sigma
    violations = []
    for path in paths:
        if read_kind(path) != KIND_COUNTS:
            violations.append(f"{path.name}: expected photon counts (kind 1)")
            continue
        lowest = float(np.min(read_sinogram(path).I))
        if lowest < floor:
            violations.append(f"{path.name}: measured count {lowest:.6g} below {floor:.6g} ({COUNT_FLOOR_SIGMAS} sigma)")
    return not violations, violations


def run_quality_checks(out: Path, cfg: ExperimentConfig) -> Dict:
    """
    Quality gate over the simulated dataset.

    Returns:
        Dictionary with check results and overall status
    """
    shape = cfg.make_geometry().sinogram_shape
    sinograms = sorted(out.glob("*/*.sino")) + sorted(out.glob("*/low/*.sino"))
    counts = sorted(out.glob("*/counts/*.sino"))
    expected = cfg.n_phantoms * (2 + 2 * len(cfg.scan.doses))
    results = {"file_count": len(sinograms) + len(counts), "checks": {}, "passed": True, "violations": []}

    checks = {
        "file_count": (results["file_count"] == expected,
                       [] if results["file_count"] == expected else
                       [f"found {results['file_count']} sinogram files, expected {expected}"]),
        "finite_values": check_finite(sinograms + counts),
        "shapes": check_shapes(sinograms + counts, shape),
        "counts": check_counts(counts, cfg.scan.sigma),
    }
    for name, (passed, violations) in checks.items():
        results["checks"][name] = {"passed": passed, "violations": violations}
        if not passed:
            results["passed"] = False
            results["violations"].extend(violations)
    return results


def log_results(results: Dict):
    logger.info("[simulate] Quality gate: %s (%d files)", "✓ PASSED" if results["passed"] else "✗ FAILED",
                results["file_count"])
    for name, check in results["checks"].items():
        logger.info("[simulate]   %s %s", "✓" if check["passed"] else "✗", name.replace("_", " ").title())
        for violation in check["violations"]:
            logger.warning("[simulate]     - %s", violation)


def main(cfg: ExperimentConfig, dump: bool = False) -> Dict:
    out = stage_dir(cfg, "simulate")
    check_manifest(out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("[simulate] %d phantoms, %d dose levels -> %s", cfg.n_phantoms, len(cfg.scan.doses), out)

    written: List[Path] = []

    def emit(path: Path, data):
        write_sinogram(path, data)
        written.append(path)
        if dump:
            write_preview(path.with_suffix(".txt"), data)

    for index in range(cfg.n_phantoms):
        name = sample_name(index)
        sample = simulate_sample(cfg, index)
        pgm = out / "phantoms" / f"{name}.pgm"
        export_pgm(pgm, sample["phantom"], low=0.0, high=max(float(np.max(sample["phantom"])), 1e-12))
        written.extend([pgm, pgm.with_suffix(".txt")])
        emit(out / "clean" / f"{name}.sino", sample["clean"])
        emit(out / "reference" / f"{name}.sino", sample["reference"])
        for dose, (photons, low) in sample["doses"].items():
            emit(out / dose_tag(dose) / "low" / f"{name}.sino", low)
            emit(out / dose_tag(dose) / "counts" / f"{name}.sino", photons)

    splits = assign_splits(cfg)
    written.append(save_table(splits, out / "splits.csv"))
    logger.info("[simulate] Wrote %d files", len(written))

    results = run_quality_checks(out, cfg)
    log_results(results)
    if not results["passed"]:
        raise ValidationError("[simulate] ✗ QUALITY CHECK FAILED: " + "; ".join(results["violations"][:5]))

    write_manifest(out, cfg, "simulate", written, extra={"doses": list(cfg.scan.doses)})
    logger.info("[simulate] ✓ Simulation complete")
    return {"directory": out, "n_files": len(written)}


if __name__ == "__main__":
    from pipeline.cli import main as cli_main

    sys.exit(cli_main(["simulate", *sys.argv[1:]]))
