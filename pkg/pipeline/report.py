#!/usr/bin/env python3
"""
Report stage: aggregate evaluation metrics into method x dose tables.

One table per domain (sinogram, image) with mean PSNR / SSIM per dose level and the mean
per-sinogram wall time. Methods without results get "n/a" cells and the stage finishes
with the warning status.

Usage:
    python -m pipeline.report --config configs/smoke.ini
"""

import logging
import sys
from pathlib import Path
from typing import Dict, Optional

import pandas as pd

from pipeline.manifest import (
    BASELINE,
    METHODS,
    check_manifest,
    dose_tag,
    require_file,
    require_stage,
    save_table,
    stage_dir,
    write_manifest,
)
from sinomap.config import ExperimentConfig
from sinomap.sinogram_io import atomic_write

logger = logging.getLogger(__name__)

MISSING = "n/a"
ALL_METHODS = [BASELINE] + list(METHODS.values())
MODE_OF = {method: mode for mode, method in METHODS.items()}


def _mean_time(method: str, timing: pd.DataFrame, fbp_timing: Optional[pd.DataFrame]) -> Optional[float]:
    if method == BASELINE:
        frame = fbp_timing
    else:
        frame = timing[timing["mode"] == MODE_OF[method]] if timing is not None else None
    if frame is None or frame.empty:
        return None
    return float(frame["seconds"].mean())


def build_table(metrics: pd.DataFrame, domain: str, doses, timing: Optional[pd.DataFrame],
                fbp_timing: Optional[pd.DataFrame]) -> pd.DataFrame:
    """Method x (dose, metric) table of formatted means; absent results become "n/a"."""
    subset = metrics[metrics["domain"] == domain]
    means = subset.groupby(["method", "dose"])[["psnr", "ssim"]].mean()
    rows = []
    for method in ALL_METHODS:
        row = {"Method": method}
        for dose in doses:
            tag = dose_tag(dose)
            if (method, tag) in means.index:
                row[f"{tag} PSNR"] = f"{means.loc[(method, tag), 'psnr']:.2f}"
                row[f"{tag} SSIM"] = f"{means.loc[(method, tag), 'ssim']:.4f}"
            else:
                row[f"{tag} PSNR"] = MISSING
                row[f"{tag} SSIM"] = MISSING
        seconds = _mean_time(method, timing, fbp_timing)
        row["Time (s)"] = MISSING if seconds is None else f"{seconds:.4f}"
        rows.append(row)
    return pd.DataFrame(rows)


def _optional_csv(path: Path) -> Optional[pd.DataFrame]:
    return pd.read_csv(path) if path.exists() else None


def main(cfg: ExperimentConfig) -> Dict:
    evaluated = require_stage(cfg, "evaluate")
    metrics = pd.read_csv(require_file(evaluated / "metrics.csv"))
    timing = _optional_csv(stage_dir(cfg, "enhance") / "timing.csv")
    fbp_timing = _optional_csv(evaluated / "timing_fbp.csv")
    out = stage_dir(cfg, "report")
    check_manifest(out, cfg)

    tables = {domain: build_table(metrics, domain, cfg.scan.doses, timing, fbp_timing)
              for domain in ("sinogram", "image")}
    missing = sorted(set(ALL_METHODS) - set(metrics["method"].unique()))

    lines = [f"# {cfg.experiment.name}: quantitative results", "",
             f"Doses: {', '.join(dose_tag(d) for d in cfg.scan.doses)}; held-out samples: {cfg.data.n_test}; "
             f"config {cfg.config_hash()[:12]}, seed {cfg.seed}.", "",
             "PSNR in dB. Sinogram-domain peak is the reference sinogram maximum; image-domain values "
             "use FBP reconstructions normalized to the reference image maximum (peak 1) on the inscribed disc.",
             "Time is the mean wall time per sinogram (FBP: reconstruction; CNNs: network forward pass).", ""]
    for domain, table in tables.items():
        lines += [f"## {domain.title()} domain", "", table.to_markdown(index=False), ""]
    if missing:
        lines += [f"Missing methods: {', '.join(missing)}", ""]
    # Time varies between runs; report.md and report.csv are not digested
    atomic_write(out / "report.md", "\n".join(lines))
    combined = pd.concat([t.assign(Domain=d) for d, t in tables.items()], ignore_index=True)
    save_table(combined, out / "report.csv")
    write_manifest(out, cfg, "report", [], extra={"missing_methods": missing})

    for domain, table in tables.items():
        logger.info("[report] %s domain\n%s", domain, table.to_string(index=False))
    if missing:
        logger.warning("[report] No results for: %s", ", ".join(missing))
    logger.info("[report] ✓ Report written to %s", out / "report.md")
    return {"directory": out, "tables": tables, "missing": missing, "complete": not missing}


if __name__ == "__main__":
    from pipeline.cli import main as cli_main

    sys.exit(cli_main(["report", *sys.argv[1:]]))
