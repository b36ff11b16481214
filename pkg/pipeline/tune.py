#!/usr/bin/env python3
"""
Prior weight search.

Trains a short unsup-CNN run at the lowest dose for every k in [tune] k_grid and scores
it by mean sinogram-domain PSNR on the paired pool, which has references but is not used
by unsupervised training.

Usage:
    python -m pipeline.tune --config configs/smoke.ini
"""

import logging
import sys
from typing import Dict

import pandas as pd

from pipeline.manifest import check_manifest, load_splits, require_stage, save_table, stage_dir, write_manifest
from pipeline.train import TRAIN_STREAM, load_pairs, load_unlabeled
from sinomap.config import ExperimentConfig
from sinomap.errors import ValidationError
from sinomap.metrics import evaluate_pairs
from sinomap.noise_sim import derive_seed
from sinomap.trainer import enhance, train_unsupervised

logger = logging.getLogger(__name__)


def main(cfg: ExperimentConfig) -> Dict:
    sim = require_stage(cfg, "simulate")
    out = stage_dir(cfg, "tune")
    check_manifest(out, cfg)
    splits = load_splits(cfg)
    if not splits["unlabeled"] or not splits["paired"]:
        raise ValidationError("tuning needs both unlabeled and paired samples")

    d_idx, dose = min(enumerate(cfg.scan.doses), key=lambda item: item[1])
    unlabeled = load_unlabeled(sim, dose, splits["unlabeled"])
    pairs = load_pairs(sim, dose, splits["paired"])
    seed = derive_seed(cfg.seed, TRAIN_STREAM, d_idx)

    rows = []
    for k in cfg.tune.k_grid:
        tcfg = cfg.train_config("unsupervised", cfg.scan_for(dose), seed, epochs=cfg.tune.epochs,
                                prior=cfg.prior_config(k))
        state = train_unsupervised(unlabeled, tcfg)
        report = evaluate_pairs([enhance(state.params, x) for x, _ in pairs], [y for _, y in pairs], "sinogram")
        rows.append({"k": k, "mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim,
                     "final_total": state.history[-1].total})
        logger.info("[tune] k = %g: PSNR %.2f dB, SSIM %.4f", k, report.mean_psnr, report.mean_ssim)

    table = pd.DataFrame(rows, columns=["k", "mean_psnr", "mean_ssim", "final_total"])
    best = table.loc[table["mean_psnr"].idxmax()]
    path = save_table(table, out / "tune.csv")
    write_manifest(out, cfg, "tune", [path], extra={"best_k": float(best["k"])})
    logger.info("[tune] ✓ Best k = %g (PSNR %.2f dB)", best["k"], best["mean_psnr"])
    return {"directory": out, "table": table, "best_k": float(best["k"])}


if __name__ == "__main__":
    from pipeline.cli import main as cli_main

    sys.exit(cli_main(["tune", *sys.argv[1:]]))
