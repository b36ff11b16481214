#!/usr/bin/env python3
"""
Network training stage with optional MLflow tracking.

This stage:
- Loads the simulated splits for every dose level
- Trains sup-CNN on the paired pool, unsup-CNN on the unlabeled set and semi-CNN on both
- Writes checkpoints, per-step training logs and G-sweep logs
- Tracks parameters, epoch losses and checkpoints with MLflow when [tracking] enabled = true

Usage:
    python -m pipeline.train --config configs/smoke.ini
    sinomap train --config configs/desk.ini --seed 3
"""

import logging
import os
import sys
import urllib.parse
from contextlib import nullcontext
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from pipeline.manifest import (
    check_manifest,
    dose_tag,
    load_splits,
    require_file,
    require_stage,
    sample_name,
    save_table,
    stage_dir,
    write_manifest,
)
from sinomap.config import ExperimentConfig
from sinomap.errors import ValidationError
from sinomap.net import save_checkpoint
from sinomap.noise_sim import PhotonData, derive_seed
from sinomap.sinogram_io import read_sinogram
from sinomap.trainer import TrainState, train_semi, train_supervised, train_unsupervised

logger = logging.getLogger(__name__)

TRAIN_STREAM = 20


def setup_tracking(experiment_name: str):
    """Point MLflow at MLFLOW_TRACKING_URI (credentials embedded when given) or the local store."""
    import mlflow

    tracking_uri = os.getenv("MLFLOW_TRACKING_URI")
    if tracking_uri:
        username = os.getenv("MLFLOW_TRACKING_USERNAME")
        password = os.getenv("MLFLOW_TRACKING_PASSWORD")
        if username and password:
            parsed = urllib.parse.urlparse(tracking_uri)
            mlflow.set_tracking_uri(f"{parsed.scheme}://{username}:{password}@{parsed.netloc}{parsed.path}")
            logger.info("[train] Using MLflow tracking URI: %s://%s%s (authenticated)",
                        parsed.scheme, parsed.netloc, parsed.path)
        else:
            mlflow.set_tracking_uri(tracking_uri)
            logger.info("[train] Using MLflow tracking URI: %s", tracking_uri)
    else:
        logger.info("[train] Using local MLflow tracking (set MLFLOW_TRACKING_URI for remote)")
    mlflow.set_experiment(experiment_name)
    return mlflow


def load_unlabeled(sim: Path, dose: float, indices: List[int]) -> List[Tuple[np.ndarray, PhotonData]]:
    samples = []
    for i in indices:
        x = read_sinogram(require_file(sim / dose_tag(dose) / "low" / f"{sample_name(i)}.sino"))
        counts = read_sinogram(require_file(sim / dose_tag(dose) / "counts" / f"{sample_name(i)}.sino"))
        samples.append((x, counts))
    return samples


def load_pairs(sim: Path, dose: float, indices: List[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for i in indices:
        x = read_sinogram(require_file(sim / dose_tag(dose) / "low" / f"{sample_name(i)}.sino"))
        y = read_sinogram(require_file(sim / "reference" / f"{sample_name(i)}.sino"))
        pairs.append((x, y))
    return pairs


def train_one(cfg: ExperimentConfig, mode: str, dose: float, seed: int,
              unlabeled, pairs, out: Path, tracker=None) -> Tuple[TrainState, List[Path]]:
    scan = cfg.scan_for(dose)
    tcfg = cfg.train_config(mode, scan, seed)
    written: List[Path] = []

    def on_epoch_end(state: TrainState):
        if tracker is not None:
            tracker.log_metric("epoch_loss", state.epoch_losses[-1], step=state.epoch)
        every = cfg.train.checkpoint_every
        if every and (state.epoch + 1) % every == 0:
            path = out / f"{mode}_epoch{state.epoch + 1:04d}.netp"
            save_checkpoint(path, state.params, state.adam)
            written.append(path)

    if mode == "supervised":
        if not pairs:
            raise ValidationError("sup-CNN needs paired samples; set [data] n_pairs > 0")
        state = train_supervised(pairs, tcfg, on_epoch_end=on_epoch_end)
    elif mode == "unsupervised":
        if not unlabeled:
            raise ValidationError("unsup-CNN needs unlabeled samples; set [data] n_unlabeled > 0")
        state = train_unsupervised(unlabeled, tcfg, on_epoch_end=on_epoch_end)
    else:
        state = train_semi(pairs, unlabeled, tcfg, on_epoch_end=on_epoch_end)

    checkpoint = out / f"{mode}.netp"
    save_checkpoint(checkpoint, state.params, state.adam)
    written.append(checkpoint)
    written.append(save_table(state.history_frame(), out / f"{mode}.log"))
    if state.sweeps:
        written.append(save_table(state.sweeps_frame(), out / f"{mode}_sweeps.csv"))

    history = state.history
    logger.info("[train] %s %s: %d epochs, %d steps, total %.6g -> %.6g%s", dose_tag(dose), mode,
                state.epoch, len(history), history[0].total, history[-1].total,
                " (early stop)" if state.stopped_early else "")
    return state, written


def main(cfg: ExperimentConfig, modes: Optional[List[str]] = None) -> Dict:
    sim = require_stage(cfg, "simulate")
    out_root = stage_dir(cfg, "train")
    check_manifest(out_root, cfg)
    splits = load_splits(cfg)
    modes = modes or list(cfg.train.modes)

    mlflow = setup_tracking(cfg.tracking.experiment_name) if cfg.tracking.enabled else None
    written: List[Path] = []
    summary = {}
    for d_idx, dose in enumerate(cfg.scan.doses):
        unlabeled = load_unlabeled(sim, dose, splits["unlabeled"])
        pairs = load_pairs(sim, dose, splits["paired"])
        seed = derive_seed(cfg.seed, TRAIN_STREAM, d_idx)
        out = out_root / dose_tag(dose)
        for mode in modes:
            logger.info("[train] Training %s at %s...", mode, dose_tag(dose))
            run = mlflow.start_run(run_name=f"{cfg.experiment.name}-{dose_tag(dose)}-{mode}") if mlflow else nullcontext()
            with run:
                if mlflow:
                    mlflow.log_params({"mode": mode, "dose_mas": dose, "seed": seed, "k": cfg.prior.k,
                                       "epochs": cfg.train.epochs, "learning_rate": cfg.train.learning_rate,
                                       "n_layers": cfg.net.n_layers, "channels": cfg.net.channels,
                                       "config_hash": cfg.config_hash()})
                state, files = train_one(cfg, mode, dose, seed, unlabeled, pairs, out, tracker=mlflow)
                if mlflow:
                    mlflow.log_metric("final_total", state.history[-1].total)
                    mlflow.log_artifact(str(out / f"{mode}.netp"))
            written.extend(files)
            summary[(dose, mode)] = state.history[-1].total

    write_manifest(out_root, cfg, "train", written, extra={"modes": modes})
    logger.info("[train] ✓ Training complete")
    return {"directory": out_root, "final_losses": summary}


if __name__ == "__main__":
    from pipeline.cli import main as cli_main

    sys.exit(cli_main(["train", *sys.argv[1:]]))
