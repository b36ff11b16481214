#!/usr/bin/env python3
"""
Inference stage: run trained networks over the held-out low-dose sinograms.

Writes enhance/<dose>mAs/<mode>/sample_XXXX.sino plus timing.csv with the wall time of
every forward pass. With --checkpoint and --input, enhances arbitrary kind-0 sinograms
into enhance/custom/ instead.

Usage:
    python -m pipeline.enhance --config configs/smoke.ini
    sinomap enhance --config configs/smoke.ini --checkpoint out/train/10mAs/unsupervised.netp --input my.sino
"""

import logging
import sys
from pathlib import Path
from typing import Dict, List

import pandas as pd

from pipeline.manifest import (
    check_manifest,
    dose_tag,
    load_splits,
    read_manifest,
    require_file,
    require_stage,
    sample_name,
    save_table,
    stage_dir,
    write_manifest,
)
from sinomap.config import ExperimentConfig
from sinomap.errors import MissingInputError, ValidationError
from sinomap.net import load_checkpoint
from sinomap.sinogram_io import KIND_SINOGRAM, read_kind, read_sinogram, write_preview, write_sinogram
from sinomap.trainer import timed_enhance

logger = logging.getLogger(__name__)


def trained_modes(cfg: ExperimentConfig) -> List[str]:
    manifest = read_manifest(stage_dir(cfg, "train")) or {}
    return list(manifest.get("modes", []))


def main(cfg: ExperimentConfig, dump: bool = False) -> Dict:
    sim = require_stage(cfg, "simulate")
    train = require_stage(cfg, "train")
    out = stage_dir(cfg, "enhance")
    check_manifest(out, cfg)
    test = load_splits(cfg)["test"]
    modes = trained_modes(cfg)

    written: List[Path] = []
    timings = []
    for dose in cfg.scan.doses:
        for mode in modes:
            params, _ = load_checkpoint(require_file(train / dose_tag(dose) / f"{mode}.netp"))
            for i in test:
                x = read_sinogram(require_file(sim / dose_tag(dose) / "low" / f"{sample_name(i)}.sino"))
                y, seconds = timed_enhance(params, x, name=f"{dose_tag(dose)}/{mode}/{sample_name(i)}")
                path = out / dose_tag(dose) / mode / f"{sample_name(i)}.sino"
                write_sinogram(path, y)
                written.append(path)
                if dump:
                    write_preview(path.with_suffix(".txt"), y)
                timings.append({"dose": dose_tag(dose), "mode": mode, "sample": i, "seconds": seconds})

    timing = pd.DataFrame(timings, columns=["dose", "mode", "sample", "seconds"])
    save_table(timing, out / "timing.csv")
    if len(timing):
        logger.info("[enhance] Mean wall time per sinogram: %.4f s", timing["seconds"].mean())
    # timing.csv varies run to run and stays out of the digests
    write_manifest(out, cfg, "enhance", written, extra={"modes": modes})
    logger.info("[enhance] ✓ Enhanced %d sinograms", len(written))
    return {"directory": out, "n_files": len(written), "timing": timing}


def enhance_custom(cfg: ExperimentConfig, checkpoint: str, input_path: str, dump: bool = False) -> Dict:
    """Enhance one .sino file or every .sino file in a directory with the given checkpoint."""
    params, _ = load_checkpoint(require_file(Path(checkpoint)))
    source = Path(input_path)
    if source.is_dir():
        inputs = sorted(source.glob("*.sino"))
    elif source.exists():
        inputs = [source]
    else:
        raise MissingInputError(f"missing input: {source}")
    if not inputs:
        raise MissingInputError(f"no .sino files in {source}")

    out = stage_dir(cfg, "enhance") / "custom"
    written, timings = [], []
    for path in inputs:
        if read_kind(path) != KIND_SINOGRAM:
            raise ValidationError(f"{path}: enhance takes log-domain sinograms (kind 0), not photon counts")
        y, seconds = timed_enhance(params, read_sinogram(path), name=path.name)
        target = out / path.name
        write_sinogram(target, y)
        if dump:
            write_preview(target.with_suffix(".txt"), y)
        written.append(target)
        timings.append({"input": str(path), "seconds": seconds})
    save_table(pd.DataFrame(timings, columns=["input", "seconds"]), out / "timing.csv")
    logger.info("[enhance] ✓ Enhanced %d custom sinograms into %s", len(written), out)
    return {"directory": out, "files": written}


if __name__ == "__main__":
    from pipeline.cli import main as cli_main

    sys.exit(cli_main(["enhance", *sys.argv[1:]]))
