#!/usr/bin/env python3
"""
Evaluation stage: PSNR / SSIM of every method on the held-out samples.

Methods are the FBP baseline (the raw low-dose input) and each trained network.
Metrics are computed in the sinogram domain (peak = reference maximum) and in the image
domain (FBP reconstructions normalized to the reference image maximum, inscribed disc).

Usage:
    python -m pipeline.evaluate --config configs/smoke.ini
"""

import logging
import sys
import time
from pathlib import Path
from typing import Dict, List

import pandas as pd

from pipeline.enhance import trained_modes
from pipeline.manifest import (
    BASELINE,
    METHODS,
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
from sinomap.geometry import fbp_reconstruct
from sinomap.metrics import evaluate_images, evaluate_pairs, to_image_domain
from sinomap.sinogram_io import export_pgm, read_sinogram

logger = logging.getLogger(__name__)

COLUMNS = ["dose", "method", "domain", "sample", "psnr", "ssim"]


def report_rows(report, dose: float, method: str, samples: List[int]) -> List[dict]:
    return [{"dose": dose_tag(dose), "method": method, "domain": report.domain, "sample": s, "psnr": p, "ssim": q}
            for s, p, q in zip(samples, report.psnr, report.ssim)]


def main(cfg: ExperimentConfig) -> Dict:
    sim = require_stage(cfg, "simulate")
    enhanced = require_stage(cfg, "enhance")
    out = stage_dir(cfg, "evaluate")
    check_manifest(out, cfg)
    geom = cfg.make_geometry()
    test = load_splits(cfg)["test"]
    modes = trained_modes(cfg)

    references = [read_sinogram(require_file(sim / "reference" / f"{sample_name(i)}.sino")) for i in test]
    rows, fbp_times, written = [], [], []
    for dose in cfg.scan.doses:
        tag = dose_tag(dose)
        outputs = {BASELINE: [read_sinogram(require_file(sim / tag / "low" / f"{sample_name(i)}.sino")) for i in test]}
        for mode in modes:
            outputs[METHODS[mode]] = [read_sinogram(require_file(enhanced / tag / mode / f"{sample_name(i)}.sino"))
                                      for i in test]

        for method, sinos in outputs.items():
            sino_report = evaluate_pairs(sinos, references, "sinogram")
            image_report = evaluate_images(sinos, references, geom)
            rows += report_rows(sino_report, dose, method, test)
            rows += report_rows(image_report, dose, method, test)
            logger.info("[evaluate] %s %s: sinogram PSNR %.2f dB / SSIM %.4f, image PSNR %.2f dB / SSIM %.4f",
                        tag, method, sino_report.mean_psnr, sino_report.mean_ssim,
                        image_report.mean_psnr, image_report.mean_ssim)

        for x in outputs[BASELINE]:
            start = time.perf_counter()
            fbp_reconstruct(x, geom)
            fbp_times.append({"dose": tag, "seconds": time.perf_counter() - start})

        # images of the first held-out sample, windowed to the reference maximum
        for method, sinos in outputs.items():
            img, ref = to_image_domain(sinos[0], references[0], geom)
            path = out / "images" / tag / f"{method}.pgm"
            export_pgm(path, img, low=0.0, high=1.0)
            written += [path, path.with_suffix(".txt")]
        ref_path = out / "images" / tag / "reference.pgm"
        export_pgm(ref_path, ref, low=0.0, high=1.0)
        written += [ref_path, ref_path.with_suffix(".txt")]

    metrics = pd.DataFrame(rows, columns=COLUMNS)
    written.append(save_table(metrics, out / "metrics.csv"))
    save_table(pd.DataFrame(fbp_times, columns=["dose", "seconds"]), out / "timing_fbp.csv")
    write_manifest(out, cfg, "evaluate", written, extra={"methods": [BASELINE] + [METHODS[m] for m in modes]})
    logger.info("[evaluate] ✓ Evaluated %d methods on %d held-out samples", 1 + len(modes), len(test))
    return {"directory": out, "metrics": metrics}


if __name__ == "__main__":
    from pipeline.cli import main as cli_main

    sys.exit(cli_main(["evaluate", *sys.argv[1:]]))
