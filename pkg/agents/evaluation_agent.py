"""
Test-set evaluation of a (theta, head) snapshot and report formatting.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd

from knowledge.tissue_knowledge import tissue_knowledge
from models.report_model import ClassMetrics, MetricReport
from models.unet import UNet
from utils.autodiff import Params
from utils.metrics import asd, dice


def evaluate_masks(prediction: np.ndarray, label: np.ndarray, sample: int) -> List[ClassMetrics]:
    """Per-tissue metrics of one decoded label map."""
    rows = []
    for cls in tissue_knowledge.tissues:
        pred, gt = prediction == cls, label == cls
        distance = asd(pred, gt)
        missing = math.isnan(distance)
        rows.append(ClassMetrics(sample=sample, tissue=tissue_knowledge.class_name(cls), dice=dice(pred, gt),
                                 asd=None if missing else distance, asd_missing=missing))
    return rows


class EvaluationAgent:
    """
    Decodes final logits by argmax and scores every tissue with Dice and ASD.
    """

    def __init__(self, network: UNet, workers: int = 1):
        self.network = network
        self.workers = workers
        self.logger = logging.getLogger(__name__)

    def evaluate_run(self, params: Params, images: np.ndarray, labels: np.ndarray,
                     run_id: str, domain: str, shots: int) -> MetricReport:
        if len(images) == 0:
            raise ValueError("test set is empty")
        self.network.check_params(params)
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[:, None]
        predictions = self.network.predict(params, images).argmax(axis=1)

        jobs = list(zip(predictions, labels, range(len(labels))))
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                per_sample = list(pool.map(lambda job: evaluate_masks(*job), jobs))
        else:
            per_sample = [evaluate_masks(*job) for job in jobs]

        report = MetricReport(run_id=run_id, domain=domain, shots=shots,
                              rows=[row for rows in per_sample for row in rows])
        missing = sum(r.asd_missing for r in report.rows)
        if missing:
            self.logger.warning(f"{missing} tissue masks were empty; ASD reported as missing")
        return report

    @staticmethod
    def write_csv(reports: Iterable[MetricReport], path: Path, append: bool = False) -> Path:
        """CSV rows: run_id, domain, shots, sample, class, dice, asd."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.concat([r.to_frame() for r in reports], ignore_index=True)
        exists = path.exists() and append
        frame.to_csv(path, mode="a" if exists else "w", header=not exists, index=False, float_format="%.10g")
        return path


def summary_table(reports: Iterable[MetricReport]) -> str:
    """One row per (domain, shots): per-tissue Dice and ASD as mean±std."""
    tissues = [tissue_knowledge.class_name(c) for c in tissue_knowledge.tissues]
    rows = []
    for report in reports:
        stats = report.aggregate()
        row = {"domain": report.domain, "shots": report.shots}
        for tissue in tissues:
            s = stats.get(tissue)
            row[f"Dice {tissue}"] = "n/a" if s is None else f"{s['dice_mean']:.4f}±{s['dice_std']:.4f}"
        for tissue in tissues:
            s = stats.get(tissue)
            asd_text = "n/a" if s is None or math.isnan(s["asd_mean"]) else f"{s['asd_mean']:.2f}±{s['asd_std']:.2f}"
            row[f"ASD {tissue}"] = asd_text
        rows.append(row)
    return pd.DataFrame(rows).to_string(index=False)
