from pydantic import BaseModel, Field
from typing import Dict, List, Optional
import math

import pandas as pd


class ClassMetrics(BaseModel):
    """Metrics of one tissue on one test sample"""

    sample: int = Field(..., description="Test sample index")
    tissue: str = Field(..., description="CSF | GM | WM")
    dice: float = Field(..., ge=0, le=1)
    asd: Optional[float] = Field(None, ge=0, description="Pixel-unit ASD, None when missing")
    asd_missing: bool = Field(False, description="An empty mask made ASD undefined")


class MetricReport(BaseModel):
    """Per-class Dice/ASD of one evaluated (run, domain, shots) leg"""

    run_id: str
    domain: str
    shots: int = Field(..., ge=0)
    rows: List[ClassMetrics] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records = [{"run_id": self.run_id, "domain": self.domain, "shots": self.shots,
                    "sample": r.sample, "class": r.tissue, "dice": r.dice,
                    "asd": math.nan if r.asd is None else r.asd} for r in self.rows]
        return pd.DataFrame.from_records(
            records, columns=["run_id", "domain", "shots", "sample", "class", "dice", "asd"])

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        """mean/std per tissue; ASD statistics skip missing values"""
        frame = self.to_frame()
        summary = {}
        for tissue, group in frame.groupby("class", sort=False):
            summary[tissue] = {
                "dice_mean": float(group["dice"].mean()),
                "dice_std": float(group["dice"].std(ddof=0)),
                "asd_mean": float(group["asd"].mean()),
                "asd_std": float(group["asd"].std(ddof=0)),
                "asd_missing": int(group["asd"].isna().sum()),
            }
        return summary

    def mean_dice(self) -> float:
        return float(self.to_frame()["dice"].mean()) if self.rows else math.nan


class RateReport(BaseModel):
    """Fit of min-gradient-norm^2 against the horizon T on log-log axes"""

    trace: str = Field(..., description="mfl | mil | synthetic")
    horizons: List[int]
    values: List[float] = Field(..., description="Ensemble-mean min_t ||grad||^2 per horizon")
    slope: float
    intercept: float
    c_fit: float = Field(..., description="Smallest C with value <= C / sqrt(T) on every horizon")
    residuals: List[float]
    threshold: float
    passed: bool
    rho: Optional[float] = Field(None, description="Largest gradient norm seen along the trajectories")
    sigma: Optional[float] = None

    def to_text(self) -> str:
        lines = [f"trace={self.trace} slope={self.slope:.4f} threshold={self.threshold:.2f} "
                 f"C={self.c_fit:.4g} {'PASS' if self.passed else 'FAIL'}"]
        for T, v, r in zip(self.horizons, self.values, self.residuals):
            lines.append(f"  T={T:<8d} min_grad_sq={v:.6g} residual={r:+.4f}")
        if self.rho is not None:
            lines.append(f"  rho={self.rho:.4g}")
        return "\n".join(lines)
