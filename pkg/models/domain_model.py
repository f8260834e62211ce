from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import Dict, Optional
import numpy as np

from config import Config

CLASS_NAMES = ("background", "CSF", "GM", "WM")


class Morphology(BaseModel):
    """Anatomy knobs of the concentric label generator"""

    wm_scale: float = Field(1.0, gt=0, le=1.4, description="Scale of the white matter core radius")
    ring_scale: float = Field(1.0, gt=0, le=1.5, description="Scale of the gray matter ring thickness")
    atrophy: float = Field(0.0, ge=0, le=1, description="GM thinning and CSF dilation")


class DomainSpec(BaseModel):
    """Intensity regime of one synthetic domain"""

    name: str = Field(..., description="Domain identifier")
    means: Dict[str, float] = Field(..., description="Class intensity means in [0, 1]")
    noise_sigma: float = Field(0.03, ge=0, description="Gaussian image noise")
    bias_amplitude: float = Field(Config.BIAS_AMPLITUDE, ge=0, description="Bias field amplitude")
    bias_frequency: int = Field(2, ge=1, description="Highest spatial frequency of the bias field")
    bias_components: int = Field(3, ge=0, description="Number of low-frequency bias components")
    morphology: Morphology = Field(default_factory=Morphology, description="Anatomy knobs")

    @field_validator("means")
    @classmethod
    def _check_means(cls, means):
        missing = [c for c in CLASS_NAMES if c not in means]
        if missing:
            raise ValueError(f"missing class means: {missing}")
        if any(not 0.0 <= v <= 1.0 for v in means.values()):
            raise ValueError("class means must lie in [0, 1]")
        return means

    def lookup(self) -> np.ndarray:
        return np.array([self.means[c] for c in CLASS_NAMES], dtype=np.float64)


class SyntheticSample(BaseModel):
    """One rendered image with its label map"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray = Field(..., description="Image in [0, 1], shape (H, W)")
    label: np.ndarray = Field(..., description="Integer label map, shape (H, W)")
    domain: str = Field(..., description="Domain id")
    seed: int = Field(..., description="Generation seed")
    split: Optional[str] = Field(None, description="train | support | test")
