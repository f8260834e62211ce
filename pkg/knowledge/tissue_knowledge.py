"""
Tissue and lifespan-domain knowledge base
Class indices, synthetic intensity regimes per developmental stage, and the
named head fine-tuning depths used by the meta-test ablations.
"""

from models.domain_model import DomainSpec, Morphology

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3


class TissueKnowledgeBase:
    """
    Central reference for tissue classes and domain appearance presets
    """

    def __init__(self):
        self.class_names = self._load_class_names()
        self.tissues = self._load_tissues()
        self.domain_presets = self._load_domain_presets()
        self.finetune_depths = self._load_finetune_depths()
        self.ablation_grids = self._load_ablation_grids()

    def _load_class_names(self):
        return {BACKGROUND: "background", CSF: "CSF", GM: "GM", WM: "WM"}

    def _load_tissues(self):
        """Regularized tissues; background only takes part in the segmentation loss"""
        return (CSF, GM, WM)

    def _load_domain_presets(self):
        """T1-like appearance per stage; ordering of GM/WM contrast is what matters"""
        return {
            # elderly / adult scans: WM > GM > CSF
            "adult": {
                "means": {"background": 0.0, "CSF": 0.25, "GM": 0.55, "WM": 0.80},
                "noise_sigma": 0.03,
            },
            # second-year infants: adult ordering at reduced contrast
            "toddler": {
                "means": {"background": 0.0, "CSF": 0.20, "GM": 0.50, "WM": 0.68},
                "noise_sigma": 0.04,
            },
            # first months: inverted GM/WM contrast
            "infant_inverted": {
                "means": {"background": 0.0, "CSF": 0.20, "GM": 0.70, "WM": 0.45},
                "noise_sigma": 0.04,
            },
            # around six months: GM and WM nearly indistinguishable
            "isointense": {
                "means": {"background": 0.0, "CSF": 0.22, "GM": 0.58, "WM": 0.60},
                "noise_sigma": 0.04,
            },
            # aging brain: adult contrast, thinner cortex, enlarged CSF
            "atrophy": {
                "means": {"background": 0.0, "CSF": 0.22, "GM": 0.50, "WM": 0.75},
                "noise_sigma": 0.03,
                "morphology": {"atrophy": 0.6},
            },
        }

    def _load_finetune_depths(self):
        """Named base/meta-learner splits for the fine-tune depth sweep"""
        return {
            "ft-0": "none",
            "ft-1": "up-1",
            "ft-2": "up-2",
            "ft-3": "up-3",
            "ft-all": "all",
        }

    def _load_ablation_grids(self):
        """Default sweep values per ablation axis"""
        return {
            "lambda1": [1.0, 1.2, 1.5, 1.8],
            "lambda2": [0.01, 0.05, 0.1, 0.5],
            "capacity": [1, 10, 100, 1000],
            "finetune-depth": list(self.finetune_depths) + ["last-3"],
        }

    def get_domain_spec(self, name: str, **overrides) -> DomainSpec:
        """Build a validated DomainSpec from a preset, with optional field overrides"""
        if name not in self.domain_presets:
            raise KeyError(f"unknown domain preset '{name}', known: {sorted(self.domain_presets)}")
        preset = dict(self.domain_presets[name])
        morphology = Morphology(**preset.pop("morphology", {}))
        preset.update(overrides)
        preset.setdefault("morphology", morphology)
        return DomainSpec(name=name, **preset)

    def class_name(self, index: int) -> str:
        return self.class_names[index]


# Global instance
tissue_knowledge = TissueKnowledgeBase()
