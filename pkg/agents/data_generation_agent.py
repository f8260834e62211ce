"""
Synthetic multi-domain dataset construction: shared anatomy rendered under
several lifespan intensity regimes, plus a held-out domain split into a
few-shot support pool and a test set.
"""

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from knowledge.tissue_knowledge import tissue_knowledge
from models.config_model import DataConfig
from models.domain_model import DomainSpec, SyntheticSample
from utils.anatomy import augment, generate_label_map, render
from utils.exceptions import ConfigValidationError
from utils.tensor_io import (directory_digest, encode_tensor, file_sha256, load_tensor,
                             read_manifest, save_tensor, write_manifest)

SEED_STRIDE = 10_000


def sample_seed(run_seed: int, domain_index: int, index: int) -> int:
    """Seeds stay disjoint across domains and splits while index < SEED_STRIDE."""
    return run_seed * 1_000_000 + domain_index * SEED_STRIDE + index


def _make_sample(args) -> SyntheticSample:
    spec, seed, extents, stride, split = args
    label = generate_label_map(seed, extents, spec.morphology, stride)
    return SyntheticSample(image=render(label, spec, seed), label=label, domain=spec.name, seed=seed, split=split)


@dataclass
class DomainDataset:
    spec: DomainSpec
    images: np.ndarray
    labels: np.ndarray
    seeds: List[int]
    split: str = "train"

    @property
    def name(self) -> str:
        return self.spec.name

    def __len__(self) -> int:
        return len(self.seeds)

    def subset(self, count: int, split: Optional[str] = None) -> "DomainDataset":
        return DomainDataset(self.spec, self.images[:count], self.labels[:count], self.seeds[:count],
                             split or self.split)

    def sample_batch(self, batch_size: int, rng: np.random.Generator,
                     augmented: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Random mini-batch as (images [B, 1, H, W], labels [B, H, W])."""
        index = rng.choice(len(self), size=batch_size, replace=len(self) < batch_size)
        images, labels = [], []
        for i in index:
            image, label = self.images[i], self.labels[i]
            if augmented:
                image, label = augment(image, label, rng)
            images.append(image)
            labels.append(label)
        return np.stack(images)[:, None], np.stack(labels)


@dataclass
class DomainPool:
    """Training domains plus the held-out domain's support and test splits."""

    train: Dict[str, DomainDataset]
    support: DomainDataset
    test: DomainDataset
    seed: int = 0
    extents: Tuple[int, int] = (32, 32)
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def domains(self) -> List[str]:
        return list(self.train)

    def assign(self, rng: np.random.Generator) -> Tuple[str, Tuple[str, str]]:
        """Uniformly random inner domain and two distinct outer domains."""
        if len(self.train) < 3:
            raise ConfigValidationError("meta-training needs at least 3 domains")
        chosen = rng.permutation(len(self.domains))[:3]
        names = [self.domains[i] for i in chosen]
        return names[0], (names[1], names[2])

    def all_seeds(self) -> Dict[str, List[int]]:
        seeds = {f"train.{name}": list(ds.seeds) for name, ds in self.train.items()}
        seeds["support"] = list(self.support.seeds)
        seeds["test"] = list(self.test.seeds)
        return seeds


class DataGenerationAgent:
    """
    Builds, writes, loads and verifies synthetic domain pools.
    """

    def __init__(self, config: Optional[DataConfig] = None, workers: int = 1):
        self.config = config or DataConfig()
        self.workers = workers
        self.logger = logging.getLogger(__name__)

    def _render_domain(self, spec: DomainSpec, seeds: Sequence[int], stride: int, split: str) -> DomainDataset:
        jobs = [(spec, s, self.config.extents, stride, split) for s in seeds]
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                samples = list(pool.map(_make_sample, jobs))
        else:
            samples = [_make_sample(job) for job in jobs]
        return DomainDataset(spec, np.stack([s.image for s in samples]), np.stack([s.label for s in samples]),
                             [s.seed for s in samples], split)

    def build_pool(self, seed: int, shots: Sequence[int] = (1,), stride: int = 1,
                   specs: Optional[Dict[str, DomainSpec]] = None) -> DomainPool:
        """Render every training domain and the held-out support/test splits."""
        cfg = self.config
        if any(s > cfg.support_size for s in shots):
            raise ConfigValidationError(f"shots {list(shots)} exceed the support size {cfg.support_size}")
        if cfg.test_count < 2:
            raise ConfigValidationError("the held-out domain needs at least 2 test samples")
        if cfg.samples_per_domain >= SEED_STRIDE or cfg.support_size + cfg.test_count >= SEED_STRIDE:
            raise ConfigValidationError(f"at most {SEED_STRIDE - 1} samples per domain")
        specs = specs or {}

        def spec_for(name: str) -> DomainSpec:
            return specs.get(name) or tissue_knowledge.get_domain_spec(name)

        train = {}
        for d, name in enumerate(cfg.train_domains):
            seeds = [sample_seed(seed, d, i) for i in range(cfg.samples_per_domain)]
            train[name] = self._render_domain(spec_for(name), seeds, stride, "train")
            self.logger.info(f"Rendered {len(seeds)} samples for domain '{name}'")

        held = len(cfg.train_domains)
        support_seeds = [sample_seed(seed, held, i) for i in range(cfg.support_size)]
        test_seeds = [sample_seed(seed, held, cfg.support_size + i) for i in range(cfg.test_count)]
        held_spec = spec_for(cfg.held_out)
        support = self._render_domain(held_spec, support_seeds, stride, "support")
        test = self._render_domain(held_spec, test_seeds, stride, "test")
        self.logger.info(f"Held-out domain '{cfg.held_out}': {len(support)} support, {len(test)} test")
        return DomainPool(train=train, support=support, test=test, seed=seed, extents=tuple(cfg.extents))

    # ---------------------------------------------------------------- disk format

    def write_pool(self, pool: DomainPool, directory: Path) -> Path:
        """One DMT1 file per image and label, plus manifest.txt with specs and seeds."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = [("seed", str(pool.seed)), ("extents", "x".join(str(e) for e in pool.extents))]
        datasets = [(f"train.{n}", ds) for n, ds in pool.train.items()] + [("support", pool.support), ("test", pool.test)]
        for key, ds in datasets:
            entries.append((f"spec.{key}", ds.spec.model_dump_json()))
            for i, s in enumerate(ds.seeds):
                stem = f"{key.replace('.', '_')}_{i:04d}"
                save_tensor(directory / f"{stem}_image.dmt", ds.images[i])
                save_tensor(directory / f"{stem}_label.dmt", ds.labels[i])
                entries.append((f"sample.{key}.{i:04d}", str(s)))
        write_manifest(directory / "manifest.txt", entries)
        self.logger.info(f"Wrote dataset to {directory} (digest {directory_digest(directory)[:12]})")
        return directory

    def load_pool(self, directory: Path) -> DomainPool:
        directory = Path(directory)
        manifest = directory / "manifest.txt"
        if not manifest.exists():
            raise ConfigValidationError(f"dataset directory {directory} has no manifest")
        entries = read_manifest(manifest)
        meta = dict(entries)
        specs = {k[len("spec."):]: DomainSpec.model_validate_json(v) for k, v in entries if k.startswith("spec.")}
        samples: Dict[str, List[Tuple[int, int]]] = {key: [] for key in specs}
        for k, v in entries:
            if k.startswith("sample."):
                key, _, index = k[len("sample."):].rpartition(".")
                samples[key].append((int(index), int(v)))

        datasets = {}
        for key, spec in specs.items():
            rows = sorted(samples[key])
            stem = key.replace(".", "_")
            images = np.stack([load_tensor(directory / f"{stem}_{i:04d}_image.dmt") for i, _ in rows])
            labels = np.stack([load_tensor(directory / f"{stem}_{i:04d}_label.dmt") for i, _ in rows])
            split = key.split(".")[0]
            datasets[key] = DomainDataset(spec, images, np.rint(labels).astype(np.int64), [s for _, s in rows], split)

        extents = tuple(int(e) for e in meta["extents"].split("x"))
        train = {k[len("train."):]: ds for k, ds in datasets.items() if k.startswith("train.")}
        return DomainPool(train=train, support=datasets["support"], test=datasets["test"],
                          seed=int(meta["seed"]), extents=extents, metadata={"source": str(directory)})

    def verify(self, directory: Path, stride: int = 1) -> List[str]:
        """Re-render every sample from the manifest; returns the names of files whose hash differs."""
        directory = Path(directory)
        entries = read_manifest(directory / "manifest.txt")
        meta = dict(entries)
        extents = tuple(int(e) for e in meta["extents"].split("x"))
        specs = {k[len("spec."):]: DomainSpec.model_validate_json(v) for k, v in entries if k.startswith("spec.")}
        mismatched = []
        for k, v in entries:
            if not k.startswith("sample."):
                continue
            key, _, index = k[len("sample."):].rpartition(".")
            seed = int(v)
            label = generate_label_map(seed, extents, specs[key].morphology, stride)
            image = render(label, specs[key], seed)
            stem = f"{key.replace('.', '_')}_{index}"
            for suffix, array in (("image", image), ("label", label)):
                path = directory / f"{stem}_{suffix}.dmt"
                expected = hashlib.sha256(encode_tensor(array)).hexdigest()
                if not path.exists() or file_sha256(path) != expected:
                    mismatched.append(path.name)
        if mismatched:
            self.logger.warning(f"{len(mismatched)} files differ from their manifest regeneration")
        return mismatched
