"""Source/target domain pairs with controllable shift, supervision and size.

The default testbed is a ring of isotropic Gaussians as the large labeled
source domain; the target keeps a few of those components, optionally shifts
them off the ring, relabels them 0..m-1, and draws far fewer points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffusion import SampleBatch
from .mixtures import GaussianMixture, sample_mixture

KINDS = ("ring_shift", "subset_only", "unlabeled_faces_analogue")


@dataclass
class DomainSpec:
    kind: str = "ring_shift"
    num_source_components: int = 8
    num_target_components: int = 3
    shift: tuple = (0.3, 0.0)
    component_cov: float = 0.05
    n_source: int = 50_000
    n_target: int = 1_500
    labeled: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.num_target_components > self.num_source_components:
            raise ValueError("target cannot have more components than the source")
        if not (1 <= self.num_target_components):
            raise ValueError("need at least one target component")
        if self.n_target >= self.n_source:
            raise ValueError("target dataset must be smaller than the source")
        if self.component_cov <= 0:
            raise ValueError("component covariance scale must be positive")


@dataclass
class DomainPair:
    source_gm: GaussianMixture
    source_data: SampleBatch
    target_gm: GaussianMixture
    target_data: SampleBatch


def ring_mixture(num_components: int, spacing: float = 1.0, cov_scale: float = 0.05,
                 labeled: bool = True) -> GaussianMixture:
    """Equal-weight isotropic components on a circle with the given spacing
    between adjacent means."""
    k = np.arange(num_components)
    radius = spacing / (2.0 * np.sin(np.pi / num_components))
    ang = 2.0 * np.pi * k / num_components
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    covs = np.repeat(cov_scale * np.eye(2)[None], num_components, axis=0)
    weights = np.full(num_components, 1.0 / num_components)
    labels = k.astype(np.int64) if labeled else None
    return GaussianMixture(weights=weights, means=means, covs=covs, labels=labels)


def build_pair(spec: DomainSpec, seed: int) -> DomainPair:
    """Construct the (source, target) mixtures and draw their datasets."""
    source = ring_mixture(spec.num_source_components, cov_scale=spec.component_cov)
    m = spec.num_target_components
    shift = np.zeros(2) if spec.kind == "subset_only" else np.asarray(spec.shift, dtype=np.float64)
    target_labeled = spec.labeled and spec.kind != "unlabeled_faces_analogue"
    target = GaussianMixture(
        weights=np.full(m, 1.0 / m),
        means=source.means[:m] + shift[None, :],
        covs=source.covs[:m].copy(),
        labels=np.arange(m, dtype=np.int64) if target_labeled else None,
    )
    source_data = sample_mixture(source, spec.n_source, seed)
    target_data = sample_mixture(target, spec.n_target, seed + 1)
    return DomainPair(source_gm=source, source_data=source_data,
                      target_gm=target, target_data=target_data)


def minibatch(dataset: SampleBatch, batch_size: int, rng: np.random.Generator,
              replace: bool = True):
    """Uniform draw of (x0, c); without replacement it returns a permutation
    slice, so batch_size == len(dataset) yields a full shuffle."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    if replace:
        idx = rng.integers(0, n, size=batch_size)
    else:
        if batch_size > n:
            raise ValueError("cannot draw more than the dataset size without replacement")
        idx = rng.permutation(n)[:batch_size]
    return dataset.points[idx], dataset.labels[idx]


def export_csv(dataset: SampleBatch, path):
    """Write a dataset as rows of x, y, label (label -1 = null)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for p, lab in zip(dataset.points, dataset.labels):
            writer.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", int(lab)])


def load_csv(path, seed: int = 0) -> SampleBatch:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["x", "y", "label"]:
            raise ValueError(f"unexpected dataset header {header}")
        pts, labs = [], []
        for row in reader:
            pts.append([float(row[0]), float(row[1])])
            labs.append(int(row[2]))
    return SampleBatch(points=np.array(pts), labels=np.array(labs), seed=seed)
