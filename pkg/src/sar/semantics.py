"""Per-feature semantic profiles of users and items, and their PCA projection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import RatingDataset, co_rated
from .model import SarHyperparams, SarParams, item_semantic_profile, user_semantic_profile

log = logging.getLogger(__name__)


@dataclass
class SemanticProfile:
    kind: str
    index: int
    raw_id: str
    feature: int
    distribution: np.ndarray
    pca_xy: tuple[float, float] | None = None


def extract_profiles(
    params: SarParams, hp: SarHyperparams, ds: RatingDataset, feature: int, kind: str
) -> tuple[list[SemanticProfile], list[int]]:
    """Category marginal of every user (or item) under ``feature``.

    Each entity is summed over its co-rated counterparts in ``ds``. Entities
    without ratings in ``ds`` are skipped; their indices are returned second.
    """
    if not 0 <= feature < hp.num_features:
        raise ValueError(f"feature {feature} out of range [0, {hp.num_features})")
    marginal = user_semantic_profile if kind == "user" else item_semantic_profile
    raw_ids = ds.user_ids if kind == "user" else ds.item_ids
    profiles, skipped = [], []
    for index, others in enumerate(co_rated(ds, kind)):
        if len(others) == 0:
            skipped.append(index)
            continue
        dist = marginal(params, hp, index, feature, others)
        profiles.append(SemanticProfile(kind, index, raw_ids[index], feature, dist))
    if skipped:
        log.info("skipped %d %ss without ratings", len(skipped), kind)
    return profiles, skipped


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns, in
    the diagonal order in which they converge (not sorted).
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    else:
        log.warning("Jacobi did not converge in %d sweeps", max_sweeps)
    return np.diag(a).copy(), v


@dataclass
class PCAFit:
    mean: np.ndarray
    components: np.ndarray  # [out_dims, d], orthonormal rows
    eigenvalues: np.ndarray  # descending, all d of them

    def transform(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.mean) @ self.components.T


def pca_fit(points, out_dims: int = 2) -> PCAFit:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 points")
    d = x.shape[1]
    if out_dims > d:
        raise ValueError(f"out_dims={out_dims} exceeds dimension {d}")
    mean = x.mean(axis=0)
    cov = (x - mean).T @ (x - mean) / x.shape[0]
    vals, vecs = jacobi_eigh(cov)
    # stable sort keeps original axis order among equal eigenvalues
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    comps = vecs[:, :out_dims].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PCAFit(mean, comps, vals)


def pca_project(points, out_dims: int = 2) -> np.ndarray:
    """Project points onto their top ``out_dims`` principal axes.

    Covariance uses the population (1/N) normalization, so the variance of
    each projected coordinate equals the matching eigenvalue.
    """
    fit = pca_fit(points, out_dims)
    return fit.transform(points)


def project_profiles(profiles: list[SemanticProfile]) -> None:
    """Fill ``pca_xy`` of every profile from a joint 2-D PCA fit."""
    if len(profiles) < 2:
        raise ValueError("PCA needs at least 2 profiles")
    coords = pca_project(np.stack([p.distribution for p in profiles]), 2)
    for prof, (x, y) in zip(profiles, coords):
        prof.pca_xy = (float(x), float(y))


def write_profiles_csv(profiles: list[SemanticProfile], path: str | Path, header_comment: str = "") -> None:
    num_categories = len(profiles[0].distribution) if profiles else 0
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["kind", "raw_id", "feature"]
                        + [f"c{k + 1}" for k in range(num_categories)] + ["pca_x", "pca_y"])
        for prof in profiles:
            xy = prof.pca_xy if prof.pca_xy is not None else (float("nan"), float("nan"))
            writer.writerow([prof.kind, prof.raw_id, prof.feature]
                            + [f"{v:.9g}" for v in prof.distribution]
                            + [f"{v:.9g}" for v in xy])
