"""Accuracy metrics, held-out evaluation, sweeps and timing."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .baselines import train_mf, train_nmf
from .dataset import RatingDataset, split
from .model import SarHyperparams, SarModel
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae_raw: float
    mae_rounded: float
    n_evaluated: int
    n_cold: int

    def rows(self) -> list[tuple[str, float]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


def _check(preds, golds):
    preds = np.asarray(preds, dtype=float)
    golds = np.asarray(golds, dtype=float)
    if preds.shape != golds.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {golds.shape}")
    if preds.size == 0:
        raise ValueError("no predictions")
    return preds, golds


def rmse(preds, golds) -> float:
    preds, golds = _check(preds, golds)
    return float(np.sqrt(np.mean((preds - golds) ** 2)))


def round_rating(preds, rating_max: int = 5) -> np.ndarray:
    """Round half up to the nearest integer rating and clip to ``[1, rating_max]``."""
    return np.clip(np.floor(np.asarray(preds, dtype=float) + 0.5), 1, rating_max)


def mae(preds, golds, rounded: bool = False, rating_max: int = 5) -> float:
    preds, golds = _check(preds, golds)
    if rounded:
        preds = round_rating(preds, rating_max)
    return float(np.mean(np.abs(preds - golds)))


def evaluate(model, test: RatingDataset, train: RatingDataset, fallback: float | None = None) -> Metrics:
    """Score ``model`` on ``test``. Pairs whose user or item has no rating in
    ``train`` get ``fallback`` (default: the training mean)."""
    if test.num_ratings == 0:
        raise ValueError("empty test set")
    if fallback is None:
        fallback = train.global_mean()
    seen_u = np.bincount(train.users, minlength=train.num_users) > 0
    seen_i = np.bincount(train.items, minlength=train.num_items) > 0
    cold = ~(seen_u[test.users] & seen_i[test.items])
    preds = np.full(test.num_ratings, float(fallback))
    if (~cold).any():
        preds[~cold] = model.predict(test.users[~cold], test.items[~cold])
    golds = test.ratings
    return Metrics(
        rmse=rmse(preds, golds),
        mae_raw=mae(preds, golds),
        mae_rounded=mae(preds, golds, rounded=True, rating_max=test.rating_max),
        n_evaluated=test.num_ratings,
        n_cold=int(cold.sum()),
    )


def train_and_evaluate(ds: RatingDataset, rho: float, seed: int, hp: SarHyperparams, config: TrainConfig):
    sp = split(ds, rho, seed)
    params, report = train(sp.train, hp, dataclasses.replace(config, seed=seed))
    return evaluate(SarModel(params, hp), sp.test, sp.train), report


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    rho: float
    seed: int
    metrics: Metrics
    rounds: int

    def csv(self) -> str:
        m = self.metrics
        return f"{self.param},{self.value},{self.rho},{self.seed},{m.rmse!r},{m.mae_raw!r},{m.mae_rounded!r}"


SWEEP_HEADER = "param,value,rho,seed,rmse,mae_raw,mae_rounded"

HYPER_FIELDS = {"F": "num_features", "C": "num_categories", "sigma": "sigma", "lambda": "lam"}


def sparsity_sweep(
    ds: RatingDataset, rhos: Sequence[float], hp: SarHyperparams, config: TrainConfig,
    seeds: Sequence[int],
) -> list[SweepRow]:
    """Independent split, train and evaluate for every (rho, seed)."""
    rows = []
    for rho in rhos:
        if not 0 < rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {rho}")
        for seed in seeds:
            metrics, report = train_and_evaluate(ds, rho, seed, hp, config)
            log.info("rho=%g seed=%d rmse=%.4f", rho, seed, metrics.rmse)
            rows.append(SweepRow("rho", rho, rho, seed, metrics, report.rounds))
    return rows


def hyper_sweep(
    ds: RatingDataset, param: str, values: Sequence[float], hp: SarHyperparams,
    config: TrainConfig, rho: float, seeds: Sequence[int],
) -> list[SweepRow]:
    """Vary one of F, C, sigma, lambda with everything else held fixed."""
    if param not in HYPER_FIELDS:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(HYPER_FIELDS)}")
    rows = []
    for value in values:
        field_name = HYPER_FIELDS[param]
        cast = int if param in ("F", "C") else float
        hp_v = dataclasses.replace(hp, **{field_name: cast(value)})
        for seed in seeds:
            metrics, report = train_and_evaluate(ds, rho, seed, hp_v, config)
            log.info("%s=%s seed=%d rmse=%.4f", param, value, seed, metrics.rmse)
            rows.append(SweepRow(param, value, rho, seed, metrics, report.rounds))
    return rows


def mean_by_value(rows: Sequence[SweepRow]) -> dict[float, float]:
    """Mean test RMSE per swept value."""
    out: dict[float, list[float]] = {}
    for r in rows:
        out.setdefault(r.value, []).append(r.metrics.rmse)
    return {v: float(np.mean(xs)) for v, xs in out.items()}


def tradeoff_metric(rmse_alg: float, time_alg: float, rmse_nmf: float, time_nmf: float) -> float:
    """RMSE improvement over NMF per second of extra round time (bigger is better)."""
    if time_alg == time_nmf:
        raise ValueError("trade-off metric is undefined when both round times are equal")
    return -(rmse_alg - rmse_nmf) / (time_alg - time_nmf)


def time_rounds(
    trainer: str | Callable[[int], Sequence[float]],
    ds: RatingDataset,
    hp: SarHyperparams | None = None,
    config: TrainConfig | None = None,
    n_rounds: int = 3,
    **baseline_kwargs,
) -> float:
    """Mean wall-clock seconds per training round, after one warm-up round.

    ``trainer`` is ``"sar"``, ``"mf"``, ``"nmf"`` or a callable that runs the
    given number of rounds and returns per-round durations.
    """
    if n_rounds < 1:
        raise ValueError(f"n_rounds must be >= 1, got {n_rounds}")
    total = n_rounds + 1
    if callable(trainer):
        seconds = list(trainer(total))
    elif trainer == "sar":
        cfg = dataclasses.replace(config or TrainConfig(), max_rounds=total, patience=total + 1)
        _, report = train(ds, hp or SarHyperparams(rating_max=ds.rating_max), cfg)
        seconds = report.seconds
    elif trainer == "mf":
        seconds = train_mf(ds, epochs=total, **baseline_kwargs).epoch_seconds
    elif trainer == "nmf":
        seconds = train_nmf(ds, epochs=total, **baseline_kwargs).epoch_seconds
    else:
        raise ValueError(f"unknown trainer {trainer!r}")
    if len(seconds) < total:
        raise ValueError(f"trainer ran {len(seconds)} rounds, expected {total}")
    return float(np.mean(seconds[1:total]))
