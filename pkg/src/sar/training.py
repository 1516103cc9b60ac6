"""Squared-error objective, analytic gradients and AdaDelta training for SAR."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernels import adadelta_dense, adadelta_rows, prob_grads
from .dataset import RatingDataset
from .model import (
    DivergenceError,
    Forward,
    SarHyperparams,
    SarParams,
    Workspace,
    forward,
    init_params,
    softmax,
    tau_matrix,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.6
    epsilon: float = 1e-6
    max_rounds: int = 400
    batch_size: int = 128
    seed: int = 0
    tolerance: float = 1e-5
    patience: int = 5
    init_scale: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("max_rounds", "batch_size", "patience", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be nonnegative, got {self.tolerance}")
        if not self.init_scale >= 0:
            raise ValueError(f"init_scale must be nonnegative, got {self.init_scale}")


@dataclass
class AdaDeltaState:
    sq_grad: list[np.ndarray]
    sq_update: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: SarParams) -> "AdaDeltaState":
        return cls([np.zeros_like(t) for t in params.tensors()],
                   [np.zeros_like(t) for t in params.tensors()])


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    train_rmse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    rounds: int = 0
    stop_reason: str = ""

    def csv_rows(self) -> list[str]:
        rows = ["round,loss,train_rmse,seconds"]
        for k in range(self.rounds):
            rows.append(f"{k + 1},{self.loss[k]!r},{self.train_rmse[k]!r},{self.seconds[k]!r}")
        return rows


def _unpack(batch):
    if isinstance(batch, RatingDataset):
        return batch.users, batch.items, batch.ratings
    users, items, ratings = batch
    users, items = np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=float)
    if len(users) == 0:
        raise ValueError("empty batch")
    return users, items, ratings


def _regularizer(params: SarParams, hp: SarHyperparams, users, items) -> float:
    if hp.lam == 0:
        return 0.0
    pz = softmax(params.user_logits[np.unique(users)])
    py = softmax(params.item_logits[np.unique(items)])
    return hp.lam * (float(np.sum(pz * pz)) + float(np.sum(py * py)))


def loss(params: SarParams, hp: SarHyperparams, batch) -> float:
    """Summed squared error plus ``lam`` times the squared norms of the
    category distributions of every user and item present in ``batch``."""
    users, items, ratings = _unpack(batch)
    pred = forward(params, hp, users, items).pred
    value = float(np.sum((pred - ratings) ** 2)) + _regularizer(params, hp, users, items)
    if not np.isfinite(value):
        raise DivergenceError("non-finite loss")
    return value


def _example_grads(fw: Forward, hp: SarHyperparams, ratings, tau_mat, ws: Workspace | None = None):
    """Per-example gradients w.r.t. category probabilities plus the tau and
    scale contributions of one chunk of a batch."""
    B = len(ratings)
    F, R = hp.num_features, hp.rating_max
    levels = np.arange(1, R + 1, dtype=float)
    resid2 = 2.0 * (fw.pred - ratings)
    g_logit = resid2[:, None] * fw.probs * (levels[None, :] - fw.pred[:, None])
    g_scores = g_logit * fw.scale[:, None]
    g_scale = np.sum(g_logit * fw.scores, axis=1)

    g_tau = (fw.weight.reshape(B, -1).T @ g_scores) / F
    if ws is None:
        g_weight = np.empty_like(fw.weight)
    else:
        g_weight = ws.g_weight[:B]
    np.matmul(g_scores * (1.0 / F), tau_mat.T, out=g_weight.reshape(B, -1))
    g_pz = np.empty_like(fw.pz)
    g_py = np.empty_like(fw.py)
    prob_grads(g_weight, fw.pz, fw.py, fw.kernel, fw.weight, 1.0 / hp.sigma, g_pz, g_py)
    return g_pz, g_py, g_tau, g_scale


def _logit_grad(probs: np.ndarray, g_probs: np.ndarray) -> np.ndarray:
    return probs * (g_probs - np.sum(probs * g_probs, axis=-1, keepdims=True))


def _row_grads(
    index: np.ndarray, rows: np.ndarray, probs: np.ndarray, lam: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Sum per-example probability gradients per entity, add the regularizer
    once per entity, and map through the normalized exponential.

    ``probs`` are the per-example category distributions. Returns the touched
    entity indices, their logit gradients and the regularizer value over them.
    """
    order = np.argsort(index, kind="stable")
    sorted_index = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_index[1:] != sorted_index[:-1]])
    uniq = sorted_index[starts]
    acc = np.add.reduceat(rows[order], starts, axis=0)
    p = probs[order[starts]]
    if lam:
        acc += 2.0 * lam * p
    reg = lam * float(np.sum(p * p))
    return uniq, _logit_grad(p, acc), reg


@dataclass
class SparseGrads:
    """Batch gradient with user/item logit gradients kept only for touched rows."""

    user_rows: np.ndarray
    user_logits: np.ndarray
    item_rows: np.ndarray
    item_logits: np.ndarray
    tau: np.ndarray
    omega_u: np.ndarray
    omega_t: np.ndarray
    pred: np.ndarray  # batch predictions at the evaluated parameters
    reg: float        # regularizer value at the evaluated parameters

    def is_finite(self) -> bool:
        # a non-finite entry anywhere makes the total non-finite
        return bool(np.isfinite(sum(float(np.sum(getattr(self, n))) for n in SarParams.NAMES)))

    def dense(self, params: SarParams) -> SarParams:
        gu = np.zeros_like(params.user_logits)
        gu[self.user_rows] = self.user_logits
        gi = np.zeros_like(params.item_logits)
        gi[self.item_rows] = self.item_logits
        return SarParams(gu, gi, self.tau, self.omega_u, self.omega_t)


def sparse_gradients(
    params: SarParams, hp: SarHyperparams, batch, threads: int = 1,
    ws: Workspace | None = None,
) -> SparseGrads:
    users, items, ratings = _unpack(batch)
    tau_mat = tau_matrix(params.tau)
    if threads > 1 and len(users) >= 2 * threads:
        bounds = np.linspace(0, len(users), threads + 1).astype(int)
        chunks = [slice(bounds[k], bounds[k + 1]) for k in range(threads)]

        def work(sl):
            fw = forward(params, hp, users[sl], items[sl])
            return (fw.pred, fw.pz, fw.py) + _example_grads(fw, hp, ratings[sl], tau_mat)

        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, chunks))
        pred, pz, py, g_pz, g_py, g_scale = (
            np.concatenate([p[k] for p in parts]) for k in (0, 1, 2, 3, 4, 6))
        g_tau = parts[0][5]
        for p in parts[1:]:
            g_tau = g_tau + p[5]
    else:
        fw = forward(params, hp, users, items, ws)
        pred, pz, py = fw.pred, fw.pz, fw.py
        g_pz, g_py, g_tau, g_scale = _example_grads(fw, hp, ratings, tau_mat, ws)

    F, C, R = hp.num_features, hp.num_categories, hp.rating_max
    urows, gu, reg_u = _row_grads(users, g_pz, pz, hp.lam)
    irows, gi, reg_i = _row_grads(items, g_py, py, hp.lam)
    grads = SparseGrads(
        user_rows=urows,
        user_logits=gu,
        item_rows=irows,
        item_logits=gi,
        tau=g_tau.reshape(F, C, C, R).transpose(3, 1, 2, 0).copy(),
        omega_u=np.bincount(users, g_scale * params.omega_t[items], params.num_users),
        omega_t=np.bincount(items, g_scale * params.omega_u[users], params.num_items),
        pred=pred,
        reg=reg_u + reg_i,
    )
    if not grads.is_finite():
        raise DivergenceError("non-finite gradient")
    return grads


def gradients(params: SarParams, hp: SarHyperparams, batch, threads: int = 1) -> SarParams:
    """Exact gradient of :func:`loss` for every parameter tensor.

    With ``threads > 1`` the batch is cut into that many chunks evaluated
    concurrently; partial results are reduced in chunk order, so output is
    reproducible for a fixed thread count.
    """
    return sparse_gradients(params, hp, batch, threads).dense(params)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def finite_diff_grad(params: SarParams, hp: SarHyperparams, batch, h: float = 1e-5) -> SarParams:
    """Central-difference gradient of :func:`loss`; meant for tiny models only."""
    out = []
    for name in SarParams.NAMES:
        def f(x, name=name):
            probe = params.copy()
            setattr(probe, name, x)
            return loss(probe, hp, batch)
        out.append(central_difference(f, getattr(params, name), h))
    return SarParams(*out)


def _adadelta_update(theta, eg2, edx2, g, eta, epsilon):
    eg2 *= eta
    eg2 += (1.0 - eta) * g * g
    delta = -np.sqrt(edx2 + epsilon) / np.sqrt(eg2 + epsilon) * g
    edx2 *= eta
    edx2 += (1.0 - eta) * delta * delta
    theta += delta


def adadelta_step(
    state: AdaDeltaState, params: SarParams, grads: SarParams, eta: float, epsilon: float
) -> tuple[AdaDeltaState, SarParams]:
    """One AdaDelta update, applied in place to ``state`` and ``params``."""
    for name, eg2, edx2, g in zip(SarParams.NAMES, state.sq_grad, state.sq_update, grads.tensors()):
        theta = getattr(params, name)
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        _adadelta_update(theta, eg2, edx2, g, eta, epsilon)
    return state, params


class RowLazyAdaDelta:
    """AdaDelta over row-sparse gradients.

    A zero-gradient step leaves a parameter unchanged and only scales both
    accumulators by ``eta``, so the decay of untouched user/item rows is
    deferred and applied as ``eta**k`` the next time the row is touched.
    Parameters follow dense :func:`adadelta_step` up to rounding; so do the
    accumulators once :meth:`flush` has run.
    """

    def __init__(self, params: SarParams, eta: float, epsilon: float):
        self.state = AdaDeltaState.zeros_like(params)
        self.eta = eta
        self.epsilon = epsilon
        self.steps = 0
        self.last = [np.zeros(params.num_users, dtype=np.int64),
                     np.zeros(params.num_items, dtype=np.int64)]

    def step(self, params: SarParams, grads: SparseGrads) -> None:
        sg, su = self.state.sq_grad, self.state.sq_update
        for k, (rows, g) in enumerate(((grads.user_rows, grads.user_logits),
                                       (grads.item_rows, grads.item_logits))):
            theta = params.tensors()[k]
            n = theta.shape[0]
            adadelta_rows(theta.reshape(n, -1), sg[k].reshape(n, -1), su[k].reshape(n, -1),
                          rows, g.reshape(len(rows), -1), self.last[k], self.steps,
                          self.eta, self.epsilon)
        for k, name in ((2, "tau"), (3, "omega_u"), (4, "omega_t")):
            adadelta_dense(getattr(params, name).reshape(-1), sg[k].reshape(-1),
                           su[k].reshape(-1), getattr(grads, name).reshape(-1),
                           self.eta, self.epsilon)
        self.steps += 1

    def flush(self) -> AdaDeltaState:
        for k in (0, 1):
            decay = self.eta ** (self.steps - self.last[k]).astype(float)
            shape = (-1,) + (1,) * (self.state.sq_grad[k].ndim - 1)
            self.state.sq_grad[k] *= decay.reshape(shape)
            self.state.sq_update[k] *= decay.reshape(shape)
            self.last[k][:] = self.steps
        return self.state


def train(
    train_set: RatingDataset,
    hp: SarHyperparams,
    config: TrainConfig = TrainConfig(),
    params: SarParams | None = None,
    on_round: Callable[[int, SarParams, TrainReport], None] | None = None,
) -> tuple[SarParams, TrainReport]:
    """Fit SAR by mini-batch AdaDelta until train RMSE stalls or ``max_rounds``."""
    if train_set.num_ratings == 0:
        raise ValueError("empty training set")
    if train_set.rating_max != hp.rating_max:
        raise ValueError(f"dataset rating_max {train_set.rating_max} != hyperparameter R={hp.rating_max}")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(hp, train_set.num_users, train_set.num_items, rng, config.init_scale)
    opt = RowLazyAdaDelta(params, config.eta, config.epsilon)
    ws = Workspace(hp, config.batch_size)
    users, items = train_set.users, train_set.items
    ratings = train_set.ratings.astype(float)
    n = len(ratings)
    report = TrainReport()
    best, stale = np.inf, 0

    for rnd in range(1, config.max_rounds + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        total_loss = 0.0
        sq_err = 0.0
        for lo in range(0, n, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            batch = (users[rows], items[rows], ratings[rows])
            try:
                grads = sparse_gradients(params, hp, batch, config.threads, ws)
            except DivergenceError as exc:
                raise DivergenceError(f"round {rnd}: {exc}") from None
            err = float(np.sum((grads.pred - batch[2]) ** 2))
            total_loss += err + grads.reg
            sq_err += err
            opt.step(params, grads)
        if not np.isfinite(total_loss):
            raise DivergenceError(f"round {rnd}: non-finite loss")
        rmse = float(np.sqrt(sq_err / n))
        report.loss.append(total_loss)
        report.train_rmse.append(rmse)
        report.seconds.append(time.perf_counter() - start)
        report.rounds = rnd
        log.info("round %d loss %.4f train_rmse %.5f (%.2fs)", rnd, total_loss, rmse, report.seconds[-1])
        if on_round is not None:
            on_round(rnd, params, report)
        if rmse < best - config.tolerance:
            best, stale = rmse, 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stop_reason = "converged"
                return params, report
    report.stop_reason = "max_rounds"
    return params, report
