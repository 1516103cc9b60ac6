"""Reference factorization baselines: biased SGD matrix factorization and
masked multiplicative-update NMF."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .dataset import RatingDataset
from .model import DivergenceError, save_checkpoint

NMF_FLOOR = 1e-12


@dataclass
class MFModel:
    kind: str  # "mf" or "nmf"
    user_factors: np.ndarray
    item_factors: np.ndarray
    global_mean: float
    rating_max: int
    user_bias: np.ndarray | None = None
    item_bias: np.ndarray | None = None
    user_seen: np.ndarray | None = None
    item_seen: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.user_factors.shape[1]

    def raw_scores(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        out = np.einsum("bk,bk->b", self.user_factors[users], self.item_factors[items])
        if self.user_bias is not None:
            out = out + self.global_mean + self.user_bias[users] + self.item_bias[items]
        return out

    def predict(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        out = np.clip(self.raw_scores(users, items), 1.0, self.rating_max)
        cold = np.zeros(len(users), dtype=bool)
        if self.user_seen is not None:
            cold |= ~self.user_seen[users]
        if self.item_seen is not None:
            cold |= ~self.item_seen[items]
        out[cold] = self.global_mean
        return out


def predict_mf(model: MFModel, u: int, t: int) -> float:
    if not (0 <= u < model.user_factors.shape[0] and 0 <= t < model.item_factors.shape[0]):
        raise IndexError(f"pair ({u}, {t}) out of range")
    return float(model.predict([u], [t])[0])


def _seen(train_set: RatingDataset):
    return (np.bincount(train_set.users, minlength=train_set.num_users) > 0,
            np.bincount(train_set.items, minlength=train_set.num_items) > 0)


def train_mf(
    train_set: RatingDataset,
    k: int = 10,
    learning_rate: float = 0.005,
    reg: float = 0.05,
    epochs: int = 100,
    seed: int = 0,
    init_scale: float = 0.1,
) -> MFModel:
    """Biased matrix factorization fit by per-rating SGD with L2 shrinkage."""
    if k < 1:
        raise ValueError(f"rank k must be >= 1, got {k}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    rng = np.random.default_rng(seed)
    mu = train_set.global_mean()
    P = rng.normal(0.0, init_scale, (train_set.num_users, k))
    Q = rng.normal(0.0, init_scale, (train_set.num_items, k))
    bu = np.zeros(train_set.num_users)
    bi = np.zeros(train_set.num_items)
    users, items = train_set.users, train_set.items
    ratings = train_set.ratings.astype(float)
    seen_u, seen_i = _seen(train_set)
    model = MFModel("mf", P, Q, mu, train_set.rating_max, bu, bi, seen_u, seen_i)

    for _ in range(epochs):
        start = time.perf_counter()
        sq = 0.0
        for row in rng.permutation(len(ratings)):
            u, i = users[row], items[row]
            pu, qi = P[u], Q[i]
            err = ratings[row] - (mu + bu[u] + bi[i] + pu @ qi)
            sq += err * err
            bu[u] += learning_rate * (err - reg * bu[u])
            bi[i] += learning_rate * (err - reg * bi[i])
            pu_old = pu.copy()
            pu += learning_rate * (err * qi - reg * pu)
            qi += learning_rate * (err * pu_old - reg * qi)
        if not np.isfinite(sq):
            raise DivergenceError("MF training diverged")
        model.losses.append(sq)
        model.epoch_seconds.append(time.perf_counter() - start)
    return model


def _nmf_objective(W, H, users, items, ratings) -> float:
    pred = np.einsum("bk,bk->b", W[users], H.T[items])
    return float(np.sum((ratings - pred) ** 2))


def train_nmf(
    train_set: RatingDataset, k: int = 10, epochs: int = 100, seed: int = 0
) -> MFModel:
    """Nonnegative factorization ``M ~ W H`` fit to observed entries only,
    using mask-weighted multiplicative updates."""
    if k < 1:
        raise ValueError(f"rank k must be >= 1, got {k}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    rng = np.random.default_rng(seed)
    users, items = train_set.users, train_set.items
    ratings = train_set.ratings.astype(float)
    shape = (train_set.num_users, train_set.num_items)
    M = sparse.csr_matrix((ratings, (users, items)), shape=shape)
    # start near the mean rating so early updates are well scaled
    scale = np.sqrt(train_set.global_mean() / k)
    W = scale * rng.uniform(0.5, 1.5, (shape[0], k))
    H = scale * rng.uniform(0.5, 1.5, (k, shape[1]))
    seen_u, seen_i = _seen(train_set)
    model = MFModel("nmf", W, H.T, train_set.global_mean(), train_set.rating_max,
                    user_seen=seen_u, item_seen=seen_i)

    def masked_product(W, H):
        vals = np.einsum("bk,bk->b", W[users], H.T[items])
        return sparse.csr_matrix((vals, (users, items)), shape=shape)

    for _ in range(epochs):
        start = time.perf_counter()
        W *= (M @ H.T) / np.maximum(masked_product(W, H) @ H.T, NMF_FLOOR)
        H *= (M.T @ W).T / np.maximum((masked_product(W, H).T @ W).T, NMF_FLOOR)
        obj = _nmf_objective(W, H, users, items, ratings)
        if not np.isfinite(obj):
            raise DivergenceError("NMF training diverged")
        model.losses.append(obj)
        model.epoch_seconds.append(time.perf_counter() - start)
    model.user_factors = W
    model.item_factors = H.T
    return model


def save_mf(path, model: MFModel, user_ids, item_ids, hyperparams: dict, extra: dict | None = None) -> None:
    arrays = {"user_factors": model.user_factors, "item_factors": model.item_factors}
    if model.user_bias is not None:
        arrays["user_bias"] = model.user_bias
        arrays["item_bias"] = model.item_bias
    extra = dict(extra or {})
    extra.update(global_mean=model.global_mean, rating_max=model.rating_max,
                 user_seen=model.user_seen.astype(int).tolist(),
                 item_seen=model.item_seen.astype(int).tolist())
    save_checkpoint(path, model.kind, hyperparams, arrays, user_ids, item_ids, extra)


def mf_from_doc(doc: dict) -> MFModel:
    kind = doc.get("model_type")
    if kind not in ("mf", "nmf"):
        raise ValueError(f"checkpoint holds a {kind!r} model, not 'mf' or 'nmf'")
    bias = "user_bias" in doc
    return MFModel(
        kind=kind,
        user_factors=np.array(doc["user_factors"], dtype=float),
        item_factors=np.array(doc["item_factors"], dtype=float),
        global_mean=float(doc["global_mean"]),
        rating_max=int(doc["rating_max"]),
        user_bias=np.array(doc["user_bias"], dtype=float) if bias else None,
        item_bias=np.array(doc["item_bias"], dtype=float) if bias else None,
        user_seen=np.array(doc["user_seen"], dtype=bool),
        item_seen=np.array(doc["item_seen"], dtype=bool),
    )
