"""SAR parameters and exact forward inference.

Every user and item holds, for each latent feature, a distribution over
categories (stored as unconstrained logits).  A rating level ``p`` receives
the score

    q_p = 1/F * sum_n sum_ij Pz[n,i] Py[n,j] tau[p,i,j,n] exp(-|Pz[n,i] - Py[n,j]| / sigma)

and the predicted rating is the mean of ``softmax(q * omega_u * omega_t)``
over levels ``1..R``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import gather_shifted, level_softmax, normalize_last, pair_weights

CHECKPOINT_VERSION = 1
# exp(1/sigma) must stay far from overflow for the factored Laplace factor
MAX_FACTORED_INV_SIGMA = 300.0


class DivergenceError(FloatingPointError):
    """Raised when parameters produce non-finite values."""


@dataclass(frozen=True)
class SarHyperparams:
    num_features: int = 10
    num_categories: int = 10
    rating_max: int = 5
    sigma: float = 1.0
    lam: float = 0.05

    def __post_init__(self):
        if self.num_features < 1:
            raise ValueError(f"num_features must be >= 1, got {self.num_features}")
        if self.num_categories < 1:
            raise ValueError(f"num_categories must be >= 1, got {self.num_categories}")
        if self.rating_max < 2:
            raise ValueError(f"rating_max must be >= 2, got {self.rating_max}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.lam >= 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")


@dataclass
class SarParams:
    user_logits: np.ndarray  # [users, F, C]
    item_logits: np.ndarray  # [items, F, C]
    tau: np.ndarray          # [R, C, C, F]
    omega_u: np.ndarray      # [users]
    omega_t: np.ndarray      # [items]

    NAMES = ("user_logits", "item_logits", "tau", "omega_u", "omega_t")

    @property
    def num_users(self) -> int:
        return self.user_logits.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_logits.shape[0]

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    def copy(self) -> "SarParams":
        return SarParams(*(t.copy() for t in self.tensors()))

    def zeros_like(self) -> "SarParams":
        return SarParams(*(np.zeros_like(t) for t in self.tensors()))

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())

    def check_shapes(self, hp: SarHyperparams) -> None:
        F, C, R = hp.num_features, hp.num_categories, hp.rating_max
        expected = {
            "user_logits": (self.num_users, F, C),
            "item_logits": (self.num_items, F, C),
            "tau": (R, C, C, F),
            "omega_u": (self.num_users,),
            "omega_t": (self.num_items,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def init_params(
    hp: SarHyperparams, num_users: int, num_items: int, rng: np.random.Generator,
    init_scale: float = 0.1,
) -> SarParams:
    F, C, R = hp.num_features, hp.num_categories, hp.rating_max
    return SarParams(
        user_logits=rng.normal(0.0, init_scale, (num_users, F, C)),
        item_logits=rng.normal(0.0, init_scale, (num_items, F, C)),
        tau=1.0 / R + rng.normal(0.0, init_scale * 0.1, (R, C, C, F)),
        omega_u=1.0 + rng.normal(0.0, init_scale, num_users),
        omega_t=1.0 + rng.normal(0.0, init_scale, num_items),
    )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _check_index(name: str, value: int, bound: int) -> None:
    if not 0 <= value < bound:
        raise IndexError(f"{name} {value} out of range [0, {bound})")


def category_dist(params: SarParams, side: str, index: int, feature: int) -> np.ndarray:
    """Category distribution of one user or item under one feature."""
    if side == "user":
        logits = params.user_logits
    elif side == "item":
        logits = params.item_logits
    else:
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")
    _check_index(side, index, logits.shape[0])
    _check_index("feature", feature, logits.shape[1])
    return softmax(logits[index, feature])


def laplace_factor(a, b, sigma: float):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return np.exp(-np.abs(np.subtract(a, b)) / sigma)


def tau_matrix(tau: np.ndarray) -> np.ndarray:
    """``tau`` rearranged to ``[F*C*C, R]`` with rows ordered (n, i, j)."""
    R = tau.shape[0]
    return tau.transpose(3, 1, 2, 0).reshape(-1, R)


@dataclass
class Forward:
    """Intermediates of a batched forward pass, kept for backpropagation."""

    pz: np.ndarray      # [B, F, C]
    py: np.ndarray      # [B, F, C]
    kernel: np.ndarray  # [B, F, C, C]  Laplace factor
    weight: np.ndarray  # [B, F, C, C]  pz_i * py_j * kernel
    scores: np.ndarray  # [B, R]
    scale: np.ndarray   # [B]  omega_u * omega_t
    probs: np.ndarray   # [B, R]  soft-max over rating levels
    pred: np.ndarray    # [B]


class Workspace:
    """Reusable buffers for batched passes of up to ``capacity`` pairs.

    Fresh multi-megabyte arrays per mini-batch cost more in page faults than
    the arithmetic; training keeps one workspace per worker.
    """

    def __init__(self, hp: SarHyperparams, capacity: int):
        F, C = hp.num_features, hp.num_categories
        self.capacity = capacity
        self.kernel = np.empty((capacity, F, C, C))
        self.weight = np.empty((capacity, F, C, C))
        self.g_weight = np.empty((capacity, F, C, C))


def _gather_softmax(logits: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # numpy reductions over a short last axis are slow; the exp stays vectorized
    out = np.empty((len(rows),) + logits.shape[1:])
    gather_shifted(logits, rows, out)
    np.exp(out, out=out)
    normalize_last(out)
    return out


def forward(
    params: SarParams, hp: SarHyperparams, users, items, ws: Workspace | None = None
) -> Forward:
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    B, F, C, R = len(users), hp.num_features, hp.num_categories, hp.rating_max
    if ws is None or ws.capacity < B:
        ws = Workspace(hp, B)
    kernel, weight = ws.kernel[:B], ws.weight[:B]
    pz = _gather_softmax(params.user_logits, users)
    py = _gather_softmax(params.item_logits, items)
    inv_sigma = 1.0 / hp.sigma
    if inv_sigma < MAX_FACTORED_INV_SIGMA:
        ez, ey = np.exp(pz * inv_sigma), np.exp(py * inv_sigma)
    else:
        ez = ey = np.empty((0, F, C))
    pair_weights(pz, py, ez, ey, inv_sigma, kernel, weight)
    scores = weight.reshape(B, -1) @ tau_matrix(params.tau) / F
    scale = params.omega_u[users] * params.omega_t[items]
    probs, pred = np.empty((B, R)), np.empty(B)
    level_softmax(scores, scale, probs, pred)
    if not np.isfinite(pred).all():
        raise DivergenceError("non-finite prediction; parameters have diverged")
    return Forward(pz, py, kernel, weight, scores, scale, probs, pred)


def preference_scores(params: SarParams, hp: SarHyperparams, u: int, t: int) -> np.ndarray:
    """Mixture score of every rating level for one (user, item) pair."""
    _check_index("user", u, params.num_users)
    _check_index("item", t, params.num_items)
    return forward(params, hp, [u], [t]).scores[0]


def expected_rating(scores: np.ndarray, scale: float, rating_max: int) -> float:
    probs = softmax(np.asarray(scores, dtype=float) * scale)
    return float(probs @ np.arange(1, rating_max + 1))


def predict_rating(params: SarParams, hp: SarHyperparams, u: int, t: int) -> float:
    _check_index("user", u, params.num_users)
    _check_index("item", t, params.num_items)
    return float(forward(params, hp, [u], [t]).pred[0])


def predict_batch(
    params: SarParams, hp: SarHyperparams, users, items, chunk: int = 4096
) -> np.ndarray:
    users = np.asarray(users)
    items = np.asarray(items)
    out = np.empty(len(users))
    ws = Workspace(hp, min(chunk, len(users)))
    for lo in range(0, len(users), chunk):
        out[lo:lo + chunk] = forward(params, hp, users[lo:lo + chunk], items[lo:lo + chunk], ws).pred
    return out


@dataclass
class SarModel:
    """Trained parameters bundled with their hyperparameters."""

    params: SarParams
    hp: SarHyperparams

    def predict(self, users, items) -> np.ndarray:
        return predict_batch(self.params, self.hp, users, items)


def joint_prob(
    params: SarParams, hp: SarHyperparams, u: int, t: int, p: int, i: int, j: int, n: int
) -> float:
    """One term of the feature/category mixture, with ``tau`` clamped at zero.

    ``p`` is a 0-based rating level index (level ``p + 1``).
    """
    C = hp.num_categories
    _check_index("rating level", p, hp.rating_max)
    _check_index("user category", i, C)
    _check_index("item category", j, C)
    a = category_dist(params, "user", u, n)[i]
    b = category_dist(params, "item", t, n)[j]
    tau = max(params.tau[p, i, j, n], 0.0)
    return float(a * b * tau * laplace_factor(a, b, hp.sigma) / hp.num_features)


def _category_marginal(
    params: SarParams, hp: SarHyperparams, kind: str, index: int, feature: int, others
) -> np.ndarray:
    others = np.asarray(others, dtype=np.int64)
    if others.size == 0:
        raise ValueError("semantic profile needs a nonempty set of co-rated entities")
    _check_index("feature", feature, hp.num_features)
    # tau summed over rating levels, clamped so every term is a probability mass
    tau_pos = np.clip(params.tau[:, :, :, feature], 0.0, None).sum(axis=0)  # [C, C]
    if kind == "user":
        _check_index("user", index, params.num_users)
        pz = softmax(params.user_logits[index, feature])[None, :]
        py = softmax(params.item_logits[others, feature])
    else:
        _check_index("item", index, params.num_items)
        pz = softmax(params.user_logits[others, feature])
        py = softmax(params.item_logits[index, feature])[None, :]
    w = pz[:, :, None] * py[:, None, :] * laplace_factor(pz[:, :, None], py[:, None, :], hp.sigma)
    joint = (w * tau_pos).sum(axis=0) / hp.num_features  # [C(z), C(y)]
    score = joint.sum(axis=1) if kind == "user" else joint.sum(axis=0)
    total = score.sum()
    if not total > 0:
        raise ValueError("all category scores are zero; tau is degenerate")
    return score / total


def user_semantic_profile(params, hp, u: int, feature: int, items) -> np.ndarray:
    """Sum-rule marginal over user categories, summed over the given items."""
    return _category_marginal(params, hp, "user", u, feature, items)


def item_semantic_profile(params, hp, t: int, feature: int, users) -> np.ndarray:
    """Sum-rule marginal over item categories, summed over the given users."""
    return _category_marginal(params, hp, "item", t, feature, users)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model_type: str,
    hyperparams: dict,
    arrays: dict[str, np.ndarray],
    user_ids,
    item_ids,
    extra: dict | None = None,
) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "model_type": model_type,
        "hyperparams": hyperparams,
        "num_users": len(user_ids),
        "num_items": len(item_ids),
        "user_ids": list(user_ids),
        "item_ids": list(item_ids),
    }
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise DivergenceError(f"refusing to save non-finite {name}")
        doc[name] = np.asarray(arr, dtype=float).tolist()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    return doc


def sar_hyperparams_dict(hp: SarHyperparams) -> dict:
    return {"F": hp.num_features, "C": hp.num_categories, "R": hp.rating_max,
            "sigma": hp.sigma, "lambda": hp.lam}


def save_sar(path, params: SarParams, hp: SarHyperparams, user_ids, item_ids, extra=None) -> None:
    params.check_shapes(hp)
    arrays = {name: getattr(params, name) for name in SarParams.NAMES}
    save_checkpoint(path, "sar", sar_hyperparams_dict(hp), arrays, user_ids, item_ids, extra)


def sar_from_doc(doc: dict) -> tuple[SarParams, SarHyperparams]:
    if doc.get("model_type", "sar") != "sar":
        raise ValueError(f"checkpoint holds a {doc['model_type']!r} model, not 'sar'")
    h = doc["hyperparams"]
    hp = SarHyperparams(h["F"], h["C"], h["R"], float(h["sigma"]), float(h["lambda"]))
    params = SarParams(*(np.array(doc[name], dtype=float) for name in SarParams.NAMES))
    params.check_shapes(hp)
    return params, hp


def load_sar(path) -> tuple[SarParams, SarHyperparams, list[str], list[str]]:
    doc = load_checkpoint(path)
    params, hp = sar_from_doc(doc)
    return params, hp, doc["user_ids"], doc["item_ids"]
