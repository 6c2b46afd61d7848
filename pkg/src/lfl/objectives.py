"""Training objectives (CLL, MAE, MSE), L2 penalties and analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .model import LflModel, ModelError, compute_scores, log_softmax, object_axis, object_role

OBJECTIVES = ("nll", "mae", "mse")


@dataclass(frozen=True)
class Objective:
    kind: str = "nll"
    l2_latent: float = 0.0
    l2_side: float = 0.0
    count_scaled: bool = False

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}")
        for lam in (self.l2_latent, self.l2_side):
            if not (math.isfinite(lam) and lam >= 0):
                raise ValueError("regularization strengths must be finite and non-negative")

    def strength(self, name: str) -> float:
        return self.l2_side if name == "side" else self.l2_latent


@dataclass
class GradientSet:
    """Gradient blocks laid out like ``model.params``.

    Entries at frozen positions are kept at zero in ``arrays`` but excluded
    from :meth:`vector`, which is what optimizers consume.
    """

    model: LflModel
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def vector(self, groups: Optional[Sequence[str]] = None) -> np.ndarray:
        names = self.model.param_names(groups)
        parts = [self.arrays[n][self.model.free_mask(n)] for n in names]
        return np.concatenate(parts) if parts else np.zeros(0)


def check_compatible(model: LflModel, dataset, objective: Objective) -> None:
    if objective.kind in ("mae", "mse"):
        ls = model.label_space
        if ls.kind != "ordinal" or ls.numeric_values is None:
            raise ModelError(f"objective {objective.kind!r} requires an ordinal label space")
    if len(dataset.label_space) != model.n_labels:
        raise ModelError("dataset and model label spaces differ in size")
    if model.side_dim and dataset.side is None:
        raise ModelError("model has side weights but the dataset has no side features")


def count_multiplier(counts: np.ndarray) -> np.ndarray:
    """Per-object penalty multiplier 1/sqrt(count); 1 for unseen objects."""
    counts = np.asarray(counts, dtype=float)
    out = np.ones_like(counts)
    seen = counts > 0
    out[seen] = 1.0 / np.sqrt(counts[seen])
    return out


def object_counts(model: LflModel, dataset, role: str) -> np.ndarray:
    rc = np.zeros(model.n_rows)
    cc = np.zeros(model.n_cols)
    rc[: dataset.n_rows] = dataset.row_obs_counts[: model.n_rows]
    cc[: dataset.n_cols] = dataset.col_obs_counts[: model.n_cols]
    if role == "row":
        return rc
    if role == "col":
        return cc
    if model.n_rows != model.n_cols:
        raise ModelError("shared object blocks need a square object set")
    return rc + cc


def penalty_multipliers(model: LflModel, dataset, objective: Objective) -> dict:
    """Per-block arrays (broadcastable to each block) scaling the L2 penalty."""
    out = {}
    for name, w in model.params.items():
        role = object_role(name)
        if not objective.count_scaled or role is None:
            out[name] = 1.0
            continue
        m = count_multiplier(object_counts(model, dataset, role))
        shape = [1] * w.ndim
        shape[object_axis(name)] = len(m)
        out[name] = m.reshape(shape)
    return out


def _score_gradient(model: LflModel, dataset, objective: Objective, S: np.ndarray):
    """Data loss and dLoss/dScores (n, L) with the base column zeroed."""
    y = dataset.labels
    n = len(y)
    logp = log_softmax(S)
    p = np.exp(logp)
    if objective.kind == "nll":
        loss = -logp[np.arange(n), y].sum()
        G = p
        G[np.arange(n), y] -= 1.0
    else:
        v = model.label_space.values
        R = p @ v
        resid = R - v[y]
        dR = p * (v[None, :] - R[:, None])
        if objective.kind == "mae":
            loss = np.abs(resid).sum()
            G = np.sign(resid)[:, None] * dR
        else:
            loss = (resid ** 2).sum()
            G = 2.0 * resid[:, None] * dR
    G[:, model.base] = 0.0
    return float(loss), G


def _chain(model: LflModel, dataset, G: np.ndarray) -> dict:
    """Propagate dLoss/dScores to every parameter block (dense, unmasked)."""
    p = model.params
    rows, cols = dataset.rows, dataset.cols
    Rinc, Cinc = dataset.row_incidence, dataset.col_incidence
    if dataset.n_rows != model.n_rows:
        Rinc = _resize(Rinc, model.n_rows)
    if dataset.n_cols != model.n_cols:
        Cinc = _resize(Cinc, model.n_cols)
    g = {}
    v = model.variant
    if v == "dyadic":
        g["row"] = np.zeros_like(p["row"])
        g["col"] = np.zeros_like(p["col"])
        for y in range(model.n_labels):
            if y == model.base:
                continue
            gy = G[:, y, None]
            g["row"][y] = Rinc @ (gy * p["col"][y][cols])
            g["col"][y] = Cinc @ (gy * p["row"][y][rows])
    elif v == "stereotype":
        g["row"] = np.zeros_like(p["row"])
        g["col"] = np.zeros_like(p["col"])
        inner = np.empty((len(rows), model.stereotype_rank))
        for i in range(model.stereotype_rank):
            a, b = p["row"][i][rows], p["col"][i][cols]
            inner[:, i] = np.einsum("nk,nk->n", a, b)
            h = (G @ p["phi"][i])[:, None]
            g["row"][i] = Rinc @ (h * b)
            g["col"][i] = Cinc @ (h * a)
        g["phi"] = inner.T @ G
    else:
        g1 = G[:, 1, None]
        if v == "symmetric-link":
            A = p["shared"]
            g["shared"] = Rinc @ (g1 * A[cols]) + Cinc @ (g1 * A[rows])
        elif v == "directed-link":
            al, be, ga = p["alpha"], p["beta"], p["gamma"]
            g["alpha"] = Rinc @ (g1 * be[cols])
            g["beta"] = Cinc @ (g1 * al[rows])
            g["gamma"] = Rinc @ (g1 * ga[cols]) + Cinc @ (g1 * ga[rows])
        elif v == "multi-relational":
            t = dataset.relation
            al, be, sc = p["alpha"], p["beta"], p["scale"]
            g["alpha"] = Rinc @ (g1 * sc[t] * be[cols])
            g["beta"] = Cinc @ (g1 * sc[t] * al[rows])
            Tinc = sp.csr_matrix((np.ones(len(t)), (t, np.arange(len(t)))),
                                 shape=(model.n_relations, len(t)))
            g["scale"] = Tinc @ (g1 * al[rows] * be[cols])
    if "side" in p:
        g["side"] = G.T @ dataset.side
    if "offset" in p:
        g["offset"] = G.sum(axis=0)
    return {k: np.asarray(val) for k, val in g.items()}


def _resize(inc: sp.csr_matrix, n_obj: int) -> sp.csr_matrix:
    inc = inc.tocsr()
    if inc.shape[0] > n_obj:
        # scores were bounds-checked, so the dropped rows are empty
        return inc[:n_obj]
    return sp.vstack([inc, sp.csr_matrix((n_obj - inc.shape[0], inc.shape[1]))]).tocsr()


def _dataset_scores(model, dataset):
    return compute_scores(model, dataset.rows, dataset.cols, dataset.side, dataset.relation)


def value_and_gradient(model: LflModel, dataset, objective: Objective, with_grad: bool = True):
    """Objective value and (optionally) the GradientSet in one pass."""
    check_compatible(model, dataset, objective)
    if len(dataset):
        S = _dataset_scores(model, dataset)
        loss, G = _score_gradient(model, dataset, objective, S)
    else:
        loss, G = 0.0, None
    mult = penalty_multipliers(model, dataset, objective)
    penalty = 0.0
    grads = {}
    if with_grad:
        if G is not None:
            grads = _chain(model, dataset, G)
        else:
            grads = {n: np.zeros_like(w) for n, w in model.params.items()}
    for name, w in model.params.items():
        mask = model.free_mask(name)
        lam = objective.strength(name)
        scaled = lam * mult[name] * w * mask
        penalty += 0.5 * float(np.sum(scaled * w))
        if with_grad:
            grads[name] = (grads[name] + scaled) * mask
    total = loss + penalty
    return total, (GradientSet(model, grads) if with_grad else None)


def objective_value(model: LflModel, dataset, objective: Objective) -> float:
    """Regularized loss: (lam/2)|w_free|^2 plus the summed data loss.

    An empty dataset is allowed and yields the bare penalty.
    """
    return value_and_gradient(model, dataset, objective, with_grad=False)[0]


def gradient(model: LflModel, dataset, objective: Objective) -> GradientSet:
    return value_and_gradient(model, dataset, objective)[1]


def finite_difference_oracle(model: LflModel, dataset, objective: Objective,
                             h: float = 1e-5) -> GradientSet:
    """Central-difference gradient of :func:`objective_value` per free parameter."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    work = model.copy()
    grads = {}
    for name, w in work.params.items():
        g = np.zeros_like(w)
        mask = work.free_mask(name)
        for idx in zip(*np.nonzero(mask)):
            orig = w[idx]
            w[idx] = orig + h
            fp = objective_value(work, dataset, objective)
            w[idx] = orig - h
            fm = objective_value(work, dataset, objective)
            w[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads[name] = g
    return GradientSet(model, grads)


def central_difference(f, x: float, h: float = 1e-5) -> float:
    """Scalar central difference; the same stencil the oracle applies per entry."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    return (f(x + h) - f(x - h)) / (2 * h)


def gradient_deviation(analytic: GradientSet, numeric: GradientSet):
    """(max absolute, max relative) deviation over free parameters."""
    a, b = analytic.vector(), numeric.vector()
    if len(a) == 0:
        return 0.0, 0.0
    diff = np.abs(a - b)
    rel = diff / np.maximum(np.abs(a), 1e-12)
    return float(diff.max()), float(rel.max())


def gradient_agrees(analytic: GradientSet, numeric: GradientSet,
                    rtol: float = 1e-4, atol: float = 1e-6) -> bool:
    a, b = analytic.vector(), numeric.vector()
    return bool(np.all(np.abs(a - b) <= rtol * np.abs(a) + atol))
