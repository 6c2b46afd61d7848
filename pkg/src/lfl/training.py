"""Initialization, SGD and batch (L-BFGS) training, cold-start heuristics, CV."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .model import (
    LabelSpace, LflModel, ModelError, apply_rule, extend_cold, new_model,
    predict_proba_batch,
)
from .objectives import (
    Objective, check_compatible, count_multiplier, object_counts, objective_value,
    value_and_gradient,
)

logger = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite objective."""


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to allocate a model, independent of its weights."""

    label_space: LabelSpace
    n_rows: int
    n_cols: int
    rank: int
    variant: str = "dyadic"
    bias: bool = True
    side_dim: int = 0
    offset: bool = False
    n_relations: int = 0
    stereotype_rank: int = 0

    @classmethod
    def for_dataset(cls, dataset, rank: int, **kw) -> "ModelSpec":
        kw.setdefault("side_dim", dataset.side_dim)
        kw.setdefault("n_relations", dataset.n_relations)
        return cls(dataset.label_space, dataset.n_rows, dataset.n_cols, rank, **kw)


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = field(default_factory=Objective)
    optimizer: str = "batch"
    epochs: int = 50
    learning_rate: float = 0.05
    lr_decay: float = 0.95
    batch_shuffle_seed: int = 0
    init_scale: float = 0.1
    init_seed: int = 0
    freeze_latent: bool = False
    convergence_tol: float = 1e-9
    max_batch_iters: int = 500
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "batch"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning rate must be finite and non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")

    @property
    def groups(self):
        return ("side",) if self.freeze_latent else None


@dataclass
class FitReport:
    trace: list
    final_objective: float
    epochs_run: int
    converged: bool
    message: str = ""
    wall_time: float = field(default=0.0, compare=False)

    def summary(self) -> dict:
        return {
            "final_objective": self.final_objective,
            "initial_objective": self.trace[0],
            "epochs_run": self.epochs_run,
            "converged": self.converged,
            "message": self.message,
            "wall_time": round(self.wall_time, 3),
        }


def init_model(spec: ModelSpec, config: TrainConfig) -> LflModel:
    """Free weights i.i.d. U[-init_scale, init_scale]; frozen entries pinned."""
    if len(spec.label_space) < 1:
        raise ModelError("zero-sized label space")
    model = new_model(
        spec.label_space, spec.n_rows, spec.n_cols, spec.rank, spec.variant, spec.bias,
        spec.side_dim, spec.offset, spec.n_relations, spec.stereotype_rank,
    )
    rng = np.random.default_rng(config.init_seed)
    for name in model.param_names():
        w = model.params[name]
        draw = rng.uniform(-config.init_scale, config.init_scale, size=w.shape)
        mask = model.free_mask(name)
        w[mask] = draw[mask]
    return model


def _checkpoint(model: LflModel, config: TrainConfig, step: int) -> None:
    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        model.save(os.path.join(config.checkpoint_dir, f"epoch_{step:04d}.json"))


def _finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite objective {where}; learning rate too large?")
    return value


def fit(model: LflModel, dataset, config: TrainConfig) -> FitReport:
    if config.optimizer == "sgd":
        return fit_sgd(model, dataset, config)
    return fit_batch(model, dataset, config)


# ---- batch optimizer ---------------------------------------------------------

def fit_batch(model: LflModel, dataset, config: TrainConfig) -> FitReport:
    """Full-gradient L-BFGS on the free parameters, in place.

    Stops when the relative objective decrease between iterations falls below
    ``convergence_tol`` or after ``max_batch_iters`` iterations. A line-search
    failure ends the run without raising; the best iterate is kept.
    """
    check_compatible(model, dataset, config.objective)
    groups = config.groups
    obj = config.objective
    start = time.perf_counter()

    def fun(x):
        model.set_free(x, groups)
        f, g = value_and_gradient(model, dataset, obj)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(x)
        return f, g.vector(groups)

    x0 = model.get_free(groups)
    f0 = _finite(objective_value(model, dataset, obj), "at initialization")
    trace = [f0]
    best = {"x": x0.copy(), "f": f0}
    state = {"stopped": False}

    def callback(intermediate_result):
        f = float(intermediate_result.fun)
        x = intermediate_result.x
        prev = trace[-1]
        trace.append(f)
        if f <= best["f"]:
            best["x"], best["f"] = x.copy(), f
        _checkpoint(model, config, len(trace) - 1)
        if prev - f <= config.convergence_tol * max(abs(prev), np.finfo(float).tiny):
            state["stopped"] = True
            raise StopIteration

    if len(x0):
        res = minimize(
            fun, x0, jac=True, method="L-BFGS-B", callback=callback,
            options={"maxiter": config.max_batch_iters, "ftol": 0.0, "gtol": 1e-10, "maxcor": 10},
        )
        message = "relative decrease below tolerance" if state["stopped"] else str(res.message)
        converged = state["stopped"] or bool(res.status == 0)
        if not converged and "ABNORMAL" in message.upper():
            logger.warning("line search failed; keeping best iterate (%s)", message)
    else:
        message, converged = "no free parameters", True
    model.set_free(best["x"], groups)
    final = _finite(objective_value(model, dataset, obj), "after batch training")
    if trace[-1] != final:
        trace.append(final)
    return FitReport(trace, final, len(trace) - 1, converged, message,
                     time.perf_counter() - start)


# ---- stochastic gradient descent ---------------------------------------------

def _dscore(s: np.ndarray, y: int, kind: str, values, base: int) -> np.ndarray:
    """dLoss/dScores for a single example (base entry zeroed)."""
    z = s - s.max()
    e = np.exp(z)
    p = e / e.sum()
    if kind == "nll":
        G = p.copy()
        G[y] -= 1.0
    else:
        R = p @ values
        resid = R - values[y]
        dR = p * (values - R)
        G = (np.sign(resid) if kind == "mae" else 2.0 * resid) * dR
    G[base] = 0.0
    return G


def fit_sgd(model: LflModel, dataset, config: TrainConfig) -> FitReport:
    """Plain SGD over a seeded shuffled example order, in place.

    Each example updates only the blocks it touches. Its share of the L2
    penalty on an object block is lam * multiplier / (object's example count),
    and lam / n on blocks shared by all examples, so one epoch applies the
    full penalty gradient once.
    """
    check_compatible(model, dataset, config.objective)
    obj = config.objective
    start = time.perf_counter()
    n = len(dataset)
    f0 = _finite(objective_value(model, dataset, obj), "at initialization")
    trace = [f0]
    if n == 0:
        return FitReport(trace, f0, 0, True, "empty dataset", time.perf_counter() - start)

    p = model.params
    v = model.variant
    base = model.base
    kind = obj.kind
    values = model.label_space.values if kind != "nll" else None
    freeze = config.freeze_latent
    lam, lam_s = obj.l2_latent, obj.l2_side

    def touch_factor(role):
        counts = object_counts(model, dataset, role)
        mult = count_multiplier(counts) if obj.count_scaled else np.ones_like(counts)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(counts > 0, lam * mult / np.maximum(counts, 1), 0.0)

    reg_row, reg_col = touch_factor("row"), touch_factor("col")
    reg_both = touch_factor("both") if v in ("symmetric-link", "directed-link") else None
    masks = {name: model.free_mask(name).astype(float) for name in p}
    if freeze:
        for name in masks:
            if name != "side":
                masks[name][...] = 0.0
    rows, cols, labels = dataset.rows, dataset.cols, dataset.labels
    side = dataset.side
    rel = dataset.relation
    g_glob = lam / n
    g_side = lam_s / n

    rng = np.random.default_rng(config.batch_shuffle_seed)
    lr = config.learning_rate
    epochs_run = 0
    for epoch in range(config.epochs):
        for i in rng.permutation(n):
            r, c, y = rows[i], cols[i], labels[i]
            x = side[i] if side is not None else None
            if v == "dyadic":
                a, b = p["row"][:, r, :].copy(), p["col"][:, c, :].copy()
                s = np.einsum("lk,lk->l", a, b)
            elif v == "stereotype":
                a, b = p["row"][:, r, :].copy(), p["col"][:, c, :].copy()
                inner = np.einsum("ik,ik->i", a, b)
                s = inner @ p["phi"]
            else:
                s = np.zeros(2)
                if v == "symmetric-link":
                    A = p["shared"]
                    ar, ac = A[r].copy(), A[c].copy()
                    s[1] = ar @ ac
                elif v == "directed-link":
                    al, be, ga = p["alpha"][r].copy(), p["beta"][c].copy(), p["gamma"]
                    gr, gc = ga[r].copy(), ga[c].copy()
                    s[1] = al @ be + gr @ gc
                else:
                    t = rel[i]
                    al, be, sc = p["alpha"][r].copy(), p["beta"][c].copy(), p["scale"][t].copy()
                    s[1] = np.sum(al * sc * be)
            if x is not None and "side" in p:
                s = s + p["side"] @ x
            if "offset" in p:
                s = s + p["offset"]
            s[base] = 0.0
            G = _dscore(s, y, kind, values, base)

            if v == "dyadic":
                p["row"][:, r, :] -= lr * (G[:, None] * b + reg_row[r] * a) * masks["row"][:, r, :]
                p["col"][:, c, :] -= lr * (G[:, None] * a + reg_col[c] * b) * masks["col"][:, c, :]
            elif v == "stereotype":
                phi = p["phi"]
                h = phi @ G
                p["row"][:, r, :] -= lr * (h[:, None] * b + reg_row[r] * a) * masks["row"][:, r, :]
                p["col"][:, c, :] -= lr * (h[:, None] * a + reg_col[c] * b) * masks["col"][:, c, :]
                phi -= lr * (np.outer(inner, G) + g_glob * phi) * masks["phi"]
            elif v == "symmetric-link":
                g1 = G[1]
                m = masks["shared"][r]
                A[r] -= lr * (g1 * ac + reg_both[r] * ar) * m
                A[c] -= lr * (g1 * ar + reg_both[c] * ac) * m
            elif v == "directed-link":
                g1 = G[1]
                p["alpha"][r] -= lr * (g1 * be + reg_row[r] * al) * masks["alpha"][r]
                p["beta"][c] -= lr * (g1 * al + reg_col[c] * be) * masks["beta"][c]
                ga[r] -= lr * (g1 * gc + reg_both[r] * gr) * masks["gamma"][r]
                ga[c] -= lr * (g1 * gr + reg_both[c] * gc) * masks["gamma"][c]
            else:
                g1 = G[1]
                p["alpha"][r] -= lr * (g1 * sc * be + reg_row[r] * al) * masks["alpha"][r]
                p["beta"][c] -= lr * (g1 * sc * al + reg_col[c] * be) * masks["beta"][c]
                p["scale"][t] -= lr * (g1 * al * be + g_glob * sc) * masks["scale"][t]
            if x is not None and "side" in p:
                p["side"] -= lr * (np.outer(G, x) + g_side * p["side"]) * masks["side"]
            if "offset" in p:
                p["offset"] -= lr * (G + g_glob * p["offset"]) * masks["offset"]
        epochs_run += 1
        f = _finite(objective_value(model, dataset, obj), f"after epoch {epoch + 1}")
        trace.append(f)
        _checkpoint(model, config, epoch + 1)
        lr *= config.lr_decay
    return FitReport(trace, trace[-1], epochs_run, True, "completed all epochs",
                     time.perf_counter() - start)


# ---- cold start ----------------------------------------------------------------

def fit_coldstart(spec: ModelSpec, dataset, config: TrainConfig):
    """Two-stage block-coordinate training with side information.

    Stage 1 fits a latent-only model. Stage 2 copies its latent weights,
    freezes them, adds zero-initialized side weights and fits only those.
    Returns ``(stage2_model, (stage1_report, stage2_report))``.
    """
    if dataset.side is None:
        raise ModelError("cold-start training needs side features")
    latent_spec = replace(spec, side_dim=0)
    stage1 = init_model(latent_spec, config)
    report1 = fit(stage1, dataset.without_side(), replace(config, freeze_latent=False))
    model = new_model(
        spec.label_space, spec.n_rows, spec.n_cols, spec.rank, spec.variant, spec.bias,
        dataset.side_dim, spec.offset, spec.n_relations, spec.stereotype_rank,
    )
    for name, w in stage1.params.items():
        model.params[name] = w.copy()
    report2 = fit(model, dataset, replace(config, freeze_latent=True))
    return model, (report1, report2)


def coldstart_fallback_batch(model: LflModel, train, rows, cols, side=None) -> np.ndarray:
    """Mean-rule predictions with a mean fallback for objects absent from ``train``.

    Unseen row, seen column: average prediction over the column's training
    dyads. Seen row, unseen column: the symmetric average over the row's
    dyads. Both unseen: mean prediction over the whole training set.
    """
    if model.label_space.kind != "ordinal":
        raise ModelError("cold-start fallback needs an ordinal label space")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    tr_side = train.side if model.side_dim else None
    F = apply_rule(predict_proba_batch(model, train.rows, train.cols, tr_side, train.relation),
                   model.label_space, "mean")
    row_n = np.bincount(train.rows, minlength=max(train.n_rows, rows.max(initial=0) + 1))
    col_n = np.bincount(train.cols, minlength=max(train.n_cols, cols.max(initial=0) + 1))
    row_sum = np.bincount(train.rows, weights=F, minlength=len(row_n))
    col_sum = np.bincount(train.cols, weights=F, minlength=len(col_n))
    global_mean = float(F.mean())
    row_seen = (rows < model.n_rows) & (row_n[rows] > 0)
    col_seen = (cols < model.n_cols) & (col_n[cols] > 0)
    out = np.full(len(rows), global_mean)
    both = row_seen & col_seen
    if both.any():
        s = None if side is None else np.asarray(side)[both]
        out[both] = apply_rule(predict_proba_batch(model, rows[both], cols[both], s),
                               model.label_space, "mean")
    m = ~row_seen & col_seen
    out[m] = col_sum[cols[m]] / col_n[cols[m]]
    m = row_seen & ~col_seen
    out[m] = row_sum[rows[m]] / row_n[rows[m]]
    return out


def predict_coldstart_fallback(model: LflModel, train, dyad) -> float:
    side = None if dyad.side is None else np.asarray(dyad.side, dtype=float)[None, :]
    return float(coldstart_fallback_batch(model, train, [dyad.row], [dyad.col], side)[0])


def predict_with_cold_weights(model: LflModel, train, rows, cols, side=None, rule="mean"):
    """Predict with a side-info model, giving unseen objects cold latent weights."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    n_rows = max(model.n_rows, rows.max(initial=-1) + 1)
    n_cols = max(model.n_cols, cols.max(initial=-1) + 1)
    unseen_r = np.flatnonzero(object_counts(model, train, "row") == 0)
    unseen_c = np.flatnonzero(object_counts(model, train, "col") == 0)
    warm = extend_cold(model, n_rows, n_cols, unseen_r, unseen_c)
    probs = predict_proba_batch(warm, rows, cols, side)
    return apply_rule(probs, model.label_space, rule)


# ---- cross-validation ------------------------------------------------------------

def heldout_loss(model: LflModel, dataset, kind: str) -> float:
    """Mean per-example data loss (no penalty) on ``dataset``."""
    probs = predict_proba_batch(model, dataset.rows, dataset.cols,
                                dataset.side if model.side_dim else None, dataset.relation)
    if kind == "nll":
        return float(-np.mean(np.log(np.maximum(probs[np.arange(len(dataset)), dataset.labels], 1e-300))))
    R = probs @ model.label_space.values
    resid = R - dataset.label_values()
    return float(np.mean(np.abs(resid)) if kind == "mae" else np.mean(resid ** 2))


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Round-robin fold ids over a seeded shuffle of the example order."""
    if folds < 2:
        raise ValueError("need at least two folds")
    order = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.intp)
    fold[order] = np.arange(n) % folds
    return fold


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LFL_THREADS", "1")))
    except ValueError:
        return 1


def cross_validate(spec: ModelSpec, dataset, config: TrainConfig, grid: Sequence[float],
                   folds: int = 3, seed: int = 0):
    """Mean held-out loss per latent L2 strength; returns [(lam, score), ...]."""
    fold = fold_assignment(len(dataset), folds, seed)
    jobs = [(lam, k) for lam in grid for k in range(folds)]

    def run(job):
        lam, k = job
        cfg = replace(config, objective=replace(config.objective, l2_latent=float(lam)))
        train = dataset.subset(np.flatnonzero(fold != k))
        test = dataset.subset(np.flatnonzero(fold == k))
        model = init_model(spec, cfg)
        fit(model, train, cfg)
        return heldout_loss(model, test, cfg.objective.kind)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        scores = list(pool.map(run, jobs))
    out = []
    for i, lam in enumerate(grid):
        out.append((float(lam), float(np.mean(scores[i * folds:(i + 1) * folds]))))
    return out
