"""Dyadic datasets: loading, saving, splitting and synthetic generators."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .model import LabelSpace, softmax, sigmoid


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class DyadDataset:
    """Observed (row, col, label) triples over dense object indices."""

    label_space: LabelSpace
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    side: Optional[np.ndarray] = None
    relation: Optional[np.ndarray] = None
    n_relations: int = 0
    row_ids: Optional[list] = None
    col_ids: Optional[list] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.intp).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.intp).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        n = len(self.rows)
        if len(self.cols) != n or len(self.labels) != n:
            raise DataError("rows, cols and labels must have equal length")
        if n:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise DataError("row id out of bounds")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise DataError("column id out of bounds")
            if self.labels.min() < 0 or self.labels.max() >= len(self.label_space):
                raise DataError("label index out of bounds")
        if self.side is not None:
            side = np.asarray(self.side, dtype=float)
            self.side = side.reshape(n, side.shape[-1] if side.ndim > 1 else -1)
        if self.relation is not None:
            self.relation = np.asarray(self.relation, dtype=np.intp).reshape(-1)
            if len(self.relation) != n:
                raise DataError("relation array length mismatch")
            if n and (self.relation.min() < 0 or self.relation.max() >= self.n_relations):
                raise DataError("relation index out of bounds")

    def __len__(self):
        return len(self.rows)

    @property
    def side_dim(self) -> int:
        return 0 if self.side is None else self.side.shape[1]

    @cached_property
    def row_obs_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows)

    @cached_property
    def col_obs_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols)

    @cached_property
    def row_incidence(self) -> sp.csr_matrix:
        """Sparse (n_rows, n) 0/1 matrix; ``row_incidence @ X`` sums X per row."""
        n = len(self)
        return sp.csr_matrix((np.ones(n), (self.rows, np.arange(n))), shape=(self.n_rows, n))

    @cached_property
    def col_incidence(self) -> sp.csr_matrix:
        n = len(self)
        return sp.csr_matrix((np.ones(n), (self.cols, np.arange(n))), shape=(self.n_cols, n))

    def subset(self, idx) -> "DyadDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return DyadDataset(
            self.label_space, self.n_rows, self.n_cols,
            self.rows[idx], self.cols[idx], self.labels[idx],
            None if self.side is None else self.side[idx],
            None if self.relation is None else self.relation[idx],
            self.n_relations, self.row_ids, self.col_ids,
        )

    def without_side(self) -> "DyadDataset":
        out = self.subset(np.arange(len(self)))
        out.side = None
        return out

    def label_values(self) -> np.ndarray:
        return self.label_space.values[self.labels]


# ---- triplet files -------------------------------------------------------

def _split_fields(line: str):
    delim = "\t" if "\t" in line else ","
    return [f.strip() for f in next(csv.reader([line], delimiter=delim))]


def _parse_label(raw: str):
    try:
        v = float(raw)
    except ValueError:
        return raw
    return int(v) if v.is_integer() else v


def load_triplets(
    path,
    label_space: Optional[LabelSpace] = None,
    kind: str = "ordinal",
    row_index: Optional[dict] = None,
    col_index: Optional[dict] = None,
    allow_empty: bool = False,
) -> DyadDataset:
    """Parse ``row, col, label[, side...]`` lines (tab or comma separated).

    String ids are interned to dense indices in first-appearance order,
    continuing from ``row_index`` / ``col_index`` when given (useful for
    loading a test split against a training vocabulary). Without a declared
    ``label_space`` labels are inferred as the sorted unique values.
    """
    row_index = dict(row_index or {})
    col_index = dict(col_index or {})
    rows, cols, raw_labels, side = [], [], [], []
    side_dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = _split_fields(line)
            if len(fields) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 fields, got {len(fields)}")
            r, c, lab = fields[:3]
            try:
                feats = [float(f) for f in fields[3:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric side feature") from None
            if side_dim is None:
                side_dim = len(feats)
            elif len(feats) != side_dim:
                raise DataError(
                    f"{path}:{lineno}: inconsistent side dimension {len(feats)} (expected {side_dim})"
                )
            rows.append(row_index.setdefault(r, len(row_index)))
            cols.append(col_index.setdefault(c, len(col_index)))
            raw_labels.append(_parse_label(lab))
            side.append(feats)
    if not rows and not allow_empty:
        raise DataError("empty dataset")
    if label_space is None:
        uniq = sorted(set(raw_labels), key=lambda v: (isinstance(v, str), v))
        if len(uniq) < 2:
            raise DataError("cannot infer a label space from fewer than two distinct labels")
        if kind == "ordinal" and all(not isinstance(v, str) for v in uniq):
            label_space = LabelSpace.ordinal(uniq)
        else:
            label_space = LabelSpace(uniq, "nominal")
    lookup = {_label_key(v): i for i, v in enumerate(label_space.labels)}
    labels = []
    for v in raw_labels:
        try:
            labels.append(lookup[_label_key(v)])
        except KeyError:
            raise DataError(f"unknown label {v!r} under the declared label list") from None
    return DyadDataset(
        label_space,
        max(len(row_index), 1),
        max(len(col_index), 1),
        np.asarray(rows, dtype=np.intp),
        np.asarray(cols, dtype=np.intp),
        np.asarray(labels, dtype=np.intp),
        side=np.asarray(side, dtype=float) if side_dim else None,
        row_ids=list(row_index),
        col_ids=list(col_index),
    )


def _label_key(v):
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            return v
    return float(v)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def save_triplets(dataset: DyadDataset, path) -> None:
    row_ids = dataset.row_ids or [str(i) for i in range(dataset.n_rows)]
    col_ids = dataset.col_ids or [str(i) for i in range(dataset.n_cols)]
    labels = dataset.label_space.labels
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            fields = [str(row_ids[dataset.rows[i]]), str(col_ids[dataset.cols[i]]),
                      _fmt(labels[dataset.labels[i]])]
            if dataset.side is not None:
                fields += ["%.17g" % v for v in dataset.side[i]]
            fh.write("\t".join(fields) + "\n")


def load_side_table(path):
    """Per-object features under ``ROW`` / ``COL`` header lines.

    Returns ``(row_features, col_features)`` as dicts id -> vector.
    """
    tables = {"ROW": {}, "COL": {}}
    current = None
    dims = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.upper() in tables:
                current = line.upper()
                continue
            if current is None:
                raise DataError(f"{path}:{lineno}: feature line before ROW/COL header")
            fields = _split_fields(line)
            try:
                vec = np.asarray([float(f) for f in fields[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature") from None
            if dims.setdefault(current, len(vec)) != len(vec):
                raise DataError(f"{path}:{lineno}: inconsistent feature dimension")
            tables[current][fields[0]] = vec
    return tables["ROW"], tables["COL"]


def save_side_table(row_features: dict, col_features: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for header, table in (("ROW", row_features), ("COL", col_features)):
            fh.write(header + "\n")
            for key, vec in table.items():
                fh.write("\t".join([str(key)] + ["%.17g" % v for v in vec]) + "\n")


def attach_side(dataset: DyadDataset, row_features: dict, col_features: dict) -> DyadDataset:
    """Per-dyad side vector = row object's features ++ column object's features."""
    if dataset.row_ids is None or dataset.col_ids is None:
        raise DataError("dataset has no id vocabulary to join features on")
    try:
        rf = np.stack([row_features[dataset.row_ids[r]] for r in dataset.rows]) if row_features else None
        cf = np.stack([col_features[dataset.col_ids[c]] for c in dataset.cols]) if col_features else None
    except KeyError as exc:
        raise DataError(f"missing side features for object {exc.args[0]!r}") from None
    parts = [p for p in (rf, cf) if p is not None]
    if not parts:
        raise DataError("side table is empty")
    out = dataset.subset(np.arange(len(dataset)))
    out.side = np.concatenate(parts, axis=1) if len(dataset) else np.zeros((0, sum(p.shape[1] for p in parts)))
    return out


# ---- splitting -----------------------------------------------------------

def split(dataset: DyadDataset, scheme: str, seed: int = 0, fraction: float = 0.2,
          holdout: int = 1, rows=None, n_select: Optional[int] = None):
    """Partition ``dataset`` into (train, test).

    Schemes:
      ``random``         exactly ``round(fraction * n)`` random examples go to test;
      ``per-row``        each selected row (all eligible rows, or ``n_select`` of
                         them) sends ``holdout`` random examples to test;
      ``coldstart``      every example of the given ``rows`` goes to test.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset)
    test_mask = np.zeros(n, dtype=bool)
    if scheme == "random":
        if not 0.0 <= fraction <= 1.0:
            raise DataError("fraction must lie in [0, 1]")
        n_test = int(round(fraction * n))
        test_mask[rng.permutation(n)[:n_test]] = True
    elif scheme == "per-row":
        counts = dataset.row_obs_counts
        eligible = np.flatnonzero(counts > holdout)
        if n_select is None:
            chosen = eligible
        else:
            if n_select > len(eligible):
                raise DataError(
                    f"per-row holdout infeasible: {n_select} rows requested, "
                    f"{len(eligible)} have more than {holdout} examples"
                )
            chosen = np.sort(rng.choice(eligible, size=n_select, replace=False))
        if len(chosen) == 0:
            raise DataError("per-row holdout infeasible: no row has enough examples")
        order = np.argsort(dataset.rows, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)])
        for r in chosen:
            members = order[starts[r]:starts[r + 1]]
            test_mask[rng.choice(members, size=holdout, replace=False)] = True
    elif scheme == "coldstart":
        if rows is None:
            raise DataError("coldstart split needs a set of rows")
        rows = np.asarray(sorted(set(int(r) for r in rows)), dtype=np.intp)
        if len(rows) and (rows.min() < 0 or rows.max() >= dataset.n_rows):
            raise DataError("coldstart row out of bounds")
        test_mask = np.isin(dataset.rows, rows)
    else:
        raise DataError(f"unknown split scheme {scheme!r}")
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))


# ---- synthetic generators --------------------------------------------------

@dataclass
class SyntheticTruth:
    true_alpha: np.ndarray
    true_beta: np.ndarray
    heldout: list
    mean_bayes_error: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "format": "lfl-truth",
            "mean_bayes_error": self.mean_bayes_error,
            "heldout": [list(h) for h in self.heldout],
            "true_alpha": self.true_alpha.tolist(),
            "true_beta": self.true_beta.tolist(),
        }, indent=1) + "\n"


def _sample_categorical(rng, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` via inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None]
    return np.minimum((u > cdf).sum(axis=1), probs.shape[1] - 1)


def _retained(rng, n_cells: int, retention: float, exact: bool) -> np.ndarray:
    if exact:
        keep = np.zeros(n_cells, dtype=bool)
        keep[rng.permutation(n_cells)[: int(round(retention * n_cells))]] = True
        return keep
    return rng.random(n_cells) < retention


def synth_nominal(n: int, k: int, num_labels: int = 3, retention: float = 0.8,
                  weight_range=(-3.0, 3.0), seed: int = 0, exact: bool = True,
                  zero_base: bool = True):
    """Square nominal matrix sampled from p(y|r,c) ~ exp(row[y,r] . col[y,c]).

    Weight blocks are drawn uniformly from ``weight_range``. With
    ``zero_base`` (the default) the base label's block is zero, so the truth
    is exactly representable by a rank-k model; ``zero_base=False`` draws all
    blocks, whose log-odds then have rank up to 2k. Returns
    ``(train, test, truth)``.
    Labels are 1..num_labels, base = last.
    """
    if n < 2 or k < 1 or num_labels < 2:
        raise DataError("synth_nominal needs n >= 2, k >= 1, num_labels >= 2")
    if not 0.0 < retention < 1.0:
        raise DataError("retention must lie in (0, 1)")
    lo, hi = weight_range
    if hi < lo:
        raise DataError("degenerate weight range")
    rng = np.random.default_rng(seed)
    labels = LabelSpace(list(range(1, num_labels + 1)), "nominal", list(range(1, num_labels + 1)))
    base = labels.base_index
    true_row = rng.uniform(lo, hi, size=(num_labels, n, k))
    true_col = rng.uniform(lo, hi, size=(num_labels, n, k))
    if zero_base:
        true_row[base] = true_col[base] = 0.0
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    probs = softmax(np.einsum("lnk,lnk->nl", true_row[:, rr], true_col[:, cc]))
    sampled = _sample_categorical(rng, probs)
    keep = _retained(rng, n * n, retention, exact)
    bayes = np.argmax(probs, axis=1)
    bayes_err = 1.0 - probs.max(axis=1)
    train = DyadDataset(labels, n, n, rr[keep], cc[keep], sampled[keep])
    test = DyadDataset(labels, n, n, rr[~keep], cc[~keep], sampled[~keep])
    heldout = [
        (int(r), int(c), int(y), int(b), float(pb))
        for r, c, y, b, pb in zip(rr[~keep], cc[~keep], sampled[~keep], bayes[~keep],
                                  probs.max(axis=1)[~keep])
    ]
    truth = SyntheticTruth(true_row, true_col, heldout,
                           float(bayes_err.mean()), extra={"probs": probs})
    return train, test, truth


def synth_link_graph(n: int, k: int, symmetric: bool = True, seed: int = 0,
                     weight_range=(-1.5, 1.5), test_fraction: float = 0.2):
    """Binary graph sampled from sigma(aa^T) (or sigma(ab^T + gg^T) when directed).

    Symmetric graphs sample each unordered pair r < c once and mirror; the
    train/test datasets then hold each pair once with r < c. Directed graphs
    sample every ordered pair r != c. Returns ``(train, test, truth)`` where
    ``truth.extra["adjacency"]`` is the full sampled matrix.
    """
    if n < 2 or k < 1:
        raise DataError("synth_link_graph needs n >= 2 and k >= 1")
    lo, hi = weight_range
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(lo, hi, size=(n, k))
    if symmetric:
        beta = alpha
        logits = alpha @ alpha.T
        rr, cc = np.triu_indices(n, k=1)
    else:
        beta = rng.uniform(lo, hi, size=(n, k))
        gamma = rng.uniform(lo, hi, size=(n, k))
        logits = alpha @ beta.T + gamma @ gamma.T
        rr, cc = np.nonzero(~np.eye(n, dtype=bool))
    P = sigmoid(logits)
    edges = (rng.random(len(rr)) < P[rr, cc]).astype(np.intp)
    adj = np.zeros((n, n), dtype=np.intp)
    adj[rr, cc] = edges
    if symmetric:
        adj[cc, rr] = edges
    n_test = int(round(test_fraction * len(rr)))
    perm = rng.permutation(len(rr))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    labels = LabelSpace.binary()
    train = DyadDataset(labels, n, n, rr[train_idx], cc[train_idx], edges[train_idx])
    test = DyadDataset(labels, n, n, rr[test_idx], cc[test_idx], edges[test_idx])
    heldout = [(int(rr[i]), int(cc[i]), int(edges[i]), int(P[rr[i], cc[i]] > 0.5),
                float(max(P[rr[i], cc[i]], 1 - P[rr[i], cc[i]]))) for i in test_idx]
    truth = SyntheticTruth(alpha, beta, heldout, float(np.mean(1 - np.maximum(P, 1 - P)[rr, cc])),
                           extra={"adjacency": adj, "probs": P})
    return train, test, truth


def synth_coldstart(n: int = 120, k: int = 3, n_features: int = 4, retention: float = 0.3,
                    coldstart_fraction: float = 0.1, latent_range=(-1.0, 1.0),
                    side_scale: float = 1.5, seed: int = 0):
    """Ordinal 1..5 ratings whose log-odds mix a low-rank term with object features.

    Generating scores: ``row[y,r] . col[y,c] + w_row[y] . u_r + w_col[y] . v_c``
    with per-object features ``u``, ``v`` drawn standard normal. A random
    ``coldstart_fraction`` of rows is removed from training entirely; the test
    set holds all observed cells of those rows. Returns
    ``(train, test, row_features, col_features, coldstart_rows)`` with feature
    tables keyed by the dataset's string ids.
    """
    rng = np.random.default_rng(seed)
    labels = LabelSpace.ordinal([1, 2, 3, 4, 5])
    L, base = len(labels), labels.base_index
    u = rng.standard_normal((n, n_features))
    v = rng.standard_normal((n, n_features))
    w_row = rng.normal(scale=side_scale, size=(L, n_features))
    w_col = rng.normal(scale=side_scale, size=(L, n_features))
    w_row[base] = w_col[base] = 0.0
    a = rng.uniform(*latent_range, size=(L, n, k))
    b = rng.uniform(*latent_range, size=(L, n, k))
    a[base] = b[base] = 0.0
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    scores = np.einsum("lnk,lnk->nl", a[:, rr], b[:, cc]) + u[rr] @ w_row.T + v[cc] @ w_col.T
    y = _sample_categorical(rng, softmax(scores))
    observed = rng.random(n * n) < retention
    n_cold = max(1, int(round(coldstart_fraction * n)))
    cold = np.sort(rng.choice(n, size=n_cold, replace=False))
    is_cold = np.isin(rr, cold)
    row_ids = [f"r{i}" for i in range(n)]
    col_ids = [f"c{i}" for i in range(n)]

    def make(mask):
        return DyadDataset(labels, n, n, rr[mask], cc[mask], y[mask],
                           row_ids=row_ids, col_ids=col_ids)

    train = make(observed & ~is_cold)
    test = make(observed & is_cold)
    row_features = {row_ids[i]: u[i] for i in range(n)}
    col_features = {col_ids[i]: v[i] for i in range(n)}
    return train, test, row_features, col_features, cold


def bayes_error_from_probs(probs: np.ndarray) -> float:
    """Mean of 1 - max_y p(y | cell) over the given cells."""
    probs = np.atleast_2d(probs)
    return float(np.mean(1.0 - probs.max(axis=1)))
