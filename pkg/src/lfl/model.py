"""Latent feature log-linear (LFL) parameterization and forward computations.

Every variant reduces to a table of per-label scores; probabilities are the
softmax of that table with the base label's score pinned at zero.

Parameter blocks by variant (``K`` = stored factors, ``k + 2`` with bias):

* ``dyadic``           row (L, R, K), col (L, C, K)
* ``symmetric-link``   shared (N, K)
* ``directed-link``    alpha (N, K), beta (N, K), gamma (N, K)
* ``multi-relational`` alpha (R, K), beta (C, K), scale (T, K)
* ``stereotype``       row (P, R, K), col (P, C, K), phi (P, L)

Any variant may additionally carry ``side`` (L, S) weights for per-dyad
features and ``offset`` (L,) per-label global offsets.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

VARIANTS = ("dyadic", "symmetric-link", "directed-link", "multi-relational", "stereotype")
LINK_VARIANTS = ("symmetric-link", "directed-link", "multi-relational")
PREDICTION_RULES = ("mode", "median", "mean")

# columns holding the constant-1 bias features
ROW_BIAS_COL = 0
COL_BIAS_COL = 1

# blocks whose leading object axis indexes rows / cols / both roles
_ROW_ROLE = {"row", "alpha"}
_COL_ROLE = {"col", "beta"}
_BOTH_ROLES = {"shared", "gamma"}


class ModelError(ValueError):
    """Invalid model configuration or out-of-range query."""


@dataclass
class LabelSpace:
    labels: list
    kind: str = "nominal"
    numeric_values: Optional[list] = None
    base_index: Optional[int] = None

    def __post_init__(self):
        self.labels = list(self.labels)
        if len(self.labels) < 2:
            raise ModelError("label space needs at least two labels")
        if len(set(self.labels)) != len(self.labels):
            raise ModelError("labels must be distinct")
        if self.kind not in ("nominal", "ordinal"):
            raise ModelError(f"unknown label kind {self.kind!r}")
        if self.base_index is None:
            self.base_index = len(self.labels) - 1
        if not 0 <= self.base_index < len(self.labels):
            raise ModelError(f"base_index {self.base_index} out of range")
        if self.numeric_values is not None:
            self.numeric_values = [float(v) for v in self.numeric_values]
            if len(self.numeric_values) != len(self.labels):
                raise ModelError("numeric_values must match labels in length")
        if self.kind == "ordinal":
            if self.numeric_values is None:
                raise ModelError("ordinal label space requires numeric_values")
            if np.any(np.diff(self.numeric_values) <= 0):
                raise ModelError("numeric_values must be strictly increasing")

    @classmethod
    def ordinal(cls, values: Sequence[float], base_index: Optional[int] = None) -> "LabelSpace":
        return cls(list(values), "ordinal", list(values), base_index)

    @classmethod
    def binary(cls) -> "LabelSpace":
        """The {0, 1} label space used by the link variants (base = 0)."""
        return cls([0, 1], "ordinal", [0.0, 1.0], base_index=0)

    def __len__(self):
        return len(self.labels)

    @property
    def values(self) -> np.ndarray:
        if self.numeric_values is None:
            raise ModelError("label space has no numeric values")
        return np.asarray(self.numeric_values, dtype=float)

    def index(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ModelError(f"unknown label {label!r}") from None

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "kind": self.kind,
            "numeric_values": self.numeric_values,
            "base_index": self.base_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(d["labels"], d["kind"], d.get("numeric_values"), d["base_index"])


@dataclass
class Dyad:
    row: int
    col: int
    side: Optional[np.ndarray] = None
    relation: Optional[int] = None


@dataclass
class LflModel:
    """Weights of one LFL model plus the layout needed to interpret them."""

    label_space: LabelSpace
    variant: str
    rank: int
    bias: bool
    n_rows: int
    n_cols: int
    params: dict = field(default_factory=dict)
    n_relations: int = 0
    stereotype_rank: int = 0
    # id vocabularies, training counts, fallback means; carried through JSON
    meta: dict = field(default_factory=dict)

    @property
    def k_total(self) -> int:
        return self.rank + 2 if self.bias else self.rank

    @property
    def n_labels(self) -> int:
        return len(self.label_space)

    @property
    def base(self) -> int:
        return self.label_space.base_index

    @property
    def side_dim(self) -> int:
        side = self.params.get("side")
        return 0 if side is None else side.shape[1]

    @property
    def has_offset(self) -> bool:
        return "offset" in self.params

    def free_mask(self, name: str) -> np.ndarray:
        """Boolean mask of the trainable entries of parameter block ``name``."""
        w = self.params[name]
        mask = np.ones(w.shape, dtype=bool)
        if name in ("row", "col") and self.variant == "dyadic":
            mask[self.base] = False
        if name in ("side", "offset"):
            mask[self.base] = False
        if name == "phi":
            mask[:, self.base] = False
        if self.bias:
            if name in ("row", "alpha"):
                mask[..., ROW_BIAS_COL] = False
            elif name in ("col", "beta"):
                mask[..., COL_BIAS_COL] = False
        return mask

    def param_names(self, groups: Optional[Sequence[str]] = None) -> list:
        """Parameter blocks in canonical order; ``groups`` filters by latent/side."""
        names = sorted(self.params)
        if groups is None:
            return names
        return [n for n in names if param_group(n) in groups]

    def get_free(self, groups=None) -> np.ndarray:
        parts = [self.params[n][self.free_mask(n)] for n in self.param_names(groups)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_free(self, vec: np.ndarray, groups=None) -> None:
        pos = 0
        for n in self.param_names(groups):
            mask = self.free_mask(n)
            size = int(mask.sum())
            self.params[n][mask] = vec[pos:pos + size]
            pos += size
        if pos != len(vec):
            raise ModelError(f"free vector has {len(vec)} entries, layout expects {pos}")

    def copy(self) -> "LflModel":
        return copy.deepcopy(self)

    def enforce_frozen(self) -> None:
        """Reset every frozen entry to its pinned value (0 for base, 1 for bias)."""
        for n, w in self.params.items():
            frozen = ~self.free_mask(n)
            w[frozen] = 0.0
            if self.bias and n in ("row", "alpha", "col", "beta"):
                col = ROW_BIAS_COL if n in ("row", "alpha") else COL_BIAS_COL
                if n in ("row", "col") and self.variant == "dyadic":
                    live = np.arange(self.n_labels) != self.base
                    w[live, :, col] = 1.0
                else:
                    w[..., col] = 1.0

    # ---- serialization -------------------------------------------------

    def to_json(self) -> str:
        header = {
            "format": "lfl-model",
            "version": 1,
            "variant": self.variant,
            "rank": self.rank,
            "bias": self.bias,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "n_relations": self.n_relations,
            "stereotype_rank": self.stereotype_rank,
            "label_space": self.label_space.to_dict(),
        }
        lines = ["{"]
        for key, val in header.items():
            lines.append(f"  {json.dumps(key)}: {json.dumps(val)},")
        lines.append('  "params": {')
        names = sorted(self.params)
        for i, n in enumerate(names):
            w = self.params[n]
            body = _format_array(w)
            sep = "," if i < len(names) - 1 else ""
            lines.append(f'    {json.dumps(n)}: {{"shape": {json.dumps(list(w.shape))}, "data": {body}}}{sep}')
        lines.append("  }" + ("," if self.meta else ""))
        if self.meta:
            lines.append(f'  "meta": {json.dumps(self.meta, sort_keys=True)}')
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LflModel":
        d = json.loads(text)
        if d.get("format") != "lfl-model":
            raise ModelError("not an lfl-model document")
        params = {
            n: np.asarray(p["data"], dtype=float).reshape(p["shape"])
            for n, p in d["params"].items()
        }
        return cls(
            label_space=LabelSpace.from_dict(d["label_space"]),
            variant=d["variant"],
            rank=d["rank"],
            bias=d["bias"],
            n_rows=d["n_rows"],
            n_cols=d["n_cols"],
            params=params,
            n_relations=d["n_relations"],
            stereotype_rank=d["stereotype_rank"],
            meta=d.get("meta", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "LflModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _format_array(w: np.ndarray) -> str:
    if not np.all(np.isfinite(w)):
        raise ModelError("cannot serialize non-finite weights")
    if w.ndim == 0:
        return "%.17g" % w
    if w.ndim == 1:
        return "[" + ", ".join("%.17g" % v for v in w) + "]"
    return "[" + ", ".join(_format_array(sub) for sub in w) + "]"


def param_group(name: str) -> str:
    return "side" if name == "side" else "latent"


def object_role(name: str) -> Optional[str]:
    """Which object set indexes the leading object axis of a block."""
    if name in _ROW_ROLE:
        return "row"
    if name in _COL_ROLE:
        return "col"
    if name in _BOTH_ROLES:
        return "both"
    return None


def object_axis(name: str) -> int:
    # (L|P, objects, K) for dyadic/stereotype row/col, else (objects, K)
    return 1 if name in ("row", "col") else 0


def new_model(
    label_space: LabelSpace,
    n_rows: int,
    n_cols: int,
    rank: int,
    variant: str = "dyadic",
    bias: bool = True,
    side_dim: int = 0,
    offset: bool = False,
    n_relations: int = 0,
    stereotype_rank: int = 0,
) -> LflModel:
    """Allocate a model with all free weights zero and frozen entries pinned."""
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}")
    if rank < 0:
        raise ModelError("rank must be non-negative")
    if n_rows < 1 or n_cols < 1:
        raise ModelError("model needs at least one row and one column object")
    L = len(label_space)
    if variant in LINK_VARIANTS:
        if L != 2 or label_space.base_index != 0:
            raise ModelError(f"{variant} requires a binary label space with base 0")
        if variant != "multi-relational" and n_rows != n_cols:
            raise ModelError(f"{variant} requires a square object set")
    if variant == "symmetric-link" and bias:
        raise ModelError("symmetric-link has no bias layout; pass bias=False")
    K = rank + 2 if bias else rank
    params = {}
    if variant == "dyadic":
        params["row"] = np.zeros((L, n_rows, K))
        params["col"] = np.zeros((L, n_cols, K))
    elif variant == "symmetric-link":
        params["shared"] = np.zeros((n_rows, K))
    elif variant == "directed-link":
        params["alpha"] = np.zeros((n_rows, K))
        params["beta"] = np.zeros((n_cols, K))
        params["gamma"] = np.zeros((n_rows, K))
    elif variant == "multi-relational":
        if n_relations < 1:
            raise ModelError("multi-relational requires n_relations >= 1")
        params["alpha"] = np.zeros((n_rows, K))
        params["beta"] = np.zeros((n_cols, K))
        params["scale"] = np.zeros((n_relations, K))
    elif variant == "stereotype":
        if stereotype_rank < 1:
            raise ModelError("stereotype requires stereotype_rank >= 1")
        params["row"] = np.zeros((stereotype_rank, n_rows, K))
        params["col"] = np.zeros((stereotype_rank, n_cols, K))
        params["phi"] = np.zeros((stereotype_rank, L))
    if side_dim:
        params["side"] = np.zeros((L, side_dim))
    if offset:
        params["offset"] = np.zeros(L)
    model = LflModel(
        label_space, variant, rank, bias, n_rows, n_cols, params,
        n_relations=n_relations if variant == "multi-relational" else 0,
        stereotype_rank=stereotype_rank if variant == "stereotype" else 0,
    )
    model.enforce_frozen()
    return model


def baseline_model(label_space: LabelSpace, n_rows: int, n_cols: int) -> LflModel:
    """Bias-only model: score_y = row_bias[r, y] + col_bias[c, y] + offset[y]."""
    return new_model(label_space, n_rows, n_cols, rank=0, bias=True, offset=True)


def extend_cold(model: LflModel, n_rows: int, n_cols: int, reset_rows=(), reset_cols=()) -> LflModel:
    """Copy of ``model`` grown to the given object counts.

    New objects, and those listed in ``reset_rows`` / ``reset_cols``, get
    "cold" weights: every free latent entry zero, frozen entries pinned.
    """
    if model.variant in ("symmetric-link", "directed-link"):
        n_rows = n_cols = max(n_rows, n_cols)
    out = model.copy()
    out.n_rows = max(n_rows, model.n_rows)
    out.n_cols = max(n_cols, model.n_cols)
    for name, w in model.params.items():
        role = object_role(name)
        if role is None:
            continue
        axis = object_axis(name)
        size = out.n_cols if role == "col" else out.n_rows
        shape = list(w.shape)
        shape[axis] = size
        grown = np.zeros(shape)
        idx = [slice(None)] * w.ndim
        idx[axis] = slice(0, w.shape[axis])
        grown[tuple(idx)] = w
        resets = list(reset_cols) if role == "col" else list(reset_rows)
        if role == "both":
            resets = list(reset_rows) + list(reset_cols)
        if resets:
            idx[axis] = np.asarray(resets, dtype=int)
            grown[tuple(idx)] = 0.0
        out.params[name] = grown
    out.enforce_frozen()
    return out


# ---- forward computation ----------------------------------------------------

def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    s = np.asarray(scores, dtype=float)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    m = s.max(axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def _check_indices(model: LflModel, rows, cols, relation, side):
    if len(rows) and (rows.min() < 0 or rows.max() >= model.n_rows):
        raise ModelError("row index out of bounds")
    if len(cols) and (cols.min() < 0 or cols.max() >= model.n_cols):
        raise ModelError("column index out of bounds")
    if model.variant == "multi-relational":
        if relation is None:
            raise ModelError("multi-relational queries need a relation index")
        if len(relation) and (relation.min() < 0 or relation.max() >= model.n_relations):
            raise ModelError("relation index out of bounds")
    if model.side_dim:
        if side is None:
            raise ModelError("model has side weights; side features required")
        if side.shape != (len(rows), model.side_dim):
            raise ModelError(
                f"side dimension mismatch: expected {model.side_dim}, got {side.shape[-1]}"
            )
    elif side is not None and side.size:
        raise ModelError("side features given but model has no side weights")


def compute_scores(model: LflModel, rows, cols, side=None, relation=None, check=True) -> np.ndarray:
    """Score table (n, L); column ``base`` is identically zero."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if side is not None:
        side = np.asarray(side, dtype=float).reshape(len(rows), -1)
    if relation is not None:
        relation = np.asarray(relation, dtype=np.intp)
    if check:
        _check_indices(model, rows, cols, relation, side)
    p = model.params
    n, L = len(rows), model.n_labels
    S = np.zeros((n, L))
    v = model.variant
    if v == "dyadic":
        for y in range(L):
            if y != model.base:
                S[:, y] = np.einsum("nk,nk->n", p["row"][y][rows], p["col"][y][cols])
    elif v == "stereotype":
        inner = np.stack(
            [np.einsum("nk,nk->n", p["row"][i][rows], p["col"][i][cols])
             for i in range(model.stereotype_rank)],
            axis=1,
        )
        S += inner @ p["phi"]
    elif v == "symmetric-link":
        A = p["shared"]
        S[:, 1] = np.einsum("nk,nk->n", A[rows], A[cols])
    elif v == "directed-link":
        S[:, 1] = (np.einsum("nk,nk->n", p["alpha"][rows], p["beta"][cols])
                   + np.einsum("nk,nk->n", p["gamma"][rows], p["gamma"][cols]))
    elif v == "multi-relational":
        S[:, 1] = np.einsum("nk,nk,nk->n", p["alpha"][rows], p["scale"][relation], p["beta"][cols])
    if "side" in p:
        S += side @ p["side"].T
    if "offset" in p:
        S += p["offset"]
    S[:, model.base] = 0.0
    return S


def predict_proba_batch(model: LflModel, rows, cols, side=None, relation=None) -> np.ndarray:
    return softmax(compute_scores(model, rows, cols, side, relation))


def _one(dyad: Dyad):
    side = None if dyad.side is None else np.asarray(dyad.side, dtype=float)[None, :]
    rel = None if dyad.relation is None else [dyad.relation]
    return [dyad.row], [dyad.col], side, rel


def predict_proba(model: LflModel, dyad: Dyad) -> np.ndarray:
    """Conditional label distribution p(y | dyad) in label order."""
    return predict_proba_batch(model, *_one(dyad))[0]


def predict_proba_baseline(model: LflModel, dyad: Dyad) -> np.ndarray:
    """Distribution under the bias-only model (rank 0, bias on, per-label offset)."""
    if model.variant != "dyadic" or model.rank != 0 or not model.bias or not model.has_offset:
        raise ModelError("baseline prediction needs a rank-0 dyadic model with bias and offset")
    return predict_proba(model, dyad)


def apply_rule(probs: np.ndarray, label_space: LabelSpace, rule: str) -> np.ndarray:
    """Reduce distributions (n, L) to predictions.

    ``mode`` returns label indices (ties to the lowest index), ``median`` the
    index of the smallest label whose CDF reaches 0.5, ``mean`` the expected
    numeric value.
    """
    probs = np.atleast_2d(probs)
    if rule == "mode":
        return np.argmax(probs, axis=1)
    if rule not in PREDICTION_RULES:
        raise ModelError(f"unknown prediction rule {rule!r}")
    if label_space.kind != "ordinal":
        raise ModelError(f"rule {rule!r} requires an ordinal label space")
    if rule == "mean":
        return probs @ label_space.values
    cdf = np.cumsum(probs, axis=1)
    # guard against cdf[-1] = 1 - eps
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)
    return np.argmax(cdf >= 0.5 - 1e-12, axis=1)


def predict(model: LflModel, dyad: Dyad, rule: str = "mode"):
    """Point prediction: a label (mode/median) or the expected value (mean)."""
    out = apply_rule(predict_proba(model, dyad)[None, :], model.label_space, rule)[0]
    if rule == "mean":
        return float(out)
    return model.label_space.labels[int(out)]


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _check_pair(model, variant, r, c):
    if model.variant != variant:
        raise ModelError(f"model variant is {model.variant!r}, expected {variant!r}")
    if not (0 <= r < model.n_rows and 0 <= c < model.n_cols):
        raise ModelError("object index out of bounds")


def predict_link_symmetric(model: LflModel, r: int, c: int) -> float:
    _check_pair(model, "symmetric-link", r, c)
    A = model.params["shared"]
    return float(sigmoid(A[r] @ A[c]))


def predict_link_directed(model: LflModel, r: int, c: int) -> float:
    _check_pair(model, "directed-link", r, c)
    p = model.params
    return float(sigmoid(p["alpha"][r] @ p["beta"][c] + p["gamma"][r] @ p["gamma"][c]))


def predict_multirelational(model: LflModel, r: int, c: int, relation: int) -> float:
    _check_pair(model, "multi-relational", r, c)
    if not 0 <= relation < model.n_relations:
        raise ModelError(f"invalid relation index {relation}")
    p = model.params
    return float(sigmoid(np.sum(p["alpha"][r] * p["scale"][relation] * p["beta"][c])))


def expand_stereotype(model: LflModel, y: int) -> np.ndarray:
    """Effective score matrix (R, C) for label ``y``: sum_i phi[i, y] row_i col_i^T."""
    if model.variant != "stereotype":
        raise ModelError("expand_stereotype needs a stereotype model")
    if not 0 <= y < model.n_labels:
        raise ModelError(f"label index {y} out of range")
    p = model.params
    return np.einsum("i,irk,ick->rc", p["phi"][:, y], p["row"], p["col"])
