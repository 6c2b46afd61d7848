"""Command-line front end: synth, train, predict, eval, check-grad, cluster, cv.

Exit codes: 0 ok, 1 gradient check failed, 2 flag errors, 3 data errors,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .data import (
    DataError, DyadDataset, attach_side, load_side_table, load_triplets, save_side_table,
    save_triplets, synth_coldstart, synth_link_graph, synth_nominal,
)
from .evaluation import (
    MetricReport, auc, calibration_report, cluster_latent, format_table, mae, rmse,
    to_json_records, zero_one_error,
)
from .model import LabelSpace, LflModel, ModelError, apply_rule, extend_cold, predict_proba_batch
from .objectives import (
    Objective, finite_difference_oracle, gradient, gradient_agrees, gradient_deviation,
)
from .training import (
    DivergenceError, ModelSpec, TrainConfig, coldstart_fallback_batch, cross_validate, fit,
    fit_coldstart, init_model,
)

TASKS = {
    "dyadic": "dyadic",
    "link-sym": "symmetric-link",
    "link-dir": "directed-link",
    "multirel": "multi-relational",
    "stereotype": "stereotype",
}


class FlagError(Exception):
    pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, argv, inputs, outputs, started) -> dict:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {
        "command": args.command,
        "argv": list(argv),
        "resolved": resolved,
        "seeds": {k: v for k, v in resolved.items() if "seed" in k},
        "inputs": {p: _digest(p) for p in inputs if p},
        "outputs": [p for p in outputs if p],
        "elapsed_seconds": round(time.perf_counter() - started, 3),
    }


def _emit_manifest(args, argv, inputs, outputs, started, extra=None) -> None:
    man = _manifest(args, argv, inputs, outputs, started)
    if extra:
        man.update(extra)
    text = json.dumps(man, indent=1, sort_keys=True, default=str)
    if getattr(args, "manifest", None):
        with open(args.manifest, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


# ---- label spaces and datasets ------------------------------------------------

def _label_space(args):
    task = getattr(args, "task", "dyadic")
    if TASKS.get(task, task) in ("symmetric-link", "directed-link", "multi-relational"):
        return LabelSpace.binary()
    if getattr(args, "labels_from", None):
        with open(args.labels_from, encoding="utf-8") as fh:
            return LabelSpace.from_dict(json.load(fh)["label_space"])
    if not getattr(args, "labels", None):
        return None
    raw = [s.strip() for s in args.labels.split(",") if s.strip()]
    try:
        values = [float(v) for v in raw]
        labels = [int(v) if v.is_integer() else v for v in values]
    except ValueError:
        values, labels = None, raw
    kind = args.label_kind or ("ordinal" if values is not None else "nominal")
    if kind == "ordinal" and values is None:
        raise FlagError("--label-kind ordinal needs numeric --labels")
    base = args.base if args.base is not None else None
    try:
        return LabelSpace(labels, kind, values, base)
    except ModelError as exc:
        raise FlagError(str(exc)) from None


def _load(path, args, row_index=None, col_index=None, allow_empty=False, label_space=None):
    ls = label_space or _label_space(args)
    kind = getattr(args, "label_kind", None) or "ordinal"
    ds = load_triplets(path, ls, kind, row_index, col_index, allow_empty=allow_empty)
    if TASKS.get(getattr(args, "task", "dyadic")) == "multi-relational":
        ds = _split_relation(ds)
    if getattr(args, "side_table", None):
        rf, cf = load_side_table(args.side_table)
        ds = attach_side(ds, rf, cf)
    return ds


def _split_relation(ds: DyadDataset) -> DyadDataset:
    """Multi-relational files carry the relation index as the fourth field."""
    if ds.side is None or ds.side.shape[1] < 1:
        raise DataError("multirel data needs a relation index as the fourth field")
    rel = ds.side[:, 0]
    if np.any(rel != np.round(rel)) or (len(rel) and rel.min() < 0):
        raise DataError("relation index must be a non-negative integer")
    rel = rel.astype(np.intp)
    rest = ds.side[:, 1:] if ds.side.shape[1] > 1 else None
    return replace(ds, side=rest, relation=rel, n_relations=int(rel.max()) + 1 if len(rel) else 0)


def _square(ds: DyadDataset) -> DyadDataset:
    """Link tasks index rows and columns in one shared object vocabulary."""
    ids = list(dict.fromkeys(list(ds.row_ids) + list(ds.col_ids)))
    pos = {k: i for i, k in enumerate(ids)}
    rows = np.array([pos[ds.row_ids[r]] for r in ds.rows], dtype=np.intp)
    cols = np.array([pos[ds.col_ids[c]] for c in ds.cols], dtype=np.intp)
    return DyadDataset(ds.label_space, len(ids), len(ids), rows, cols, ds.labels, ds.side,
                       ds.relation, ds.n_relations, ids, ids)


def _objective(args) -> Objective:
    return Objective(args.objective, args.l2, args.l2_side, args.scale_reg)


def _config(args) -> TrainConfig:
    return TrainConfig(
        objective=_objective(args), optimizer=args.optimizer, epochs=args.epochs,
        learning_rate=args.lr, lr_decay=args.lr_decay, batch_shuffle_seed=args.seed,
        init_scale=args.init_scale, init_seed=args.seed, convergence_tol=args.tol,
        max_batch_iters=args.max_iters, checkpoint_dir=args.checkpoint_dir,
    )


def _spec(args, ds: DyadDataset) -> ModelSpec:
    variant = TASKS[args.task]
    bias = args.bias and variant != "symmetric-link"
    return ModelSpec.for_dataset(
        ds, args.rank, variant=variant, bias=bias,
        stereotype_rank=args.stereotype_rank if variant == "stereotype" else 0,
    )


def _validate_train_flags(args, ds: DyadDataset) -> None:
    if args.objective in ("mae", "mse") and ds.label_space.kind != "ordinal":
        raise FlagError(
            f"--objective {args.objective} conflicts with nominal labels; "
            "declare ordinal labels or use --objective nll"
        )
    if args.task == "stereotype" and args.stereotype_rank < 1:
        raise FlagError("--task stereotype needs --stereotype-rank >= 1")
    if args.coldstart and not args.side_table:
        raise FlagError("--coldstart needs --side-table")


def _fallback_meta(model: LflModel, ds: DyadDataset) -> dict:
    meta = {
        "row_ids": list(ds.row_ids or []),
        "col_ids": list(ds.col_ids or []),
        "row_counts": ds.row_obs_counts.tolist(),
        "col_counts": ds.col_obs_counts.tolist(),
    }
    if model.label_space.kind == "ordinal" and len(ds):
        probs = predict_proba_batch(model, ds.rows, ds.cols, ds.side if model.side_dim else None,
                                    ds.relation)
        F = apply_rule(probs, model.label_space, "mean")
        rs = np.bincount(ds.rows, weights=F, minlength=ds.n_rows)
        cs = np.bincount(ds.cols, weights=F, minlength=ds.n_cols)
        with np.errstate(invalid="ignore", divide="ignore"):
            meta["row_mean"] = [None if n == 0 else float(s / n) for s, n in zip(rs, ds.row_obs_counts)]
            meta["col_mean"] = [None if n == 0 else float(s / n) for s, n in zip(cs, ds.col_obs_counts)]
        meta["global_mean"] = float(F.mean())
    return meta


# ---- commands --------------------------------------------------------------------

def cmd_train(args, argv):
    started = time.perf_counter()
    ds = _load(args.data, args)
    if args.task in ("link-sym", "link-dir"):
        ds = _square(ds)
    _validate_train_flags(args, ds)
    config = _config(args)
    spec = _spec(args, ds)
    if args.coldstart:
        model, reports = fit_coldstart(spec, ds, config)
        report = reports[1]
        summary = {"stage1": reports[0].summary(), "stage2": reports[1].summary()}
    else:
        model = init_model(spec, config)
        report = fit(model, ds, config)
        summary = report.summary()
    model.meta = _fallback_meta(model, ds)
    model.save(args.out)
    _emit_manifest(args, argv, [args.data, args.side_table, args.labels_from], [args.out], started,
                   {"fit_report": summary, "trace_tail": report.trace[-5:]})
    return 0


def cmd_predict(args, argv):
    started = time.perf_counter()
    model = LflModel.load(args.model)
    meta = model.meta
    link = model.variant in ("symmetric-link", "directed-link")
    row_index = {k: i for i, k in enumerate(meta.get("row_ids", []))}
    col_index = {k: i for i, k in enumerate(meta.get("col_ids", []))}
    if link:
        col_index = row_index
    rows, cols, side, rel, raw = _read_dyads(args.dyads, row_index, col_index, link, model)
    if side is not None and args.side_table:
        raise FlagError("give side features either inline or via --side-table, not both")
    if args.side_table:
        rf, cf = load_side_table(args.side_table)
        side = _side_from_table(raw, rf, cf)
    if model.side_dim and side is None:
        raise DataError("model uses side features; supply them inline or via --side-table")
    ls = model.label_space
    rule = args.rule or ("mean" if ls.kind == "ordinal" and not link else "mode")
    if rule in ("mean", "median") and ls.kind != "ordinal":
        raise FlagError(f"--rule {rule} needs an ordinal label space")
    row_counts = np.asarray(meta.get("row_counts", [1] * model.n_rows))
    col_counts = np.asarray(meta.get("col_counts", [1] * model.n_cols))
    row_seen = np.array([r < len(row_counts) and row_counts[r] > 0 for r in rows], dtype=bool)
    col_seen = np.array([c < len(col_counts) and col_counts[c] > 0 for c in cols], dtype=bool)
    if link:
        counts = np.zeros(model.n_rows)
        counts[: len(row_counts)] += row_counts
        counts[: len(col_counts)] += col_counts
        row_seen = np.array([r < len(counts) and counts[r] > 0 for r in rows], dtype=bool)
        col_seen = np.array([c < len(counts) and counts[c] > 0 for c in cols], dtype=bool)
    if link:
        unseen_r = unseen_c = [i for i in range(len(counts)) if counts[i] == 0]
    else:
        unseen_r = [i for i in range(len(row_counts)) if row_counts[i] == 0]
        unseen_c = [i for i in range(len(col_counts)) if col_counts[i] == 0]
    n_rows = max([model.n_rows] + [r + 1 for r in rows])
    n_cols = max([model.n_cols] + [c + 1 for c in cols])
    warm = extend_cold(model, n_rows, n_cols, unseen_r, unseen_c)
    probs = predict_proba_batch(warm, rows, cols, side, rel)
    preds = apply_rule(probs, ls, rule)
    fallback = (ls.kind == "ordinal" and not model.side_dim and not link
                and "global_mean" in meta and rule == "mean")
    used_fallback = np.zeros(len(rows), dtype=bool)
    if fallback:
        preds = preds.astype(float)
        for i, (r, c) in enumerate(zip(rows, cols)):
            if row_seen[i] and col_seen[i]:
                continue
            used_fallback[i] = True
            if not row_seen[i] and col_seen[i]:
                preds[i] = meta["col_mean"][c]
            elif row_seen[i] and not col_seen[i]:
                preds[i] = meta["row_mean"][r]
            else:
                preds[i] = meta["global_mean"]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# row\tcol\tprediction\t" + "\t".join(f"p({lab})" for lab in ls.labels) + "\n")
        for i, (r_id, c_id) in enumerate(raw):
            if rule == "mean":
                pred = "%.17g" % preds[i]
            else:
                pred = str(ls.labels[int(preds[i])])
            ps = ["nan"] * len(ls) if used_fallback[i] else ["%.17g" % v for v in probs[i]]
            fh.write("\t".join([r_id, c_id, pred] + ps) + "\n")
    _emit_manifest(args, argv, [args.model, args.dyads, args.side_table], [args.out], started,
                   {"predictions": len(rows), "fallback_used": int(used_fallback.sum()), "rule": rule})
    return 0


def _side_from_table(raw, rf: dict, cf: dict) -> np.ndarray:
    out = []
    for r_id, c_id in raw:
        parts = []
        for key, table in ((r_id, rf), (c_id, cf)):
            if not table:
                continue
            if key not in table:
                raise DataError(f"missing side features for object {key!r}")
            parts.append(table[key])
        out.append(np.concatenate(parts) if parts else np.zeros(0))
    return np.stack(out)


def _read_dyads(path, row_index, col_index, link, model):
    rows, cols, side, rel, raw = [], [], [], [], []
    row_index, col_index = dict(row_index), dict(col_index)
    if link:
        col_index = row_index
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            delim = "\t" if "\t" in line else ","
            fields = [f.strip() for f in line.split(delim)]
            if len(fields) < 2:
                raise DataError(f"{path}:{lineno}: expected at least row and column ids")
            r_id, c_id = fields[0], fields[1]
            rows.append(row_index.setdefault(r_id, len(row_index)))
            cols.append(col_index.setdefault(c_id, len(col_index)))
            raw.append((r_id, c_id))
            extra = fields[3:]
            try:
                extra = [float(v) for v in extra]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric extra field") from None
            if width is None:
                width = len(extra)
            elif width != len(extra):
                raise DataError(f"{path}:{lineno}: inconsistent number of fields")
            if model.variant == "multi-relational":
                if not extra:
                    raise DataError(f"{path}:{lineno}: multirel dyads need a relation index")
                rel.append(int(extra[0]))
                extra = extra[1:]
            side.append(extra)
    if not rows:
        raise DataError("empty dataset")
    side_arr = np.asarray(side, dtype=float) if width and (model.variant != "multi-relational" or width > 1) else None
    if side_arr is not None and not model.side_dim:
        side_arr = None
    rel_arr = np.asarray(rel, dtype=np.intp) if rel else None
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp), side_arr, rel_arr, raw


def _read_predictions(path):
    out = []
    header = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                header = line[1:].strip().split("\t")
                continue
            if line:
                out.append(line.split("\t"))
    if not out:
        raise DataError("empty predictions file")
    return header, out


def cmd_eval(args, argv):
    started = time.perf_counter()
    header, preds = _read_predictions(args.predictions)
    truth_rows = []
    with open(args.truth, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            delim = "\t" if "\t" in line else ","
            truth_rows.append([f.strip() for f in line.split(delim)])
    if len(truth_rows) != len(preds):
        raise DataError(f"{len(preds)} predictions but {len(truth_rows)} truth lines")
    for p, t in zip(preds, truth_rows):
        if p[0] != t[0] or p[1] != t[1]:
            raise DataError(f"dyad mismatch: prediction ({p[0]}, {p[1]}) vs truth ({t[0]}, {t[1]})")
    truth_lab = [t[2] for t in truth_rows]
    pred_lab = [p[2] for p in preds]
    prob_cols = header[3:] if header else []
    labels = [c[2:-1] for c in prob_cols]
    reports = []
    for metric in args.metric:
        n = len(preds)
        if metric == "zero-one":
            val = zero_one_error(np.array([_norm(v) for v in pred_lab]), np.array([_norm(v) for v in truth_lab]))
        elif metric in ("mae", "rmse"):
            p = np.array([float(v) for v in pred_lab])
            t = np.array([float(v) for v in truth_lab])
            val = mae(p, t) if metric == "mae" else rmse(p, t)
        elif metric in ("auc", "ece"):
            target = args.label if args.label is not None else (labels[-1] if labels else None)
            if target is None or target not in labels:
                raise FlagError(f"--label must name one of the probability columns {labels}")
            j = labels.index(target)
            scores = np.array([float(p[3 + j]) for p in preds])
            hit = np.array([_norm(v) == _norm(target) for v in truth_lab])
            ok = np.isfinite(scores)
            scores, hit, n = scores[ok], hit[ok], int(ok.sum())
            val = auc(scores, hit) if metric == "auc" else calibration_report(scores, hit, args.bins)["ece"]
        else:
            raise FlagError(f"unknown metric {metric!r}")
        reports.append(MetricReport(metric, val, n))
    text = to_json_records(reports) if args.format == "json" else format_table(reports)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    if args.manifest:
        man = _manifest(args, argv, [args.predictions, args.truth], [args.out], started)
        with open(args.manifest, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(man, indent=1, sort_keys=True, default=str) + "\n")
    return 0


def _norm(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def cmd_synth(args, argv):
    started = time.perf_counter()
    os.makedirs(args.out_dir, exist_ok=True)
    train_p = os.path.join(args.out_dir, "train.tsv")
    test_p = os.path.join(args.out_dir, "test.tsv")
    truth_p = os.path.join(args.out_dir, "truth.json")
    labels_p = os.path.join(args.out_dir, "labels.json")
    outputs = [train_p, test_p, truth_p, labels_p]
    lo, hi = args.range
    if args.coldstart:
        train, test, rf, cf, cold = synth_coldstart(
            args.n, args.rank, retention=args.retention, seed=args.seed)
        side_p = os.path.join(args.out_dir, "side.tsv")
        save_side_table(rf, cf, side_p)
        outputs.append(side_p)
        truth_doc = {"format": "lfl-truth", "coldstart_rows": [f"r{r}" for r in cold]}
        truth_text = json.dumps(truth_doc, indent=1) + "\n"
    elif args.link:
        train, test, truth = synth_link_graph(
            args.n, args.rank, symmetric=args.symmetric, seed=args.seed,
            weight_range=(lo, hi) if args.range_given else (-1.5, 1.5))
        truth_text = truth.to_json()
    else:
        train, test, truth = synth_nominal(
            args.n, args.rank, args.labels, args.retention, (lo, hi), args.seed)
        truth_text = truth.to_json()
    for ds in (train, test):
        if ds.row_ids is None:
            ds.row_ids = [f"r{i}" for i in range(ds.n_rows)]
            ds.col_ids = [f"c{i}" for i in range(ds.n_cols)] if not args.link else [f"r{i}" for i in range(ds.n_cols)]
    save_triplets(train, train_p)
    save_triplets(test, test_p)
    with open(truth_p, "w", encoding="utf-8") as fh:
        fh.write(truth_text)
    with open(labels_p, "w", encoding="utf-8") as fh:
        json.dump({"label_space": train.label_space.to_dict()}, fh, indent=1)
        fh.write("\n")
    _emit_manifest(args, argv, [], outputs, started,
                   {"train_examples": len(train), "test_examples": len(test)})
    return 0


def cmd_check_grad(args, argv):
    rng = np.random.default_rng(args.seed)
    variant = TASKS[args.task]
    if args.data:
        ds = _load(args.data, args)
        if args.task in ("link-sym", "link-dir"):
            ds = _square(ds)
        if args.objective in ("mae", "mse") and ds.label_space.kind != "ordinal":
            raise FlagError(f"--objective {args.objective} conflicts with nominal labels")
    else:
        ds = random_instance(variant, args.objective, rng, side_dim=args.random_side)
    spec = _spec(args, ds)
    model = init_model(spec, TrainConfig(init_scale=args.init_scale, init_seed=args.seed))
    obj = _objective(args)
    a = gradient(model, ds, obj)
    b = finite_difference_oracle(model, ds, obj, args.h)
    max_abs, max_rel = gradient_deviation(a, b)
    ok = gradient_agrees(a, b, args.rtol, args.atol)
    print(f"parameters        {len(a.vector())}")
    print(f"max abs deviation {max_abs:.3e}")
    print(f"max rel deviation {max_rel:.3e}")
    print("OK" if ok else "FAIL")
    return 0 if ok else 1


def random_instance(variant: str, objective: str, rng, n_rows: int = 6, n_cols: int = 7,
                    n_labels: int = 4, n_examples: int = 30, side_dim: int = 0,
                    n_relations: int = 3) -> DyadDataset:
    """Small random dataset for gradient checks."""
    if variant in ("symmetric-link", "directed-link", "multi-relational"):
        ls = LabelSpace.binary()
        if variant != "multi-relational":
            n_cols = n_rows
    elif objective == "nll":
        ls = LabelSpace(list(range(n_labels)), "nominal")
    else:
        ls = LabelSpace.ordinal(list(range(1, n_labels + 1)))
    rel = rng.integers(0, n_relations, n_examples) if variant == "multi-relational" else None
    return DyadDataset(
        ls, n_rows, n_cols,
        rng.integers(0, n_rows, n_examples), rng.integers(0, n_cols, n_examples),
        rng.integers(0, len(ls), n_examples),
        side=rng.normal(size=(n_examples, side_dim)) if side_dim else None,
        relation=rel, n_relations=n_relations if rel is not None else 0,
    )


def cmd_cluster(args, argv):
    model = LflModel.load(args.model)
    assign, ordering, _ = cluster_latent(model, args.which, args.label, args.k, args.seed)
    key = "row_ids" if args.which == "rows" else "col_ids"
    ids = model.meta.get(key) or [str(i) for i in range(len(assign))]
    ids = ids + [str(i) for i in range(len(ids), len(assign))]
    lines = ["# object\tcluster"] + [f"{ids[i]}\t{assign[i]}" for i in ordering]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_cv(args, argv):
    started = time.perf_counter()
    ds = _load(args.data, args)
    if args.task in ("link-sym", "link-dir"):
        ds = _square(ds)
    _validate_train_flags(args, ds)
    try:
        grid = [float(v) for v in args.grid.split(",")]
    except ValueError:
        raise FlagError("--grid must be comma-separated numbers") from None
    results = cross_validate(_spec(args, ds), ds, _config(args), grid, args.folds, args.seed)
    best = min(results, key=lambda t: t[1])
    for lam, score in results:
        print(f"l2={lam:<10g} heldout_{args.objective}={score:.6f}")
    _emit_manifest(args, argv, [args.data], [], started,
                   {"results": results, "best_l2": best[0]})
    return 0


def cmd_rerun(args, argv):
    with open(args.manifest_in, encoding="utf-8") as fh:
        man = json.load(fh)
    return main(man["argv"])


# ---- parser ------------------------------------------------------------------------

def _add_data_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="comma-separated label list in order")
    p.add_argument("--labels-from", help="labels.json written by synth")
    p.add_argument("--label-kind", choices=["nominal", "ordinal"])
    p.add_argument("--base", type=int, help="base label index (default: last)")
    p.add_argument("--side-table", help="per-object features with ROW/COL sections")


def _add_model_flags(p):
    p.add_argument("--task", choices=list(TASKS), default="dyadic")
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--stereotype-rank", type=int, default=0)
    p.add_argument("--objective", choices=["nll", "mae", "mse"], default="nll")
    p.add_argument("--l2", type=float, default=1.0)
    p.add_argument("--l2-side", type=float, default=1.0)
    p.add_argument("--scale-reg", action="store_true", help="scale penalties by 1/sqrt(object count)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-scale", type=float, default=0.1)


def _add_train_flags(p):
    _add_model_flags(p)
    p.add_argument("--optimizer", choices=["sgd", "batch"], default="batch")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=0.95)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--coldstart", action="store_true", help="two-stage training with side features")
    p.add_argument("--manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfl", description="Latent feature log-linear models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model to a triplet file")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict labels for a dyads file")
    p.add_argument("--model", required=True)
    p.add_argument("--dyads", required=True)
    p.add_argument("--rule", choices=["mode", "median", "mean"])
    p.add_argument("--side-table")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--metric", action="append", choices=["zero-one", "mae", "rmse", "auc", "ece"])
    p.add_argument("--label", help="designated label for auc/ece (default: last probability column)")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic train/test/truth files")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--labels", type=int, default=3)
    p.add_argument("--retention", type=float, default=0.8)
    p.add_argument("--range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--link", action="store_true")
    p.add_argument("--symmetric", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--coldstart", action="store_true", help="ordinal cold-start suite with side table")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("check-grad", help="compare analytic and finite-difference gradients")
    p.add_argument("--data")
    p.add_argument("--labels")
    p.add_argument("--labels-from")
    p.add_argument("--label-kind", choices=["nominal", "ordinal"])
    p.add_argument("--base", type=int)
    p.add_argument("--side-table")
    p.add_argument("--random-side", type=int, default=0, help="side dimension of the random instance")
    _add_model_flags(p)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--atol", type=float, default=1e-6)
    p.set_defaults(func=cmd_check_grad, rank=3, l2=0.1, l2_side=0.1, init_scale=1.0)

    p = sub.add_parser("cluster", help="k-means over a model's latent weights")
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--which", choices=["rows", "cols"], default="rows")
    p.add_argument("--label", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("cv", help="k-fold grid search over the latent L2 strength")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--grid", default="0.1,1,10")
    p.add_argument("--folds", type=int, default=3)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    p.add_argument("manifest_in")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth":
        args.range_given = args.range is not None
        if args.range is None:
            args.range = [-3.0, 3.0]
    try:
        return args.func(args, argv)
    except FlagError as exc:
        parser.error(str(exc))
    except (DataError, OSError) as exc:
        print(f"lfl: data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"lfl: divergence: {exc}", file=sys.stderr)
        return 4
    except ModelError as exc:
        print(f"lfl: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"lfl: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
