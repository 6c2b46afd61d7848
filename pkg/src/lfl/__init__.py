"""Latent feature log-linear models for dyadic prediction."""

from .data import (
    DataError, DyadDataset, SyntheticTruth, attach_side, bayes_error_from_probs, load_side_table,
    load_triplets, save_side_table, save_triplets, split, synth_coldstart, synth_link_graph,
    synth_nominal,
)
from .evaluation import (
    MetricError, MetricReport, auc, calibration_report, cluster_latent, expected_calibration_error,
    kmeans, mae, rmse, zero_one_error,
)
from .model import (
    Dyad, LabelSpace, LflModel, ModelError, apply_rule, baseline_model, compute_scores,
    expand_stereotype, extend_cold, new_model, predict, predict_link_directed,
    predict_link_symmetric, predict_multirelational, predict_proba, predict_proba_baseline,
    predict_proba_batch, softmax,
)
from .objectives import (
    GradientSet, Objective, finite_difference_oracle, gradient, gradient_agrees, objective_value,
    value_and_gradient,
)
from .training import (
    DivergenceError, FitReport, ModelSpec, TrainConfig, coldstart_fallback_batch, cross_validate,
    fit, fit_batch, fit_coldstart, fit_sgd, init_model, predict_coldstart_fallback,
    predict_with_cold_weights,
)

__version__ = "0.1.0"
