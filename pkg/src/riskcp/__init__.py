"""Risk-aware classification with Mondrian conformal prediction.

Wraps a probabilistic classifier with class-conditional inductive conformal
prediction, compares it against naive / top-k / RAPS set predictors, explains
rejected (empty-set) decisions, and synthesizes "evolved" tabular instances
with a conformalized GAN ensemble.
"""

__version__ = "0.1.0"

from riskcp.core import (
    DataError,
    Dataset,
    Instance,
    SplitSpec,
    load_csv,
    make_rng,
    sample_benchmark,
    save_csv,
    split,
    synth_benchmark,
)
from riskcp.classifier import (
    KNNModel,
    LogisticModel,
    ScoreModel,
    TrainConfig,
    accuracy,
    fit_knn,
    fit_logistic,
    load_model,
    reliability_diagram,
)
from riskcp.conformal import (
    CalibrationTable,
    PredictionRecord,
    calibrate,
    confidence_from_pvalues,
    nonconformity_inverse_prob,
    p_value,
    predict,
    predict_batch,
)

__all__ = [
    "CalibrationTable",
    "DataError",
    "Dataset",
    "Instance",
    "KNNModel",
    "LogisticModel",
    "PredictionRecord",
    "ScoreModel",
    "SplitSpec",
    "TrainConfig",
    "accuracy",
    "calibrate",
    "confidence_from_pvalues",
    "fit_knn",
    "fit_logistic",
    "load_csv",
    "load_model",
    "make_rng",
    "nonconformity_inverse_prob",
    "p_value",
    "predict",
    "predict_batch",
    "reliability_diagram",
    "sample_benchmark",
    "save_csv",
    "split",
    "synth_benchmark",
]
