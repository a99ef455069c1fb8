"""Deep-regression machine unlearning at desk scale.

Blindspot and Gaussian-Amnesiac unlearning, the FineTune/NegGrad baselines,
and the evaluation suite (retain/forget error, Wasserstein-1, Anamnesis
Index, membership inference, model inversion, backdoor accuracy) on small
numpy MLPs.
"""

__version__ = "0.1.0"

from .nn import (
    Layer,
    ModelSpec,
    RegressionModel,
    TrainConfig,
    forward,
    grad,
    init_model,
    loss,
    train,
)
from .data import (
    GroupTag,
    IndexList,
    LabelBand,
    RandomK,
    RegressionDataset,
    SplitDataset,
    SplitSpec,
    generate_pattern_images,
    generate_synthetic,
    split,
)
from .unlearn import (
    AmnesiacConfig,
    BlindspotConfig,
    UnlearnOutcome,
    blindspot_unlearn,
    finetune,
    gaussian_amnesiac,
    neggrad,
    retrain_oracle,
)
from .metrics import EvaluationReport, evaluate, w1_distance

__all__ = [
    "AmnesiacConfig",
    "BlindspotConfig",
    "EvaluationReport",
    "GroupTag",
    "IndexList",
    "LabelBand",
    "Layer",
    "ModelSpec",
    "RandomK",
    "RegressionDataset",
    "RegressionModel",
    "SplitDataset",
    "SplitSpec",
    "TrainConfig",
    "UnlearnOutcome",
    "blindspot_unlearn",
    "evaluate",
    "finetune",
    "forward",
    "gaussian_amnesiac",
    "generate_pattern_images",
    "generate_synthetic",
    "grad",
    "init_model",
    "loss",
    "neggrad",
    "retrain_oracle",
    "split",
    "train",
    "w1_distance",
]
