"""Multimodal discrete-time deep survival prediction.

Per-modality projections feed a cross-attention fusion block and a
DeepHit-style PMF head; a Cox proportional-hazards model serves as the
linear baseline. See :mod:`modalsurv.pipeline` for cross-validation and
ensembling.
"""
from .coxph import CoxModel, cox_risk, fit_coxph
from .datamodel import (
    Cohort,
    ConvergenceError,
    ModalityTable,
    ModalSurvError,
    NumericalError,
    PmfPrediction,
    SurvivalRecord,
    ValidationError,
    assemble_cohort,
)
from .deephit import ModelParams, TrainConfig, forward, init_params, train_fold
from .pipeline import (
    CVConfig,
    ModalitySpec,
    ensemble_predict,
    generate_synthetic_cohort,
    modality_grid_eval,
    run_cv,
    stratified_kfold,
)
from .preprocess import encode_clinical, fit_pca, fit_standardizer
from .survcore import TimeGrid, build_time_grid, c_index, expected_time, survival_curve

__version__ = "0.1.0"
