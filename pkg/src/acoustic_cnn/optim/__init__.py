"""Training: minibatch SGD and Hessian-free optimization."""

from .cg import CGAborted, CGBreakdown, CGTrace, progress_window, quadratic_model, run_cg
from .hf import (HF_DROPOUT_MODES, HFResult, HFState, NetworkHFProblem, QuadraticProblem, assign_dropout_seeds,
                 hf_iteration, hf_step, update_lambda)
from .sgd import AnnealTracker, EpochRecord, SGDSchedule, TrainingDiverged, mean_loss, sgd_train

__all__ = [
    "CGAborted", "CGBreakdown", "CGTrace", "progress_window", "quadratic_model", "run_cg",
    "HF_DROPOUT_MODES", "HFResult", "HFState", "NetworkHFProblem", "QuadraticProblem",
    "assign_dropout_seeds", "hf_iteration", "hf_step", "update_lambda",
    "AnnealTracker", "EpochRecord", "SGDSchedule", "TrainingDiverged", "mean_loss", "sgd_train",
]
