"""Evidential meta-learning with multidimensional task beliefs and active task selection."""

from .autodiff import Node, build, detach, finite_difference_check, grad, leaf
from .belief import (
    Opinion,
    ScheduleConfig,
    TaskBelief,
    dissonance,
    eta_schedule,
    evidential_loss,
    incorrect_belief,
    lambda_schedule,
    opinion_from_evidence,
    task_beliefs,
    task_uncertainty,
    verify_bound,
)
from .episodes import Dataset, SamplerConfig, Task, load_csv, make_synthetic, ood_transform, reveal_labels, sample_task
from .meta import CostCounters, MetaConfig, evaluate, inner_adapt, outer_step, score_task, select, train
from .model import Architecture, ParamSet, evidence, init_params, predict_class

__version__ = "0.1.0"
