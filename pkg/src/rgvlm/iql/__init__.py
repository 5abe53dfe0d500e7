from .estimator import (
    ArtifactError,
    ChecksumError,
    DivergenceError,
    Hyper,
    IQLLearner,
    IQLPolicy,
    polyak_update,
    select_action,
    train,
    update_step,
)
from .losses import (
    Params,
    advantages,
    expectile_loss,
    grad_check,
    init_params,
    policy_loss,
    q_loss,
    td_targets,
    v_loss,
)
from .nets import MLP, Adam

__all__ = [
    "Adam",
    "ArtifactError",
    "ChecksumError",
    "DivergenceError",
    "Hyper",
    "IQLLearner",
    "IQLPolicy",
    "MLP",
    "Params",
    "advantages",
    "expectile_loss",
    "grad_check",
    "init_params",
    "policy_loss",
    "polyak_update",
    "q_loss",
    "select_action",
    "td_targets",
    "train",
    "update_step",
    "v_loss",
]
