"""Desk-scale asynchronous federated learning lab.

Three algorithms over the same round machinery:

* ``afl``   -- plain asynchronous FedAvg, every live client uploads.
* ``vafl``  -- clients report a communication value each round; only those
  at or above the round mean upload their model.
* ``eaflm`` -- clients suppress their own upload when their gradient norm
  falls under a threshold derived from recent global-parameter movement.

Subpackages: :mod:`fedval.nn` (dense MLP trainer), :mod:`fedval.data`
(IDX loading, partition plans), :mod:`fedval.protocol` (round logic and
formulas), :mod:`fedval.sim` (deterministic event-driven harness),
:mod:`fedval.metrics` (CCR and result tables), :mod:`fedval.wire`
(framed-TCP server/client), :mod:`fedval.cli` (entry point).
"""

from fedval.nn import (
    Batch,
    DivergenceError,
    GradSnapshot,
    ModelSpec,
    ParamVector,
    evaluate_accuracy,
    init_params,
    loss_and_grad,
    sgd_step,
)

__all__ = [
    "Batch",
    "DivergenceError",
    "GradSnapshot",
    "ModelSpec",
    "ParamVector",
    "evaluate_accuracy",
    "init_params",
    "loss_and_grad",
    "sgd_step",
]

__version__ = "0.1.0"
