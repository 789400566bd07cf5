"""Round logic for the three federation algorithms.

``vafl`` scores every reporting client with a communication value
(gradient-change norm scaled by a federation-size staleness factor raised
to the client's accuracy) and fetches models only from clients at or above
the mean score. ``afl`` fetches everyone. ``eaflm`` lets each client gate
its own upload by comparing its gradient norm against the recent movement
of the global model.

Everything here is pure over immutable inputs except the CommLedger, which
the round functions mutate to record upload counts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .data import Dataset, Partition
from .nn import (
    Batch,
    GradSnapshot,
    ModelSpec,
    ParamVector,
    evaluate_accuracy,
    loss_and_grad,
    sgd_step,
)

log = logging.getLogger(__name__)

GRAD_STRATEGIES = ("pseudo", "last-batch")


@dataclass
class HyperParams:
    """Per-round training knobs.

    local_rounds caps the number of mini-batch steps taken in each local
    epoch; a client with fewer than local_rounds batches just runs them all.
    """

    local_rounds: int = 5
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    total_rounds: int = 200

    def __post_init__(self):
        for name in ("local_rounds", "local_epochs", "batch_size", "total_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # 0 is allowed as the degenerate frozen-model case; negative is not
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class EaflmConfig:
    """Upload-gate coefficients; m is normally set to the federation size."""

    alpha: float = 0.98
    beta: float = 1.0
    m: float = 1.0
    D: int = 1
    xi: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if self.beta <= 0 or self.m <= 0:
            raise ValueError("beta and m must be positive")
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.xi is None:
            self.xi = (1.0 / self.D,) * self.D
        else:
            self.xi = tuple(float(x) for x in self.xi)
        if len(self.xi) != self.D:
            raise ValueError(f"xi must hold exactly D={self.D} weights")


@dataclass
class ClientState:
    client_id: int
    rng_seed: int = 0
    params: Optional[ParamVector] = None
    prev_pseudo_grad: Optional[GradSnapshot] = None
    last_pseudo_grad: Optional[GradSnapshot] = None
    local_acc: float = 0.0
    sample_count: int = 1

    def __post_init__(self):
        if not 0.0 <= self.local_acc <= 1.0:
            raise ValueError("local_acc must lie in [0,1]")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if self.params is not None:
            for g in (self.prev_pseudo_grad, self.last_pseudo_grad):
                if g is not None and g.values.shape != self.params.shape:
                    raise ValueError("gradient length does not match params")


@dataclass(frozen=True)
class ClientReport:
    """Scalar summary a client sends ahead of any model transfer."""

    client_id: int
    value: float
    local_acc: float
    sample_count: int
    round_index: int

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError("report value must be finite and non-negative")


@dataclass
class ServerState:
    global_params: ParamVector
    n_clients: int
    round_index: int = 0
    history: tuple[ParamVector, ...] = ()
    history_limit: int = 8

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")


@dataclass
class CommLedger:
    """Model-upload counters: offers (what an ungated run would send) and
    actual uploads. Scalar reports are free and never counted."""

    c_t0: int = 0
    c_t1: int = 0
    per_round: list[tuple[int, int]] = field(default_factory=list)

    def record_offers(self, n: int) -> None:
        if n < 0:
            raise ValueError("offer count must be >= 0")
        self.c_t0 += n

    def record_uploads(self, n: int) -> None:
        if n < 0:
            raise ValueError("upload count must be >= 0")
        self.c_t1 += n
        if self.c_t1 > self.c_t0:
            raise ValueError("uploads exceeded offers")

    def close_round(self) -> None:
        self.per_round.append((self.c_t0, self.c_t1))


def derive_client_seed(master_seed: int, client_id: int) -> int:
    """Stable per-client seed; feeds the [seed, round] streams in client_update."""
    ss = np.random.SeedSequence([int(master_seed), int(client_id)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _grad_values(g) -> np.ndarray:
    vals = g.values if isinstance(g, GradSnapshot) else np.asarray(g, dtype=np.float64)
    return vals


def comm_value(prev_grad, cur_grad, n_clients: int, acc: float) -> float:
    """Score how much a client's local update direction just changed.

    Squared distance between the previous and current gradient snapshots,
    scaled by (1 + n_clients/1000)**acc so accurate clients in large
    federations score a little higher.
    """
    p = _grad_values(prev_grad)
    c = _grad_values(cur_grad)
    if p.shape != c.shape:
        raise ValueError(f"gradient lengths differ: {p.shape} vs {c.shape}")
    if not (np.isfinite(p).all() and np.isfinite(c).all()):
        raise ValueError("gradients must be finite")
    if not 0.0 <= acc <= 1.0:
        raise ValueError("acc must lie in [0,1]")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    diff = p - c
    return float(diff @ diff) * (1.0 + n_clients / 1e3) ** acc


def select_clients(reports: Sequence[ClientReport]) -> set[int]:
    """Clients whose value is at or above the mean over this round's reports."""
    if not reports:
        raise ValueError("no reports to select from")
    mean = float(np.mean([r.value for r in reports]))
    return {r.client_id for r in reports if r.value >= mean}


def aggregate(models: Sequence[ParamVector], sample_counts: Sequence[int]) -> ParamVector:
    """Sample-count-weighted average; weights are normalized to sum to 1."""
    if len(models) == 0:
        raise ValueError("cannot aggregate zero models")
    if len(models) != len(sample_counts):
        raise ValueError("models and sample_counts lengths differ")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    length = models[0].shape
    for m in models[1:]:
        if m.shape != length:
            raise ValueError("model lengths differ")
    weights = counts / counts.sum()
    out = np.zeros_like(models[0])
    for w, m in zip(weights, models):
        out += w * m
    return out


def _advance(server: ServerState, new_params: ParamVector) -> ServerState:
    history = server.history + (server.global_params,)
    if server.history_limit is not None and len(history) > server.history_limit:
        history = history[-server.history_limit :]
    return replace(
        server,
        global_params=new_params,
        round_index=server.round_index + 1,
        history=history,
    )


def server_round(
    server: ServerState,
    reports: Sequence[ClientReport],
    fetch_model: Callable[[int], ParamVector],
    ledger: CommLedger,
) -> ServerState:
    """One value-gated aggregation round.

    Every reporter counts as an offer; models are fetched only for the
    selected set (everyone, in the bootstrap round before any gradient
    history exists). A failed fetch drops that client from this round's
    aggregate rather than aborting.
    """
    ledger.record_offers(len(reports))
    if not reports:
        ledger.close_round()
        return _advance(server, server.global_params)

    if server.round_index == 0:
        selected = {r.client_id for r in reports}
    else:
        selected = select_clients(reports)

    by_id = {r.client_id: r for r in reports}
    models, counts, fetched = [], [], []
    for cid in sorted(selected):
        try:
            params = fetch_model(cid)
        except Exception:
            log.warning("model fetch failed for client %d; skipping", cid, exc_info=True)
            continue
        models.append(params)
        counts.append(by_id[cid].sample_count)
        fetched.append(cid)
    ledger.record_uploads(len(fetched))
    ledger.close_round()

    new_params = aggregate(models, counts) if models else server.global_params
    return _advance(server, new_params)


def afl_round(
    server: ServerState,
    all_models: Sequence[tuple[int, ParamVector, int]],
    ledger: CommLedger,
) -> ServerState:
    """Ungated round: every live client uploads and is averaged in."""
    ordered = sorted(all_models, key=lambda t: t[0])
    ledger.record_offers(len(ordered))
    ledger.record_uploads(len(ordered))
    ledger.close_round()
    if not ordered:
        return _advance(server, server.global_params)
    new_params = aggregate([m for _, m, _ in ordered], [n for _, _, n in ordered])
    return _advance(server, new_params)


def eaflm_round(
    server: ServerState,
    uploads: Sequence[tuple[int, ParamVector, int]],
    n_live: int,
    ledger: CommLedger,
) -> ServerState:
    """Round where clients self-gated: only the passing uploads arrive."""
    if len(uploads) > n_live:
        raise ValueError("more uploads than live clients")
    ordered = sorted(uploads, key=lambda t: t[0])
    ledger.record_offers(n_live)
    ledger.record_uploads(len(ordered))
    ledger.close_round()
    if not ordered:
        return _advance(server, server.global_params)
    new_params = aggregate([m for _, m, _ in ordered], [n for _, _, n in ordered])
    return _advance(server, new_params)


def eaflm_gate(
    cur_grad, param_history: Sequence[ParamVector], cfg: EaflmConfig
) -> bool:
    """True when the client should stay quiet this round.

    Compares the squared gradient norm against the recent movement of the
    received global models, scaled by 1/(alpha^2 * beta * m^2). Until the
    history holds D+1 models there is nothing to compare, so communicate.
    """
    if len(param_history) < cfg.D + 1:
        return False
    g = _grad_values(cur_grad)
    delta = np.zeros_like(param_history[-1])
    for d in range(1, cfg.D + 1):
        delta += cfg.xi[d - 1] * (param_history[-d] - param_history[-d - 1])
    threshold = float(delta @ delta) / (cfg.alpha**2 * cfg.beta * cfg.m**2)
    return float(g @ g) <= threshold


def client_update(
    state: ClientState,
    global_params: ParamVector,
    partition: Partition,
    eval_set: Dataset,
    hp: HyperParams,
    model: ModelSpec,
    n_clients: int,
    round_index: int,
    grad_strategy: str = "pseudo",
) -> tuple[ClientState, ClientReport]:
    """Local training pass: adopt the global model, run capped mini-batch
    SGD, measure accuracy, and score the communication value.

    The update direction used for scoring is either the pseudo-gradient
    (parameter displacement over the whole pass divided by the step size)
    or the raw gradient of the final mini-batch.
    """
    if grad_strategy not in GRAD_STRATEGIES:
        raise ValueError(f"grad_strategy must be one of {GRAD_STRATEGIES}")
    if global_params.shape[0] != model.param_count:
        raise ValueError(
            f"global model has {global_params.shape[0]} parameters, spec wants {model.param_count}"
        )

    train = partition.train
    n = len(train)
    before = np.array(global_params, dtype=np.float64, copy=True)
    params = before.copy()
    rng = np.random.default_rng([state.rng_seed, round_index])
    last_batch_grad = None

    for _ in range(hp.local_epochs):
        perm = rng.permutation(n)
        steps = min(hp.local_rounds, -(-n // hp.batch_size))
        for s in range(steps):
            idx = perm[s * hp.batch_size : (s + 1) * hp.batch_size]
            batch = Batch(train.images[idx], train.labels[idx])
            _, grad = loss_and_grad(model, params, batch)
            params = sgd_step(params, grad, hp.learning_rate)
            last_batch_grad = grad

    if hp.learning_rate == 0.0:
        pseudo = np.zeros_like(params)
    else:
        pseudo = (before - params) / hp.learning_rate

    if grad_strategy == "pseudo":
        cur = GradSnapshot(pseudo, round_index)
    else:
        cur = GradSnapshot(last_batch_grad.values, round_index)

    prev = state.last_pseudo_grad
    prev_values = prev.values if prev is not None else np.zeros_like(cur.values)
    acc = evaluate_accuracy(model, params, eval_set)
    value = comm_value(prev_values, cur.values, n_clients, acc)

    new_state = replace(
        state,
        params=params,
        prev_pseudo_grad=prev,
        last_pseudo_grad=cur,
        local_acc=acc,
        sample_count=n,
    )
    report = ClientReport(
        client_id=state.client_id,
        value=value,
        local_acc=acc,
        sample_count=n,
        round_index=round_index,
    )
    return new_state, report
