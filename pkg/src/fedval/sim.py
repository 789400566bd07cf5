"""Tick-time simulator of a heterogeneous client fleet.

Clients differ in compute speed, network delay, and dropout chance. Each
round the server hands the current model to every idle client, waits for
their scalar reports (all of them, or until the round deadline when one is
configured), and aggregates per the configured algorithm. A client that
misses the deadline stays busy and its stale report lands in a later round,
which is how device heterogeneity turns into staleness here.

Model transfers are counted by the CommLedger: under vafl the server pulls
models only from selected clients (a separate fetch after the reports);
under afl and eaflm the model rides along with the report, gated client-side
in the eaflm case. Everything is driven by seeded generators, so a config
plus seed pins the entire run byte for byte.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import (
    Dataset,
    Partition,
    SkewConfig,
    make_iid_plan,
    make_noniid_plan,
    materialize,
    plan_to_json,
    shared_eval_split,
)
from .metrics import ccr
from .nn import DivergenceError, ModelSpec, evaluate_accuracy, init_params
from .protocol import (
    GRAD_STRATEGIES,
    ClientState,
    CommLedger,
    EaflmConfig,
    HyperParams,
    ServerState,
    afl_round,
    client_update,
    derive_client_seed,
    eaflm_gate,
    eaflm_round,
    server_round,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("afl", "vafl", "eaflm")
DATA_MODES = ("iid", "noniid")
EVENT_KINDS = ("report_arrival", "model_arrival", "round_trigger", "client_dropout")
_KIND_RANK = {k: i for i, k in enumerate(EVENT_KINDS)}

# rng stream tags so enabling one noise source never shifts another
_STREAM_LATENCY = 5
_STREAM_DROPOUT = 6
_STREAM_FETCH = 7


@dataclass(frozen=True)
class DistSpec:
    """One scalar delay distribution: fixed(a), uniform(a,b), or lognormal(a,b)."""

    kind: str
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("distribution parameters must be finite")
        if self.kind == "uniform" and self.a > self.b:
            raise ValueError("uniform needs lo <= hi")
        if self.kind == "fixed" and self.a < 0:
            raise ValueError("fixed delay must be >= 0")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        return float(rng.lognormal(self.a, self.b))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, rec: dict) -> "DistSpec":
        return cls(rec["kind"], rec.get("a", 0.0), rec.get("b", 0.0))


@dataclass(frozen=True)
class ClientProfile:
    compute: DistSpec
    network: DistSpec
    dropout_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0,1)")

    def to_dict(self) -> dict:
        return {
            "compute": self.compute.to_dict(),
            "network": self.network.to_dict(),
            "dropout_prob": self.dropout_prob,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "ClientProfile":
        return cls(
            DistSpec.from_dict(rec["compute"]),
            DistSpec.from_dict(rec["network"]),
            rec.get("dropout_prob", 0.0),
        )


@dataclass(frozen=True)
class LatencyModel:
    profiles: tuple[ClientProfile, ...]

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))

    def for_client(self, client_id: int) -> ClientProfile:
        if not 0 <= client_id < len(self.profiles):
            raise IndexError(f"no profile for client {client_id}")
        return self.profiles[client_id]

    @classmethod
    def fixed_fleet(
        cls, n: int, compute_ticks: float = 0.0, network_ticks: float = 0.0, dropout: float = 0.0
    ) -> "LatencyModel":
        """Every client identical; the degenerate all-zeros fleet is the
        synchronous baseline the simulator must not perturb."""
        profile = ClientProfile(
            DistSpec("fixed", compute_ticks), DistSpec("fixed", network_ticks), dropout
        )
        return cls((profile,) * n)

    @classmethod
    def staircase(
        cls, n: int, base: float = 1.0, step: float = 0.5, network: float = 0.25, dropout: float = 0.0
    ) -> "LatencyModel":
        """Client i computes in base + i*step ticks: a simple speed ladder."""
        return cls(
            tuple(
                ClientProfile(
                    DistSpec("fixed", base + i * step), DistSpec("fixed", network), dropout
                )
                for i in range(n)
            )
        )

    def to_dict(self) -> dict:
        return {"profiles": [p.to_dict() for p in self.profiles]}

    @classmethod
    def from_dict(cls, rec: dict) -> "LatencyModel":
        return cls(tuple(ClientProfile.from_dict(p) for p in rec["profiles"]))


@dataclass(frozen=True)
class SimEvent:
    """One timeline entry; client_id -1 marks server-side events."""

    time: float
    kind: str
    client_id: int
    round_index: int

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("event time must be >= 0")
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    @property
    def sort_key(self):
        return (self.time, _KIND_RANK[self.kind], self.client_id, self.round_index)


@dataclass
class ExperimentConfig:
    experiment: str = "custom"
    n_clients: int = 3
    data_mode: str = "iid"
    algorithm: str = "vafl"
    hp: HyperParams = field(default_factory=HyperParams)
    latency: Optional[LatencyModel] = None
    seed: int = 0
    target_acc: Optional[float] = None
    per_client_count: int = 2000
    skew: Optional[SkewConfig] = None
    eval_count: int = 1000
    layer_sizes: tuple[int, ...] = (784, 128, 10)
    eaflm: Optional[EaflmConfig] = None
    grad_strategy: str = "pseudo"
    deadline_ticks: Optional[float] = None
    history_limit: int = 8

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.data_mode not in DATA_MODES:
            raise ValueError(f"data_mode must be one of {DATA_MODES}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.grad_strategy not in GRAD_STRATEGIES:
            raise ValueError(f"grad_strategy must be one of {GRAD_STRATEGIES}")
        if self.latency is None:
            self.latency = LatencyModel.fixed_fleet(self.n_clients)
        if len(self.latency.profiles) != self.n_clients:
            raise ValueError(
                f"latency model covers {len(self.latency.profiles)} clients, "
                f"config has {self.n_clients}"
            )
        if self.data_mode == "noniid":
            if self.skew is None:
                raise ValueError("noniid mode needs a skew config")
            if len(self.skew.sample_counts) != self.n_clients:
                raise ValueError("skew config does not cover every client")
        elif self.per_client_count < 1:
            raise ValueError("per_client_count must be >= 1")
        if self.target_acc is not None and not 0.0 <= self.target_acc <= 1.0:
            raise ValueError("target_acc must lie in [0,1]")
        if self.deadline_ticks is not None and self.deadline_ticks <= 0:
            raise ValueError("deadline_ticks must be positive")
        self.layer_sizes = tuple(int(x) for x in self.layer_sizes)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "n_clients": self.n_clients,
            "data_mode": self.data_mode,
            "algorithm": self.algorithm,
            "hp": {
                "local_rounds": self.hp.local_rounds,
                "local_epochs": self.hp.local_epochs,
                "batch_size": self.hp.batch_size,
                "learning_rate": self.hp.learning_rate,
                "total_rounds": self.hp.total_rounds,
            },
            "latency": self.latency.to_dict(),
            "seed": self.seed,
            "target_acc": self.target_acc,
            "per_client_count": self.per_client_count,
            "skew": None
            if self.skew is None
            else {
                "label_set_sizes": list(self.skew.label_set_sizes),
                "sample_counts": list(self.skew.sample_counts),
                "allow_replacement": self.skew.allow_replacement,
            },
            "eval_count": self.eval_count,
            "layer_sizes": list(self.layer_sizes),
            "eaflm": None
            if self.eaflm is None
            else {
                "alpha": self.eaflm.alpha,
                "beta": self.eaflm.beta,
                "m": self.eaflm.m,
                "D": self.eaflm.D,
                "xi": list(self.eaflm.xi),
            },
            "grad_strategy": self.grad_strategy,
            "deadline_ticks": self.deadline_ticks,
            "history_limit": self.history_limit,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "ExperimentConfig":
        skew = rec.get("skew")
        eaflm = rec.get("eaflm")
        return cls(
            experiment=rec.get("experiment", "custom"),
            n_clients=rec["n_clients"],
            data_mode=rec["data_mode"],
            algorithm=rec["algorithm"],
            hp=HyperParams(**rec.get("hp", {})),
            latency=LatencyModel.from_dict(rec["latency"]) if rec.get("latency") else None,
            seed=rec.get("seed", 0),
            target_acc=rec.get("target_acc"),
            per_client_count=rec.get("per_client_count", 2000),
            skew=None
            if skew is None
            else SkewConfig(
                tuple(skew["label_set_sizes"]),
                tuple(skew["sample_counts"]),
                skew.get("allow_replacement", False),
            ),
            eval_count=rec.get("eval_count", 1000),
            layer_sizes=tuple(rec.get("layer_sizes", (784, 128, 10))),
            eaflm=None if eaflm is None else EaflmConfig(**eaflm),
            grad_strategy=rec.get("grad_strategy", "pseudo"),
            deadline_ticks=rec.get("deadline_ticks"),
            history_limit=rec.get("history_limit", 8),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RoundRow:
    round_index: int
    test_acc: float
    selected_ids: tuple[int, ...]
    c_t0: int
    c_t1: int


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[RoundRow]
    initial_acc: float
    ledger: CommLedger
    events: list[SimEvent]
    selection_log: list[dict]
    stopped_early: bool = False
    diverged: bool = False
    diagnostic: str = ""
    plan_digest: str = ""
    theta0_digest: str = ""
    final_params: Optional[np.ndarray] = None

    @property
    def final_acc(self) -> float:
        return self.rows[-1].test_acc if self.rows else self.initial_acc

    def to_csv_text(self) -> str:
        lines = ["round,test_acc,selected_ids,c_t0,c_t1"]
        for r in self.rows:
            ids = ";".join(str(c) for c in r.selected_ids)
            lines.append(f"{r.round_index},{r.test_acc!r},{ids},{r.c_t0},{r.c_t1}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        c0, c1 = self.ledger.c_t0, self.ledger.c_t1
        target = self.config.target_acc
        return {
            "experiment": self.config.experiment,
            "algorithm": self.config.algorithm,
            "seed": self.config.seed,
            "rounds_run": len(self.rows),
            "initial_acc": self.initial_acc,
            "final_acc": self.final_acc,
            "c_t0": c0,
            "c_t1": c1,
            "ccr": ccr(c0, c1) if c0 else 0.0,
            "target_acc": target,
            "comms_to_target": None
            if target is None
            else communications_to_target(self, target),
            "stopped_early": self.stopped_early,
            "diverged": self.diverged,
            "diagnostic": self.diagnostic,
            "plan_digest": self.plan_digest,
            "theta0_digest": self.theta0_digest,
            "config": self.config.to_dict(),
        }


def communications_to_target(result: RunResult, target: float) -> Optional[int]:
    """Uploads on the books when test accuracy first reached target; None if never."""
    if result.initial_acc >= target:
        return 0
    for row in result.rows:
        if row.test_acc >= target:
            return row.c_t1
    return None


@dataclass
class _Slot:
    """Mutable per-client bookkeeping the event loop tracks between rounds."""

    state: ClientState
    partition: Partition
    busy: bool = False
    received: list = field(default_factory=list)


@dataclass(frozen=True)
class _Arrival:
    client_id: int
    computed_round: int
    report: object
    params: np.ndarray
    upload_ok: bool


def build_plan(cfg: ExperimentConfig, pool: Dataset):
    """Partition plan for a config; the TCP mode uses the same one."""
    if cfg.data_mode == "iid":
        return make_iid_plan(pool, cfg.n_clients, cfg.per_client_count, cfg.seed)
    return make_noniid_plan(pool, cfg.n_clients, cfg.skew, cfg.seed)


def default_dataset_size(cfg: ExperimentConfig) -> int:
    """Smallest comfortable dataset for the config's partition plan."""
    if cfg.data_mode == "iid":
        need = cfg.n_clients * cfg.per_client_count
    else:
        per_label_need = max(
            -(-10 * count // size)
            for size, count in zip(cfg.skew.label_set_sizes, cfg.skew.sample_counts)
        )
        need = max(sum(cfg.skew.sample_counts), per_label_need)
    return need + cfg.eval_count


def run_experiment(cfg: ExperimentConfig, dataset: Dataset, n_workers: int = 1) -> RunResult:
    """Drive one full federated run and return its trace.

    Deterministic for a given (cfg, dataset): partition plan, initial model,
    client streams, and all latency draws derive from cfg.seed. Raising
    n_workers fans client updates out to threads without changing any output.
    """
    model = ModelSpec(cfg.layer_sizes)
    eval_set, pool = shared_eval_split(dataset, cfg.eval_count / len(dataset), cfg.seed)
    plan = build_plan(cfg, pool)
    partitions = {p.client_id: p for p in materialize(plan, pool)}

    theta0 = init_params(model, cfg.seed)
    plan_digest = hashlib.sha256(plan_to_json(plan).encode()).hexdigest()[:16]
    theta0_digest = hashlib.sha256(theta0.tobytes()).hexdigest()[:16]
    initial_acc = evaluate_accuracy(model, theta0, eval_set)

    server = ServerState(theta0, cfg.n_clients, history_limit=cfg.history_limit)
    ledger = CommLedger()
    eaflm_cfg = cfg.eaflm if cfg.eaflm is not None else EaflmConfig(m=float(cfg.n_clients))
    slots = {
        cid: _Slot(
            ClientState(cid, rng_seed=derive_client_seed(cfg.seed, cid)),
            partitions[cid],
        )
        for cid in range(cfg.n_clients)
    }

    pending: list = []  # heap of (time, kind_rank, client_id, round, _Arrival)
    events: list[SimEvent] = []
    rows: list[RoundRow] = []
    selection_log: list[dict] = []
    now = 0.0
    stopped_early = diverged = False
    diagnostic = ""

    for k in range(cfg.hp.total_rounds):
        t_round = now
        round_events: list[SimEvent] = []

        starters = []
        for cid in range(cfg.n_clients):
            slot = slots[cid]
            if slot.busy:
                continue
            profile = cfg.latency.for_client(cid)
            if profile.dropout_prob > 0.0:
                drop_rng = np.random.default_rng([cfg.seed, _STREAM_DROPOUT, cid, k])
                if drop_rng.uniform() < profile.dropout_prob:
                    round_events.append(SimEvent(t_round, "client_dropout", cid, k))
                    continue
            starters.append(cid)

        def local_pass(cid):
            slot = slots[cid]
            return client_update(
                slot.state,
                server.global_params,
                slot.partition,
                eval_set,
                cfg.hp,
                model,
                cfg.n_clients,
                k,
                cfg.grad_strategy,
            )

        try:
            if n_workers > 1 and len(starters) > 1:
                with ThreadPoolExecutor(max_workers=n_workers) as pool_ex:
                    outs = list(pool_ex.map(local_pass, starters))
            else:
                outs = [local_pass(cid) for cid in starters]
        except DivergenceError as exc:
            diverged = True
            diagnostic = f"training diverged in round {k + 1}: {exc}"
            events.extend(sorted(round_events, key=lambda e: e.sort_key))
            break

        for cid, (new_state, rep) in zip(starters, outs):
            slot = slots[cid]
            slot.received.append(server.global_params)
            if len(slot.received) > eaflm_cfg.D + 1:
                del slot.received[0]
            upload_ok = True
            if cfg.algorithm == "eaflm":
                upload_ok = not eaflm_gate(
                    new_state.last_pseudo_grad, slot.received, eaflm_cfg
                )
            slot.state = new_state
            slot.busy = True
            profile = cfg.latency.for_client(cid)
            lat_rng = np.random.default_rng([cfg.seed, _STREAM_LATENCY, cid, k])
            arrive = t_round + profile.compute.sample(lat_rng) + profile.network.sample(lat_rng)
            heapq.heappush(
                pending,
                (
                    arrive,
                    _KIND_RANK["report_arrival"],
                    cid,
                    k,
                    _Arrival(cid, k, rep, new_state.params, upload_ok),
                ),
            )

        if cfg.deadline_ticks is not None:
            barrier = t_round + cfg.deadline_ticks
        else:
            barrier = max((item[0] for item in pending), default=t_round)

        arrived: list[_Arrival] = []
        while pending and pending[0][0] <= barrier:
            time_, _, cid, computed_round, payload = heapq.heappop(pending)
            arrived.append(payload)
            round_events.append(SimEvent(time_, "report_arrival", cid, computed_round))
            slots[cid].busy = False
        round_events.append(SimEvent(barrier, "round_trigger", -1, k))
        arrived.sort(key=lambda a: a.client_id)

        round_end = barrier
        if cfg.algorithm == "vafl":
            trained = {a.client_id: a.params for a in arrived}
            fetched: list[int] = []

            def fetch(cid):
                fetched.append(cid)
                return trained[cid]

            server = server_round(server, [a.report for a in arrived], fetch, ledger)
            for cid in fetched:
                fetch_rng = np.random.default_rng([cfg.seed, _STREAM_FETCH, cid, k])
                t_model = barrier + cfg.latency.for_client(cid).network.sample(fetch_rng)
                round_events.append(SimEvent(t_model, "model_arrival", cid, k))
                round_end = max(round_end, t_model)
            selected = tuple(sorted(fetched))
        elif cfg.algorithm == "afl":
            triples = [(a.client_id, a.params, a.report.sample_count) for a in arrived]
            server = afl_round(server, triples, ledger)
            selected = tuple(a.client_id for a in arrived)
        else:
            ups = [
                (a.client_id, a.params, a.report.sample_count)
                for a in arrived
                if a.upload_ok
            ]
            server = eaflm_round(server, ups, n_live=len(arrived), ledger=ledger)
            selected = tuple(cid for cid, _, _ in ups)

        try:
            test_acc = evaluate_accuracy(model, server.global_params, eval_set)
        except DivergenceError as exc:
            diverged = True
            diagnostic = f"global model diverged after round {k + 1}: {exc}"
            events.extend(sorted(round_events, key=lambda e: e.sort_key))
            break

        events.extend(sorted(round_events, key=lambda e: e.sort_key))
        rows.append(RoundRow(k + 1, test_acc, selected, ledger.c_t0, ledger.c_t1))
        selection_log.append(
            {
                "round": k + 1,
                "reporters": [(a.client_id, a.computed_round + 1) for a in arrived],
                "selected": list(selected),
            }
        )
        now = round_end

        if cfg.target_acc is not None and test_acc >= cfg.target_acc:
            stopped_early = True
            break

    return RunResult(
        config=cfg,
        rows=rows,
        initial_acc=initial_acc,
        ledger=ledger,
        events=events,
        selection_log=selection_log,
        stopped_early=stopped_early,
        diverged=diverged,
        diagnostic=diagnostic,
        plan_digest=plan_digest,
        theta0_digest=theta0_digest,
        final_params=server.global_params,
    )


# Preset c keeps the lopsided sample counts of the stock 3-client skew but
# widens the two narrow label sets.  With only three participants a client
# holding two labels gets picked alone often enough to stall the run near
# chance: its update erases the classes it has never seen, and the mean
# threshold keeps excluding the one full-coverage client whose gradients are
# the most stable.  Eight and six labels leave the federation lopsided while
# keeping every class reachable from at least two clients.
_PRESET_SKEWS = {
    "c": SkewConfig((10, 8, 6), (20000, 12000, 4000), allow_replacement=True),
    "d": SkewConfig(
        (10, 10, 7, 5, 4, 2, 1),
        (10000, 9000, 8000, 6000, 4000, 2500, 1500),
        allow_replacement=True,
    ),
}


def preset(name: str) -> ExperimentConfig:
    """The four stock experiments: a=3/iid, b=7/iid, c=3/noniid, d=7/noniid."""
    if name not in ("a", "b", "c", "d"):
        raise ValueError(f"unknown preset {name!r}")
    n = 3 if name in ("a", "c") else 7
    mode = "iid" if name in ("a", "b") else "noniid"
    return ExperimentConfig(
        experiment=name,
        n_clients=n,
        data_mode=mode,
        algorithm="vafl",
        hp=HyperParams(),
        latency=LatencyModel.staircase(n, base=1.0, step=0.5, network=0.25),
        seed=0,
        target_acc=0.94,
        per_client_count=20000 if n == 3 else 10000,
        skew=_PRESET_SKEWS.get(name),
        eval_count=1000,
    )
