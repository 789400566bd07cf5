"""Participant side of the TCP mode.

A client owns its private partition plus the shared eval split, both
carried in a bundle file the coordinator writes ahead of time. The loop
is single-threaded and entirely server-driven: train on each GLOBAL_MODEL,
answer with a REPORT, surrender the trained model only when asked, and
exit once a ROUND_DONE arrives with the terminal flag set.
"""

from __future__ import annotations

import json
import logging
import socket
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..data import Dataset, Partition
from ..nn import DivergenceError, ModelSpec
from ..protocol import (
    ClientState,
    EaflmConfig,
    HyperParams,
    client_update,
    eaflm_gate,
)
from .frames import (
    FrameError,
    MSG_ERROR,
    MSG_GLOBAL_MODEL,
    MSG_MODEL_REQUEST,
    MSG_ROUND_DONE,
    decode_error,
    decode_global_model,
    decode_model_request,
    decode_round_done,
    encode_error,
    encode_hello,
    encode_model_upload,
    encode_report,
    read_frame,
    write_frame,
)

log = logging.getLogger(__name__)


@dataclass
class ClientBundle:
    """Everything one participant needs to join a run."""

    client_id: int
    n_clients: int
    rng_seed: int
    layer_sizes: tuple[int, ...]
    hp: HyperParams
    algorithm: str
    grad_strategy: str
    eaflm: Optional[EaflmConfig]
    partition: Partition
    eval_set: Dataset

    def __post_init__(self):
        if not 0 <= self.client_id < self.n_clients:
            raise ValueError("client_id must lie in [0, n_clients)")
        if self.partition.client_id != self.client_id:
            raise ValueError("partition belongs to a different client")


def save_bundle(path: str, bundle: ClientBundle) -> None:
    meta = {
        "client_id": bundle.client_id,
        "n_clients": bundle.n_clients,
        "rng_seed": bundle.rng_seed,
        "layer_sizes": list(bundle.layer_sizes),
        "hp": {
            "local_rounds": bundle.hp.local_rounds,
            "local_epochs": bundle.hp.local_epochs,
            "batch_size": bundle.hp.batch_size,
            "learning_rate": bundle.hp.learning_rate,
            "total_rounds": bundle.hp.total_rounds,
        },
        "algorithm": bundle.algorithm,
        "grad_strategy": bundle.grad_strategy,
        "eaflm": None
        if bundle.eaflm is None
        else {
            "alpha": bundle.eaflm.alpha,
            "beta": bundle.eaflm.beta,
            "m": bundle.eaflm.m,
            "D": bundle.eaflm.D,
            "xi": list(bundle.eaflm.xi),
        },
    }
    with open(path, "wb") as f:
        np.savez_compressed(
            f,
            meta=np.array(json.dumps(meta)),
            train_images=bundle.partition.train.images,
            train_labels=bundle.partition.train.labels,
            eval_images=bundle.eval_set.images,
            eval_labels=bundle.eval_set.labels,
        )


def load_bundle(path: str) -> ClientBundle:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive["meta"].item())
        train = Dataset(archive["train_images"], archive["train_labels"])
        eval_set = Dataset(archive["eval_images"], archive["eval_labels"])
    eaflm = meta["eaflm"]
    return ClientBundle(
        client_id=meta["client_id"],
        n_clients=meta["n_clients"],
        rng_seed=meta["rng_seed"],
        layer_sizes=tuple(meta["layer_sizes"]),
        hp=HyperParams(**meta["hp"]),
        algorithm=meta["algorithm"],
        grad_strategy=meta["grad_strategy"],
        eaflm=None
        if eaflm is None
        else EaflmConfig(
            alpha=eaflm["alpha"],
            beta=eaflm["beta"],
            m=eaflm["m"],
            D=eaflm["D"],
            xi=tuple(eaflm["xi"]),
        ),
        partition=Partition(meta["client_id"], train),
        eval_set=eval_set,
    )


def _connect(server_addr, retries: int, backoff: float) -> socket.socket:
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return socket.create_connection(server_addr)
        except OSError as exc:
            last = exc
            if attempt < retries:
                time.sleep(backoff * (2**attempt))
    raise ConnectionError(f"could not reach {server_addr}: {last}")


def client_main(
    server_addr,
    bundle: ClientBundle,
    *,
    connect_retries: int = 4,
    backoff: float = 0.25,
) -> int:
    """Join a run and serve it to completion. Returns a process-style
    status: 0 after a terminal ROUND_DONE, nonzero on any failure.

    The connection is retried with exponential backoff only while first
    reaching the server; a session that drops mid-run is not resumed.
    """
    model = ModelSpec(bundle.layer_sizes)
    ecfg = bundle.eaflm if bundle.eaflm is not None else EaflmConfig(m=float(bundle.n_clients))
    state = ClientState(bundle.client_id, rng_seed=bundle.rng_seed)
    received: list[np.ndarray] = []
    last_trained: Optional[np.ndarray] = None
    last_round = -1

    try:
        sock = _connect(server_addr, connect_retries, backoff)
    except ConnectionError as exc:
        log.error("client %d: %s", bundle.client_id, exc)
        return 1

    try:
        write_frame(sock, encode_hello(bundle.client_id))
        while True:
            frame = read_frame(sock)
            if frame.msg_type == MSG_GLOBAL_MODEL:
                round_index, addressee, params = decode_global_model(frame)
                if addressee != bundle.client_id:
                    write_frame(sock, encode_error("model addressed to another client"))
                    return 1
                if params.shape[0] != model.param_count:
                    write_frame(
                        sock,
                        encode_error(
                            f"expected {model.param_count} parameters, got {params.shape[0]}"
                        ),
                    )
                    return 1
                received.append(params)
                if len(received) > ecfg.D + 1:
                    del received[0]
                try:
                    state, report = client_update(
                        state,
                        params,
                        bundle.partition,
                        bundle.eval_set,
                        bundle.hp,
                        model,
                        bundle.n_clients,
                        round_index,
                        bundle.grad_strategy,
                    )
                except DivergenceError as exc:
                    write_frame(sock, encode_error(f"training diverged: {exc}"))
                    return 1
                upload_ok = True
                if bundle.algorithm == "eaflm":
                    upload_ok = not eaflm_gate(state.last_pseudo_grad, received, ecfg)
                last_trained = state.params
                last_round = round_index
                write_frame(sock, encode_report(report, upload_ok))
            elif frame.msg_type == MSG_MODEL_REQUEST:
                round_index, addressee = decode_model_request(frame)
                if last_trained is None or round_index != last_round:
                    write_frame(
                        sock, encode_error(f"no trained model for round {round_index}")
                    )
                    return 1
                write_frame(
                    sock,
                    encode_model_upload(round_index, bundle.client_id, last_trained),
                )
            elif frame.msg_type == MSG_ROUND_DONE:
                _, _, terminal = decode_round_done(frame)
                if terminal:
                    return 0
            elif frame.msg_type == MSG_ERROR:
                log.error(
                    "client %d: server error: %s", bundle.client_id, decode_error(frame)
                )
                return 1
            else:
                write_frame(
                    sock, encode_error(f"unexpected message 0x{frame.msg_type:02x}")
                )
                return 1
    except (FrameError, OSError) as exc:
        log.error("client %d: connection lost: %s", bundle.client_id, exc)
        return 1
    finally:
        sock.close()
