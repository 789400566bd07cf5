"""Coordinator side of the TCP mode.

One handler thread per connection decodes frames and pushes them onto a
single queue; the coordinator thread alone touches federation state, so
rounds are serialized exactly as in the simulator. Model uploads happen
only on request, which keeps the ledger's upload count equal to the
number of MODEL_UPLOAD frames on the wire.

A client that disconnects or breaks protocol is dropped for good: the
round it vanished from treats it as a dropout and later rounds no longer
address it. There is no resume.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..data import Dataset, materialize, plan_to_json, shared_eval_split
from ..nn import DivergenceError, ModelSpec, evaluate_accuracy, init_params
from ..protocol import (
    ClientReport,
    CommLedger,
    ServerState,
    afl_round,
    derive_client_seed,
    eaflm_round,
    server_round,
)
from ..sim import ExperimentConfig, RoundRow, RunResult, build_plan
from .client import ClientBundle
from .frames import (
    FrameError,
    MSG_ERROR,
    MSG_MODEL_UPLOAD,
    MSG_REPORT,
    decode_error,
    decode_hello,
    decode_model_upload,
    decode_report,
    encode_error,
    encode_global_model,
    encode_model_request,
    encode_round_done,
    read_frame,
    write_frame,
)

log = logging.getLogger(__name__)


def make_bundles(
    cfg: ExperimentConfig, dataset: Dataset
) -> tuple[Dataset, dict[int, ClientBundle], str]:
    """Split and partition a dataset exactly as the simulator would.

    Returns the shared eval set, one bundle per client, and the partition
    plan digest, so a wire run is comparable to a simulator run of the
    same config seed for seed.
    """
    eval_set, pool = shared_eval_split(dataset, cfg.eval_count / len(dataset), cfg.seed)
    plan = build_plan(cfg, pool)
    partitions = {p.client_id: p for p in materialize(plan, pool)}
    plan_digest = hashlib.sha256(plan_to_json(plan).encode()).hexdigest()[:16]
    bundles = {
        cid: ClientBundle(
            client_id=cid,
            n_clients=cfg.n_clients,
            rng_seed=derive_client_seed(cfg.seed, cid),
            layer_sizes=cfg.layer_sizes,
            hp=cfg.hp,
            algorithm=cfg.algorithm,
            grad_strategy=cfg.grad_strategy,
            eaflm=cfg.eaflm,
            partition=partitions[cid],
            eval_set=eval_set,
        )
        for cid in range(cfg.n_clients)
    }
    return eval_set, bundles, plan_digest


@dataclass
class _Session:
    client_id: int
    sock: socket.socket
    alive: bool = True
    # Last round whose GLOBAL_MODEL went out on this connection. Written
    # by the coordinator before the send, read by the handler when a
    # REPORT comes back, so the happens-before is carried by the socket.
    sent_round: int = -1
    lock: threading.Lock = field(default_factory=threading.Lock)

    def shut(self) -> None:
        with self.lock:
            if not self.alive:
                return
            self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass

    def refuse(self, message: str) -> None:
        try:
            write_frame(self.sock, encode_error(message))
        except OSError:
            pass
        self.shut()


def _handler(session: _Session, inbox: queue.Queue) -> None:
    cid = session.client_id
    try:
        while True:
            frame = read_frame(session.sock)
            if frame.msg_type == MSG_REPORT:
                report, upload_ok = decode_report(frame)
                if report.client_id != cid:
                    session.refuse("report carries another client's id")
                    break
                if report.round_index > session.sent_round:
                    session.refuse("report sent before that round's global model")
                    break
                inbox.put((cid, "report", (report, upload_ok)))
            elif frame.msg_type == MSG_MODEL_UPLOAD:
                round_index, sender, params = decode_model_upload(frame)
                if sender != cid:
                    session.refuse("upload carries another client's id")
                    break
                inbox.put((cid, "upload", (round_index, params)))
            elif frame.msg_type == MSG_ERROR:
                log.warning("client %d reported: %s", cid, decode_error(frame))
                session.shut()
                break
            else:
                session.refuse(f"unexpected message 0x{frame.msg_type:02x}")
                break
    except (FrameError, ValueError) as exc:
        session.refuse(f"malformed frame: {exc}")
    except OSError:
        session.shut()
    inbox.put((cid, "gone", None))


def _refuse_stragglers(lsock: socket.socket) -> None:
    while True:
        try:
            conn, _ = lsock.accept()
        except OSError:
            return
        try:
            write_frame(conn, encode_error("federation is full"))
        except OSError:
            pass
        conn.close()


def serve(
    bind_addr,
    cfg: ExperimentConfig,
    eval_set: Dataset,
    *,
    on_bound: Optional[Callable[[tuple], None]] = None,
    io_timeout: Optional[float] = None,
    plan_digest: str = "",
) -> RunResult:
    """Drive a full run over live connections and return its trace.

    Blocks until cfg.n_clients distinct HELLOs arrive, then loops: send
    every live client the global model, wait for all their reports, fetch
    models per the configured algorithm, evaluate, repeat. Stops at the
    target accuracy or after hp.total_rounds, then tells every client the
    run is over. io_timeout bounds each wait on the inbox; a client that
    stays silent past it is dropped.
    """
    model = ModelSpec(cfg.layer_sizes)
    theta0 = init_params(model, cfg.seed)
    initial_acc = evaluate_accuracy(model, theta0, eval_set)
    server = ServerState(theta0, cfg.n_clients, history_limit=cfg.history_limit)
    ledger = CommLedger()
    rows: list[RoundRow] = []
    selection_log: list[dict] = []
    stopped_early = diverged = False
    diagnostic = ""

    inbox: queue.Queue = queue.Queue()
    sessions: dict[int, _Session] = {}

    lsock = socket.create_server(bind_addr)
    if on_bound is not None:
        on_bound(lsock.getsockname())

    try:
        while len(sessions) < cfg.n_clients:
            conn, peer = lsock.accept()
            try:
                hello = read_frame(conn)
                cid = decode_hello(hello)
            except FrameError as exc:
                _Session(-1, conn).refuse(f"malformed handshake: {exc}")
                continue
            except OSError:
                conn.close()
                continue
            if not 0 <= cid < cfg.n_clients:
                _Session(cid, conn).refuse(f"client id {cid} out of range")
                continue
            if cid in sessions:
                _Session(cid, conn).refuse(f"client id {cid} already connected")
                continue
            session = _Session(cid, conn)
            sessions[cid] = session
            threading.Thread(
                target=_handler, args=(session, inbox), daemon=True
            ).start()
        threading.Thread(target=_refuse_stragglers, args=(lsock,), daemon=True).start()

        def kill(cid: int, reason: str) -> None:
            log.warning("dropping client %d: %s", cid, reason)
            sessions[cid].refuse(reason)

        def fetch_from(cid: int, round_index: int) -> np.ndarray:
            session = sessions[cid]
            if not session.alive:
                raise ConnectionError(f"client {cid} is gone")
            try:
                write_frame(
                    session.sock, encode_model_request(round_index, cid)
                )
            except OSError as exc:
                session.shut()
                raise ConnectionError(f"client {cid} unreachable") from exc
            while True:
                try:
                    sender, tag, body = inbox.get(timeout=io_timeout)
                except queue.Empty:
                    kill(cid, "model upload timed out")
                    raise ConnectionError(f"client {cid} timed out")
                if sender != cid:
                    # Nobody else should be talking during a fetch.
                    if tag != "gone":
                        kill(sender, "spoke out of turn during a model fetch")
                    continue
                if tag == "gone":
                    raise ConnectionError(f"client {cid} disconnected mid-fetch")
                if tag == "upload":
                    up_round, params = body
                    if up_round != round_index:
                        kill(cid, "upload for the wrong round")
                        raise ConnectionError(f"client {cid} sent a stale model")
                    if params.shape[0] != model.param_count:
                        kill(cid, "upload with the wrong parameter count")
                        raise ConnectionError(f"client {cid} sent a malformed model")
                    return params
                kill(cid, "expected a model upload")
                raise ConnectionError(f"client {cid} broke protocol")

        last_k = 0
        for k in range(cfg.hp.total_rounds):
            last_k = k
            live = sorted(cid for cid, s in sessions.items() if s.alive)
            if not live:
                diagnostic = "all clients disconnected"
                break
            for cid in live:
                session = sessions[cid]
                session.sent_round = k
                try:
                    write_frame(
                        session.sock,
                        encode_global_model(k, cid, server.global_params),
                    )
                except OSError:
                    session.shut()

            expected = {cid for cid in live if sessions[cid].alive}
            reports: dict[int, ClientReport] = {}
            upload_oks: dict[int, bool] = {}
            while expected:
                try:
                    sender, tag, body = inbox.get(timeout=io_timeout)
                except queue.Empty:
                    for cid in sorted(expected):
                        kill(cid, "report timed out")
                    break
                if tag == "gone":
                    expected.discard(sender)
                    continue
                if tag == "report":
                    report, upload_ok = body
                    if sender not in expected:
                        kill(sender, "duplicate or unexpected report")
                        reports.pop(sender, None)
                        continue
                    if report.round_index != k:
                        kill(sender, "report for the wrong round")
                        expected.discard(sender)
                        continue
                    reports[sender] = report
                    upload_oks[sender] = upload_ok
                    expected.discard(sender)
                    continue
                # An upload with no outstanding request.
                kill(sender, "unsolicited model upload")
                expected.discard(sender)
                reports.pop(sender, None)

            arrived = [reports[cid] for cid in sorted(reports)]

            if cfg.algorithm == "vafl":
                fetched: list[int] = []

                def fetch(cid: int, _k=k, _fetched=fetched) -> np.ndarray:
                    params = fetch_from(cid, _k)
                    _fetched.append(cid)
                    return params

                server = server_round(server, arrived, fetch, ledger)
                selected = tuple(sorted(fetched))
            elif cfg.algorithm == "afl":
                triples = []
                for report in arrived:
                    try:
                        params = fetch_from(report.client_id, k)
                    except ConnectionError as exc:
                        log.warning("afl fetch failed: %s", exc)
                        continue
                    triples.append((report.client_id, params, report.sample_count))
                server = afl_round(server, triples, ledger)
                selected = tuple(cid for cid, _, _ in triples)
            else:
                ups = []
                for report in arrived:
                    if not upload_oks.get(report.client_id, False):
                        continue
                    try:
                        params = fetch_from(report.client_id, k)
                    except ConnectionError as exc:
                        log.warning("eaflm fetch failed: %s", exc)
                        continue
                    ups.append((report.client_id, params, report.sample_count))
                server = eaflm_round(server, ups, n_live=len(arrived), ledger=ledger)
                selected = tuple(cid for cid, _, _ in ups)

            try:
                test_acc = evaluate_accuracy(model, server.global_params, eval_set)
            except DivergenceError as exc:
                diverged = True
                diagnostic = f"global model diverged after round {k + 1}: {exc}"
                break

            rows.append(RoundRow(k + 1, test_acc, selected, ledger.c_t0, ledger.c_t1))
            selection_log.append(
                {
                    "round": k + 1,
                    "reporters": [(cid, k + 1) for cid in sorted(reports)],
                    "selected": list(selected),
                }
            )

            if cfg.target_acc is not None and test_acc >= cfg.target_acc:
                stopped_early = True
                break
            for cid in sorted(sessions):
                session = sessions[cid]
                if session.alive:
                    try:
                        write_frame(session.sock, encode_round_done(k, cid, False))
                    except OSError:
                        session.shut()

        for cid in sorted(sessions):
            session = sessions[cid]
            if session.alive:
                try:
                    write_frame(session.sock, encode_round_done(last_k, cid, True))
                except OSError:
                    pass
    finally:
        lsock.close()
        for session in sessions.values():
            session.shut()

    return RunResult(
        config=cfg,
        rows=rows,
        initial_acc=initial_acc,
        ledger=ledger,
        events=[],
        selection_log=selection_log,
        stopped_early=stopped_early,
        diverged=diverged,
        diagnostic=diagnostic,
        plan_digest=plan_digest,
        theta0_digest=hashlib.sha256(theta0.tobytes()).hexdigest()[:16],
        final_params=server.global_params,
    )
