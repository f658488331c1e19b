"""Networked federated training: aggregation server and client workers.

The topology is one server and ``n_clients`` workers on a framed TCP
protocol (see the wire module for the byte layout), optionally inside TLS.
A session runs:

    client -> HELLO (carries its client_id)
    server -> CONFIG (model dims and hyper-parameters, key=value lines)
    per round r:
        server -> GLOBAL_PARAMS (round=r)
        client -> CLIENT_UPDATE (trained parameters + n_k)
    server -> SHUTDOWN

Rounds are strictly synchronous: the server aggregates only after every
client reported, and a disconnect or ERROR mid-round aborts the whole run
rather than aggregating a partial round. Networked clients train on their
full local archive (no validation holdout) with augmentation off, matching
``run_simulation(wire_rounding=True)`` bit for bit on the same seeds.
"""

from __future__ import annotations

import enum
import socket
import ssl
import time
from dataclasses import dataclass

from . import wire
from .data import Dataset, load_windows
from .fedcore import (
    ROUND_SEED_STRIDE,
    ClientUpdate,
    RoundConfig,
    RoundRecord,
    TrainingHistory,
    evaluate,
    fedavg,
    local_round,
)
from .layers import ShapeError
from .model import ConfigError, Model, ModelConfig, deserialize_params, init_params
from .params import ParameterSet
from .wire import Message, MsgType, ProtocolError

DEFAULT_PORT = 7878
CONFIG_KEYS = ("W", "F", "d_model", "heads", "ffn_dim", "layers", "n_classes",
               "lr", "batch", "epochs", "weight_decay", "seed")


class ServerError(RuntimeError):
    """A session failed; carries the offending client id when known."""

    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id


@dataclass
class TlsConfig:
    """TLS material; ``cafile`` on the server side enables mutual auth."""

    certfile: str | None = None
    keyfile: str | None = None
    cafile: str | None = None
    server_hostname: str | None = None


def _server_ssl_context(tls: TlsConfig) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.load_cert_chain(tls.certfile, tls.keyfile)
    if tls.cafile:
        ctx.verify_mode = ssl.CERT_REQUIRED
        ctx.load_verify_locations(tls.cafile)
    return ctx


def _client_ssl_context(tls: TlsConfig) -> ssl.SSLContext:
    ctx = ssl.create_default_context(cafile=tls.cafile)
    if tls.certfile:
        ctx.load_cert_chain(tls.certfile, tls.keyfile)
    return ctx


def parse_addr(addr: str) -> tuple[str, int]:
    if ":" in addr:
        host, port = addr.rsplit(":", 1)
        return host, int(port)
    return addr, DEFAULT_PORT


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_message(sock) -> Message:
    header = _recv_exact(sock, wire.header_size())
    mtype, rnd, client_id, payload_len = wire.decode_header(header)
    payload = _recv_exact(sock, payload_len) if payload_len else b""
    return Message(mtype, rnd, client_id, payload)


def send_message(sock, msg: Message) -> None:
    sock.sendall(wire.encode_message(msg))


def build_config_payload(model_config: ModelConfig, round_config: RoundConfig,
                         client_seed: int) -> bytes:
    return wire.config_payload({
        "W": model_config.window_rows,
        "F": model_config.features,
        "d_model": model_config.d_model,
        "heads": model_config.heads,
        "ffn_dim": model_config.ffn,
        "layers": model_config.transformer_layers,
        "n_classes": model_config.n_classes,
        "lr": repr(round_config.lr),
        "batch": round_config.batch_size,
        "epochs": round_config.epochs,
        "weight_decay": repr(round_config.weight_decay),
        "seed": client_seed,
    })


def parse_config(cfg: dict[str, str]) -> tuple[ModelConfig, RoundConfig]:
    missing = [k for k in CONFIG_KEYS if k not in cfg]
    if missing:
        raise ProtocolError(f"CONFIG payload missing keys: {missing}")
    model_config = ModelConfig(
        window_rows=int(cfg["W"]),
        features=int(cfg["F"]),
        d_model=int(cfg["d_model"]),
        heads=int(cfg["heads"]),
        ffn_dim=int(cfg["ffn_dim"]),
        transformer_layers=int(cfg["layers"]),
        n_classes=int(cfg["n_classes"]),
        seed=0,
    )
    hyper = RoundConfig(
        rounds=1,
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch"]),
        n_clients=1,
        lr=float(cfg["lr"]),
        weight_decay=float(cfg["weight_decay"]),
        val_fraction=0.0,
        augment=False,
        seed=int(cfg["seed"]),
    )
    return model_config, hyper


class ClientState(enum.Enum):
    CONNECTED = "connected"
    CONFIGURED = "configured"
    TRAINING = "training"
    REPORTED = "reported"


class ServerSession:
    """Round state machine; aggregation is reachable only with all clients
    reported, so a partial aggregate cannot be expressed."""

    def __init__(self, n_clients: int):
        self.n_clients = n_clients
        self.states: dict[int, ClientState] = {}
        self.round: int | None = None
        self._updates: dict[int, ClientUpdate] = {}

    def register(self, client_id: int) -> None:
        if not 0 <= client_id < self.n_clients:
            raise ServerError(f"client id {client_id} outside [0, {self.n_clients})",
                              client_id)
        if client_id in self.states:
            raise ServerError(f"duplicate client id {client_id}", client_id)
        self.states[client_id] = ClientState.CONNECTED

    def all_connected(self) -> bool:
        return len(self.states) == self.n_clients

    def mark_configured(self, client_id: int) -> None:
        self.states[client_id] = ClientState.CONFIGURED

    def begin_round(self, round_index: int) -> None:
        if not self.all_connected():
            raise ServerError("cannot start a round before all clients join")
        for cid, state in self.states.items():
            if state not in (ClientState.CONFIGURED, ClientState.REPORTED):
                raise ServerError(f"client {cid} in state {state.value}", cid)
            self.states[cid] = ClientState.TRAINING
        self.round = round_index
        self._updates = {}

    def record_update(self, update: ClientUpdate) -> None:
        cid = update.client_id
        if self.states.get(cid) is not ClientState.TRAINING:
            raise ServerError(f"unexpected update from client {cid}", cid)
        if update.round != self.round:
            raise ServerError(
                f"client {cid} reported round {update.round}, expected {self.round}",
                cid,
            )
        self.states[cid] = ClientState.REPORTED
        self._updates[cid] = update

    def ready_to_aggregate(self) -> bool:
        return (
            self.all_connected()
            and all(s is ClientState.REPORTED for s in self.states.values())
        )

    def aggregate(self) -> ParameterSet:
        if not self.ready_to_aggregate():
            missing = [cid for cid, s in self.states.items()
                       if s is not ClientState.REPORTED]
            raise ServerError(f"aggregation with unreported clients {missing}")
        return fedavg(list(self._updates.values()))


def serve(bind_addr: str, round_config: RoundConfig, model_config: ModelConfig,
          tls_config: TlsConfig | None = None, test_set: Dataset | None = None,
          checkpoint_path=None, handshake_timeout: float = 60.0,
          io_timeout: float = 600.0):
    """Run the aggregation server; returns (final params, TrainingHistory).

    Waits for ``round_config.n_clients`` HELLOs (bounded by
    ``handshake_timeout``), then drives the synchronous round loop. Any
    client failure aborts the run with a ServerError naming the client.
    """
    host, port = parse_addr(bind_addr)
    expected_shapes = init_params(model_config).shapes()
    session = ServerSession(round_config.n_clients)
    conns: dict[int, socket.socket] = {}
    ssl_ctx = _server_ssl_context(tls_config) if tls_config else None

    listener = socket.create_server((host, port), backlog=round_config.n_clients)
    try:
        deadline = time.monotonic() + handshake_timeout
        while not session.all_connected():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ServerError(
                    f"handshake timeout: {len(session.states)} of "
                    f"{round_config.n_clients} clients joined"
                )
            listener.settimeout(remaining)
            try:
                raw, _ = listener.accept()
            except TimeoutError:
                continue
            try:
                sock = (
                    ssl_ctx.wrap_socket(raw, server_side=True) if ssl_ctx else raw
                )
            except ssl.SSLError:
                raw.close()
                continue
            sock.settimeout(io_timeout)
            try:
                hello = recv_message(sock)
                if hello.type != MsgType.HELLO:
                    raise ServerError(f"expected HELLO, got {hello.type.name}")
                session.register(hello.client_id)
            except (ProtocolError, ServerError) as exc:
                _best_effort_error(sock, str(exc))
                sock.close()
                continue
            conns[hello.client_id] = sock

        for cid, sock in conns.items():
            payload = build_config_payload(
                model_config, round_config, round_config.base_seed_for(cid)
            )
            send_message(sock, Message(MsgType.CONFIG, payload=payload))
            session.mark_configured(cid)

        history = TrainingHistory()
        global_params = Model(model_config).params
        for round_index in range(round_config.rounds):
            session.begin_round(round_index)
            broadcast = Message(
                MsgType.GLOBAL_PARAMS, round=round_index,
                payload=wire.encode_params(global_params),
            )
            for cid in sorted(conns):
                send_message(conns[cid], broadcast)
            for cid in sorted(conns):
                try:
                    msg = recv_message(conns[cid])
                except (ProtocolError, OSError) as exc:
                    raise ServerError(
                        f"client {cid} failed in round {round_index}: {exc}", cid
                    ) from exc
                if msg.type == MsgType.ERROR:
                    raise ServerError(
                        f"client {cid} reported: {msg.payload.decode('utf-8', 'replace')}",
                        cid,
                    )
                if msg.type != MsgType.CLIENT_UPDATE or msg.client_id != cid:
                    raise ServerError(
                        f"expected CLIENT_UPDATE from {cid}, got {msg.type.name} "
                        f"from {msg.client_id}", cid,
                    )
                params, n_k = wire.parse_client_update_payload(msg.payload)
                if params.shapes() != expected_shapes:
                    raise ServerError(
                        f"client {cid} sent mismatched parameter shapes", cid
                    )
                session.record_update(
                    ClientUpdate(client_id=cid, round=msg.round,
                                 params=params, n_k=n_k)
                )
            global_params = session.aggregate()
            if test_set is not None and len(test_set):
                model = Model(model_config)
                model.set_params(global_params)
                loss, acc, ovr = evaluate(model, test_set)
                history.rounds.append(RoundRecord(
                    round=round_index, test_acc=acc, test_loss=loss,
                    test_acc_ovr=ovr,
                ))

        for cid in sorted(conns):
            send_message(conns[cid], Message(MsgType.SHUTDOWN))
        if checkpoint_path is not None:
            wire.save_checkpoint(checkpoint_path, global_params)
        return global_params, history
    except Exception as exc:
        for sock in conns.values():
            _best_effort_error(sock, f"session aborted: {exc}")
        raise
    finally:
        for sock in conns.values():
            sock.close()
        listener.close()


def _best_effort_error(sock, message: str) -> None:
    try:
        send_message(sock, Message(MsgType.ERROR, payload=message.encode("utf-8")))
    except OSError:
        pass


def _connect(server_addr: str, tls_config: TlsConfig | None,
             retries: int, retry_wait: float, io_timeout: float):
    host, port = parse_addr(server_addr)
    last: Exception | None = None
    for attempt in range(retries):
        if attempt:
            time.sleep(retry_wait)
        try:
            raw = socket.create_connection((host, port), timeout=io_timeout)
            if tls_config:
                ctx = _client_ssl_context(tls_config)
                server_hostname = tls_config.server_hostname or host
                sock = ctx.wrap_socket(raw, server_hostname=server_hostname)
            else:
                sock = raw
            sock.settimeout(io_timeout)
            return sock
        except OSError as exc:
            last = exc
    raise ServerError(f"cannot reach server {server_addr}: {last}")


def run_client(server_addr: str, dataset, client_id: int,
               tls_config: TlsConfig | None = None, retries: int = 5,
               retry_wait: float = 2.0, io_timeout: float = 600.0) -> int:
    """Run one federated worker; returns a process-style exit status.

    ``dataset`` is a Dataset or the path of a window archive. The worker
    follows the server's CONFIG, trains on its full archive each round and
    exits 0 on SHUTDOWN, nonzero after sending ERROR on any mismatch.
    """
    if not isinstance(dataset, Dataset):
        dataset = load_windows(dataset)
    sock = _connect(server_addr, tls_config, retries, retry_wait, io_timeout)
    try:
        send_message(sock, Message(MsgType.HELLO, client_id=client_id))
        msg = recv_message(sock)
        if msg.type != MsgType.CONFIG:
            _best_effort_error(sock, f"expected CONFIG, got {msg.type.name}")
            return 1
        model_config, hyper = parse_config(wire.parse_config_payload(msg.payload))
        while True:
            msg = recv_message(sock)
            if msg.type == MsgType.SHUTDOWN:
                return 0
            if msg.type == MsgType.ERROR:
                return 1
            if msg.type != MsgType.GLOBAL_PARAMS:
                _best_effort_error(sock, f"unexpected {msg.type.name}")
                return 1
            try:
                params = deserialize_params(msg.payload, model_config)
                update = local_round(
                    params, dataset, model_config, hyper, client_id, msg.round,
                    seed=hyper.seed + ROUND_SEED_STRIDE * msg.round,
                )
            except (ShapeError, ConfigError, ValueError) as exc:
                _best_effort_error(sock, str(exc))
                return 1
            send_message(sock, Message(
                MsgType.CLIENT_UPDATE, round=msg.round, client_id=client_id,
                payload=wire.client_update_payload(update.params, update.n_k),
            ))
    except (ProtocolError, OSError) as exc:
        _best_effort_error(sock, str(exc))
        return 1
    finally:
        sock.close()
