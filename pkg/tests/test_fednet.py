import socket
import threading

import numpy as np
import pytest

from transfed.data import synthetic_windows
from transfed.fedcore import ClientUpdate, RoundConfig, run_simulation
from transfed.fednet import (
    ClientState,
    ServerError,
    ServerSession,
    TlsConfig,
    build_config_payload,
    parse_addr,
    parse_config,
    run_client,
    serve,
)
from transfed.model import init_params
from transfed.params import ParameterSet
from transfed.wire import parse_config_payload

from conftest import make_test_cert, toy_config


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def sample_update(client_id, round=0):
    return ClientUpdate(
        client_id=client_id, round=round,
        params=ParameterSet([("w", np.ones(2))]), n_k=4,
    )


class TestServerSession:
    def test_register_validates_range_and_duplicates(self):
        s = ServerSession(2)
        s.register(0)
        with pytest.raises(ServerError, match="duplicate"):
            s.register(0)
        with pytest.raises(ServerError, match="outside"):
            s.register(2)
        with pytest.raises(ServerError, match="outside"):
            s.register(-1)

    def test_round_requires_all_clients(self):
        s = ServerSession(2)
        s.register(0)
        with pytest.raises(ServerError, match="before all clients"):
            s.begin_round(0)

    def test_aggregate_blocked_until_all_reported(self):
        s = ServerSession(2)
        for cid in (0, 1):
            s.register(cid)
            s.mark_configured(cid)
        s.begin_round(0)
        s.record_update(sample_update(0))
        assert not s.ready_to_aggregate()
        with pytest.raises(ServerError, match="unreported"):
            s.aggregate()
        s.record_update(sample_update(1))
        assert s.ready_to_aggregate()
        assert s.aggregate()["w"] is not None

    def test_update_round_must_match(self):
        s = ServerSession(1)
        s.register(0)
        s.mark_configured(0)
        s.begin_round(3)
        with pytest.raises(ServerError, match="round"):
            s.record_update(sample_update(0, round=2))

    def test_duplicate_update_rejected(self):
        s = ServerSession(1)
        s.register(0)
        s.mark_configured(0)
        s.begin_round(0)
        s.record_update(sample_update(0))
        with pytest.raises(ServerError, match="unexpected"):
            s.record_update(sample_update(0))

    def test_next_round_after_aggregate(self):
        s = ServerSession(1)
        s.register(0)
        s.mark_configured(0)
        for r in range(3):
            s.begin_round(r)
            assert s.states[0] is ClientState.TRAINING
            s.record_update(sample_update(0, round=r))
            s.aggregate()


class TestConfigPayload:
    def test_roundtrip_into_configs(self):
        mc = toy_config()
        rc = RoundConfig(rounds=2, epochs=3, batch_size=4, n_clients=2,
                         lr=0.02, weight_decay=0.005, seed=11)
        payload = build_config_payload(mc, rc, client_seed=rc.base_seed_for(1))
        model_config, hyper = parse_config(parse_config_payload(payload))
        assert model_config.window_rows == mc.window_rows
        assert model_config.features == mc.features
        assert model_config.d_model == mc.d_model
        assert model_config.heads == mc.heads
        assert model_config.n_classes == mc.n_classes
        assert hyper.epochs == 3 and hyper.batch_size == 4
        assert hyper.lr == 0.02 and hyper.weight_decay == 0.005
        assert hyper.seed == 12  # base seed for client 1
        assert hyper.val_fraction == 0.0 and not hyper.augment

    def test_missing_keys_rejected(self):
        with pytest.raises(Exception, match="missing"):
            parse_config({"W": "4"})


def loopback_run(model_config, round_config, partitions, tls_server=None,
                 tls_client=None, port=None):
    """Run serve() plus one thread per client on localhost; returns
    (final params, history, client statuses)."""
    port = port or free_port()
    addr = f"127.0.0.1:{port}"
    result = {}

    def server():
        result["final"], result["history"] = serve(
            addr, round_config, model_config, tls_config=tls_server,
            handshake_timeout=20.0, io_timeout=60.0,
        )

    server_thread = threading.Thread(target=server)
    server_thread.start()
    statuses = {}

    def client(cid):
        statuses[cid] = run_client(
            addr, partitions[cid], cid, tls_config=tls_client,
            retries=40, retry_wait=0.1, io_timeout=60.0,
        )

    client_threads = [
        threading.Thread(target=client, args=(cid,))
        for cid in range(round_config.n_clients)
    ]
    for t in client_threads:
        t.start()
    for t in client_threads:
        t.join(timeout=120)
    server_thread.join(timeout=120)
    assert not server_thread.is_alive(), "server did not finish"
    return result.get("final"), result.get("history"), statuses


class TestLoopback:
    def test_two_clients_match_simulation(self):
        mc = toy_config()
        parts = [synthetic_windows(8, 2, 4, 3, seed=s) for s in (0, 1)]
        rc = RoundConfig(rounds=2, epochs=2, batch_size=4, n_clients=2,
                         val_fraction=0.0, seed=3, wire_rounding=True)
        final, history, statuses = loopback_run(mc, rc, parts)
        assert statuses == {0: 0, 1: 0}
        sim_final, _ = run_simulation(mc, rc, parts)
        assert final.equals(sim_final)

    def test_tls_matches_plaintext(self, tmp_path):
        cert, key = make_test_cert(tmp_path)
        mc = toy_config()
        parts = [synthetic_windows(6, 2, 4, 3, seed=s) for s in (0, 1)]
        rc = RoundConfig(rounds=1, epochs=1, batch_size=4, n_clients=2,
                         val_fraction=0.0, seed=4, wire_rounding=True)
        plain_final, _, plain_status = loopback_run(mc, rc, parts)
        tls_final, _, tls_status = loopback_run(
            mc, rc, parts,
            tls_server=TlsConfig(certfile=cert, keyfile=key),
            tls_client=TlsConfig(cafile=cert),
        )
        assert plain_status == tls_status == {0: 0, 1: 0}
        assert plain_final.equals(tls_final)

    def test_mutual_tls(self, tmp_path):
        server_cert, server_key = make_test_cert(tmp_path, "server")
        client_cert, client_key = make_test_cert(tmp_path, "client")
        mc = toy_config()
        parts = [synthetic_windows(5, 2, 4, 3, seed=0)]
        rc = RoundConfig(rounds=1, epochs=1, batch_size=4, n_clients=1,
                         val_fraction=0.0, seed=5, wire_rounding=True)
        final, _, statuses = loopback_run(
            mc, rc, parts,
            tls_server=TlsConfig(certfile=server_cert, keyfile=server_key,
                                 cafile=client_cert),
            tls_client=TlsConfig(cafile=server_cert, certfile=client_cert,
                                 keyfile=client_key),
        )
        assert statuses == {0: 0}
        sim_final, _ = run_simulation(mc, rc, parts)
        assert final.equals(sim_final)

    def test_reported_n_k_equals_dataset_size(self):
        mc = toy_config()
        ds = synthetic_windows(9, 2, 4, 3, seed=6)
        rc = RoundConfig(rounds=1, epochs=0, batch_size=4, n_clients=1,
                         val_fraction=0.0, seed=6)
        # epochs=0 keeps params broadcast == returned, so the aggregate is
        # the f32-rounded initial parameters and n_k drove the (single) weight
        final, _, statuses = loopback_run(mc, rc, [ds])
        assert statuses == {0: 0}
        assert final.equals(init_params(mc).quantized_f32())


class TestFailurePaths:
    def test_handshake_timeout(self):
        port = free_port()
        rc = RoundConfig(rounds=1, epochs=1, n_clients=1, val_fraction=0.0)
        with pytest.raises(ServerError, match="handshake timeout"):
            serve(f"127.0.0.1:{port}", rc, toy_config(),
                  handshake_timeout=0.3, io_timeout=1.0)

    def test_client_retries_then_fails(self):
        port = free_port()
        ds = synthetic_windows(4, 2, 4, 3, seed=0)
        with pytest.raises(ServerError, match="cannot reach"):
            run_client(f"127.0.0.1:{port}", ds, 0, retries=2, retry_wait=0.05,
                       io_timeout=1.0)

    def test_shape_mismatch_aborts_both_sides(self):
        # server advertises 5-row windows; the client archive has 4 rows
        port = free_port()
        addr = f"127.0.0.1:{port}"
        mc = toy_config(window_rows=5)
        rc = RoundConfig(rounds=1, epochs=1, batch_size=4, n_clients=1,
                         val_fraction=0.0)
        errors = {}

        def server():
            try:
                serve(addr, rc, mc, handshake_timeout=20.0, io_timeout=30.0)
            except ServerError as exc:
                errors["server"] = exc

        t = threading.Thread(target=server)
        t.start()
        ds = synthetic_windows(4, 2, 4, 3, seed=0)
        status = run_client(addr, ds, 0, retries=40, retry_wait=0.1,
                            io_timeout=30.0)
        t.join(timeout=60)
        assert status == 1
        assert "server" in errors
        assert errors["server"].client_id == 0

    def test_parse_addr_default_port(self):
        assert parse_addr("example.org") == ("example.org", 7878)
        assert parse_addr("10.0.0.1:9000") == ("10.0.0.1", 9000)


def test_client_update_n_k_matches_manifest(tmp_path):
    # hand-rolled one-round server so the raw CLIENT_UPDATE is inspectable
    from transfed import wire
    from transfed.data import read_manifest, save_windows, write_manifest
    from transfed.fednet import recv_message, send_message
    from transfed.wire import Message, MsgType

    mc = toy_config()
    ds = synthetic_windows(7, 2, 4, 3, seed=8)
    archive = tmp_path / "client_0.tfw"
    manifest = tmp_path / "client_0.manifest.csv"
    save_windows(archive, ds)
    write_manifest(manifest, ds, 2)
    rc = RoundConfig(rounds=1, epochs=1, batch_size=4, n_clients=1,
                     val_fraction=0.0, seed=9)
    port = free_port()
    seen = {}

    def fake_server():
        with socket.create_server(("127.0.0.1", port)) as listener:
            listener.settimeout(20.0)
            sock, _ = listener.accept()
            with sock:
                sock.settimeout(20.0)
                hello = recv_message(sock)
                assert hello.type is MsgType.HELLO
                send_message(sock, Message(
                    MsgType.CONFIG,
                    payload=build_config_payload(mc, rc, rc.base_seed_for(0)),
                ))
                send_message(sock, Message(
                    MsgType.GLOBAL_PARAMS, round=0,
                    payload=wire.encode_params(init_params(mc)),
                ))
                update = recv_message(sock)
                assert update.type is MsgType.CLIENT_UPDATE
                _, seen["n_k"] = wire.parse_client_update_payload(update.payload)
                send_message(sock, Message(MsgType.SHUTDOWN))

    t = threading.Thread(target=fake_server)
    t.start()
    status = run_client(f"127.0.0.1:{port}", str(archive), 0,
                        retries=40, retry_wait=0.1, io_timeout=20.0)
    t.join(timeout=60)
    assert status == 0
    assert seen["n_k"] == sum(read_manifest(manifest).values()) == 14
