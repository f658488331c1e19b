"""Command-line pipeline: preprocess, partition, train, simulate, serve,
client and eval subcommands.

Settings resolve in three layers: built-in defaults, then a flat
``key = value`` config file (``#`` comments allowed), then explicit flags.
Every run writes its fully resolved settings to ``run.config`` next to its
outputs; re-running from that file reproduces the outputs. Output files are
written to a temporary path and renamed into place only on success.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from . import data as data_mod
from . import fedcore, fednet, metrics, wire
from .data import DataError, PartitionSpec
from .model import ConfigError, Model, ModelConfig


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def default_port() -> int:
    return int(os.environ.get("TRANSFED_PORT", fednet.DEFAULT_PORT))


def _atomic_write(path, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_file(path, write_fn) -> None:
    """Run ``write_fn(tmp_path)`` then rename the result into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_config_file(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise CliError(f"config: no such file: {path}", 2)
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"config: {path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if like is None or isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


MODEL_DEFAULTS = {
    "d_model": 20, "heads": 5, "ffn_dim": 0, "layers": 2,
    "positional_encoding": False, "head_pooling": False,
}
TRAIN_DEFAULTS = {
    "lr": 0.01, "epochs": 100, "batch": 30, "weight_decay": 0.001,
    "seed": 0, "val_frac": 0.0, "augment": False,
    "jitter": 0.01, "scale_range": 0.1,
}
SIM_DEFAULTS = {"rounds": 5, "clients": 5, "wire_rounding": False}


def resolve(args, defaults: dict) -> dict:
    """Merge defaults, config file and explicit flags into one dict."""
    file_cfg = parse_config_file(args.config) if args.config else {}
    out = {}
    for key, default in defaults.items():
        value = default
        if key in file_cfg:
            value = _coerce(file_cfg[key], default)
        flag = getattr(args, key, None)
        if flag is not None:
            value = flag
        out[key] = value
    return out


def write_run_config(out_dir, resolved: dict) -> None:
    lines = [f"{key} = {value}" for key, value in sorted(resolved.items())]
    _atomic_write(os.path.join(out_dir, "run.config"),
                  ("\n".join(lines) + "\n").encode("utf-8"))


def model_config_from(resolved: dict, window_rows: int, features: int,
                      n_classes: int) -> ModelConfig:
    return ModelConfig(
        window_rows=window_rows,
        features=features,
        d_model=resolved["d_model"],
        heads=resolved["heads"],
        ffn_dim=resolved["ffn_dim"] or None,
        transformer_layers=resolved["layers"],
        n_classes=n_classes,
        jitter=resolved.get("jitter", 0.01),
        scale_range=resolved.get("scale_range", 0.1),
        positional_encoding=resolved["positional_encoding"],
        head_pooling=resolved["head_pooling"],
        seed=resolved.get("seed", 0),
    )


def round_config_from(resolved: dict, n_clients: int = 1,
                      rounds: int = 1) -> fedcore.RoundConfig:
    return fedcore.RoundConfig(
        rounds=rounds,
        epochs=resolved["epochs"],
        batch_size=resolved["batch"],
        n_clients=n_clients,
        lr=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        val_fraction=resolved["val_frac"],
        augment=resolved["augment"],
        seed=resolved["seed"],
        wire_rounding=resolved.get("wire_rounding", False),
    )


def _require_file(path, stage: str):
    if not os.path.exists(path):
        raise CliError(f"{stage}: no such file: {path}", 2)


def _load_archive(path, stage: str) -> data_mod.Dataset:
    _require_file(path, stage)
    return data_mod.load_windows(path)


def _ensure_out_dir(path) -> None:
    os.makedirs(path, exist_ok=True)


def _resolved_n_classes(resolved, dataset) -> int:
    if resolved.get("classes"):
        return resolved["classes"]
    return int(dataset.y.max()) + 1


def cmd_preprocess(args) -> int:
    resolved = resolve(args, {
        "window_rows": 140, "frame_seconds": 2.0, "stride_rows": 0,
        "sample_rate": 0.0,
    })
    _require_file(args.input, "preprocess")
    if args.format == "own":
        series = data_mod.load_own_csv(
            args.input,
            sample_rate_hz=resolved["sample_rate"] or 115.0,
        )
        n_classes = len(data_mod.OWN_ACTIVITY_NAMES)
    else:
        series = data_mod.load_wisdm(
            args.input,
            sample_rate_hz=resolved["sample_rate"] or 20.0,
        )
        n_classes = len(data_mod.WISDM_ACTIVITY_NAMES)
    dataset = data_mod.make_windows(
        series, resolved["window_rows"], resolved["frame_seconds"],
        resolved["stride_rows"] or None,
    )
    if len(dataset) == 0:
        raise CliError("preprocess: input produced no windows")
    _atomic_file(args.out, lambda p: data_mod.save_windows(p, dataset))
    manifest = os.path.splitext(args.out)[0] + ".manifest.csv"
    _atomic_file(manifest,
                 lambda p: data_mod.write_manifest(p, dataset, n_classes))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_run_config(out_dir, {**resolved, "format": args.format,
                               "input": args.input, "out": args.out})
    print(f"wrote {len(dataset)} windows to {args.out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_partition(args) -> int:
    resolved = resolve(args, {
        "clients": 5, "reduction": 0.5, "mode": "replicate_reduce", "seed": 0,
    })
    dataset = _load_archive(args.windows, "partition")
    spec = PartitionSpec(
        n_clients=resolved["clients"], reduction=resolved["reduction"],
        mode=resolved["mode"], seed=resolved["seed"], force=args.force,
    )
    parts = data_mod.partition_noniid(dataset, spec)
    _ensure_out_dir(args.out_dir)
    n_classes = int(dataset.y.max()) + 1
    print(f"{'client':>6}  " + "  ".join(f"{c:>6}" for c in range(n_classes)))
    for k, part in enumerate(parts):
        path = os.path.join(args.out_dir, f"client_{k}.tfw")
        _atomic_file(path, lambda p, part=part: data_mod.save_windows(p, part))
        manifest = os.path.join(args.out_dir, f"client_{k}.manifest.csv")
        _atomic_file(manifest, lambda p, part=part:
                     data_mod.write_manifest(p, part, n_classes))
        counts = part.class_counts(n_classes)
        print(f"{k:>6}  " + "  ".join(f"{int(c):>6}" for c in counts))
    write_run_config(args.out_dir, {**resolved, "windows": args.windows})
    return 0


def cmd_train(args) -> int:
    resolved = resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS, "classes": 0})
    dataset = _load_archive(args.windows, "train")
    n_classes = _resolved_n_classes(resolved, dataset)
    w, f = dataset.window_shape
    model_config = model_config_from(resolved, w, f, n_classes)
    hyper = round_config_from(resolved)
    if resolved["val_frac"] > 0:
        train, val, _ = data_mod.split(
            dataset, 1.0 - resolved["val_frac"], resolved["val_frac"], 0.0,
            seed=resolved["seed"],
        )
    else:
        train, val = dataset, None
    model, history = fedcore.train_centralized(model_config, train, val, hyper)
    _ensure_out_dir(args.out_dir)
    ckpt = os.path.join(args.out_dir, "model.tfp")
    _atomic_file(ckpt, lambda p: wire.save_checkpoint(p, model.params))
    _atomic_file(os.path.join(args.out_dir, "history.csv"),
                 history.write_client_csv)
    write_run_config(args.out_dir, {
        **resolved, "window_rows": w, "features": f, "n_classes": n_classes,
        "windows": args.windows,
    })
    print(f"trained {model.param_count()} parameters; checkpoint: {ckpt}")
    return 0


def cmd_simulate(args) -> int:
    resolved = resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS,
                              **SIM_DEFAULTS, "classes": 0})
    parts = []
    for k in range(resolved["clients"]):
        parts.append(_load_archive(
            os.path.join(args.partitions_dir, f"client_{k}.tfw"), "simulate"
        ))
    test_set = _load_archive(args.test, "simulate") if args.test else None
    ref = test_set if test_set is not None else parts[0]
    n_classes = _resolved_n_classes(resolved, ref)
    w, f = ref.window_shape
    model_config = model_config_from(resolved, w, f, n_classes)
    round_config = round_config_from(resolved, n_clients=resolved["clients"],
                                     rounds=resolved["rounds"])
    final, history = fedcore.run_simulation(model_config, round_config, parts,
                                            test_set)
    _ensure_out_dir(args.out_dir)
    ckpt = os.path.join(args.out_dir, "model.tfp")
    _atomic_file(ckpt, lambda p: wire.save_checkpoint(p, final))
    _atomic_file(os.path.join(args.out_dir, "history.csv"),
                 history.write_client_csv)
    _atomic_file(os.path.join(args.out_dir, "global.csv"),
                 history.write_global_csv)
    write_run_config(args.out_dir, {
        **resolved, "window_rows": w, "features": f, "n_classes": n_classes,
        "partitions_dir": args.partitions_dir, "test": args.test or "",
    })
    for r in history.rounds:
        print(f"round {r.round}: test_acc={r.test_acc:.4f} "
              f"test_loss={r.test_loss:.4f}")
    print(f"final checkpoint: {ckpt}")
    return 0


def _tls_from_args(args, server_side: bool) -> fednet.TlsConfig | None:
    cert = getattr(args, "tls_cert", None)
    key = getattr(args, "tls_key", None)
    ca = getattr(args, "tls_ca", None)
    if not (cert or key or ca):
        return None
    if server_side and not (cert and key):
        raise CliError("serve: TLS needs both --tls-cert and --tls-key")
    return fednet.TlsConfig(certfile=cert, keyfile=key, cafile=ca)


def cmd_serve(args) -> int:
    resolved = resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS, **SIM_DEFAULTS,
                              "window_rows": 140, "features": 9, "classes": 15})
    test_set = _load_archive(args.test, "serve") if args.test else None
    model_config = model_config_from(resolved, resolved["window_rows"],
                                     resolved["features"], resolved["classes"])
    round_config = round_config_from(resolved, n_clients=resolved["clients"],
                                     rounds=resolved["rounds"])
    tls = _tls_from_args(args, server_side=True)
    _ensure_out_dir(args.out_dir)
    bind = args.bind if ":" in args.bind else f"{args.bind}:{default_port()}"
    ckpt = os.path.join(args.out_dir, "model.tfp")
    final, history = fednet.serve(
        bind, round_config, model_config, tls_config=tls, test_set=test_set,
        checkpoint_path=None, handshake_timeout=args.handshake_timeout,
    )
    _atomic_file(ckpt, lambda p: wire.save_checkpoint(p, final))
    _atomic_file(os.path.join(args.out_dir, "global.csv"),
                 history.write_global_csv)
    write_run_config(args.out_dir, {**resolved, "bind": bind})
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_client(args) -> int:
    _require_file(args.windows, "client")
    tls = _tls_from_args(args, server_side=False)
    server = (args.server if ":" in args.server
              else f"{args.server}:{default_port()}")
    status = fednet.run_client(
        server, args.windows, args.client_id, tls_config=tls,
        retries=args.retries, retry_wait=args.retry_wait,
    )
    if status != 0:
        raise CliError(f"client: session failed with status {status}", status)
    return 0


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "eval")
    dataset = _load_archive(args.windows, "eval")
    run_config = args.run_config or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "run.config"
    )
    _require_file(run_config, "eval")
    cfg = parse_config_file(run_config)
    resolved = {key: _coerce(cfg[key], default)
                for key, default in MODEL_DEFAULTS.items() if key in cfg}
    missing = [k for k in MODEL_DEFAULTS if k not in resolved]
    if missing:
        raise CliError(f"eval: run config {run_config} missing keys {missing}")
    w, f = dataset.window_shape
    n_classes = int(cfg.get("n_classes", int(dataset.y.max()) + 1))
    model_config = model_config_from(resolved, int(cfg.get("window_rows", w)),
                                     int(cfg.get("features", f)), n_classes)
    params = wire.load_checkpoint(args.checkpoint)
    model = Model(model_config)
    model.set_params(params)
    preds = np.concatenate([
        model.predict(dataset.x[i : i + fedcore.EVAL_BATCH])
        for i in range(0, len(dataset), fedcore.EVAL_BATCH)
    ])
    cm = metrics.confusion(preds, dataset.y, n_classes)
    stats = metrics.per_class(cm)
    names = None
    if n_classes == len(data_mod.OWN_ACTIVITY_NAMES):
        names = list(data_mod.OWN_ACTIVITY_NAMES)
    elif n_classes == len(data_mod.WISDM_ACTIVITY_NAMES):
        names = list(data_mod.WISDM_ACTIVITY_NAMES)
    report = metrics.render_report(cm, stats, args.render, names)
    _ensure_out_dir(args.out_dir)
    ext = "txt" if args.render == "text" else "csv"
    _atomic_write(os.path.join(args.out_dir, f"metrics.{ext}"), report)
    _atomic_write(os.path.join(args.out_dir, "confusion.csv"),
                  metrics.confusion_csv(cm))
    # named eval.config so evaluating into a training directory cannot
    # clobber that run's own resolved settings
    lines = [f"{k} = {v}" for k, v in sorted({
        **resolved, "checkpoint": args.checkpoint, "windows": args.windows,
        "render": args.render, "n_classes": n_classes,
    }.items())]
    _atomic_write(os.path.join(args.out_dir, "eval.config"),
                  ("\n".join(lines) + "\n").encode("utf-8"))
    sys.stdout.write(report.decode("utf-8"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transfed",
        description="one-patch transformer HAR classifier with federated "
                    "averaging training",
        epilog="addresses without an explicit port use TRANSFED_PORT "
               "(default 7878)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="flat key = value settings file")

    def add_model_flags(p):
        p.add_argument("--d-model", dest="d_model", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--ffn-dim", dest="ffn_dim", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--classes", type=int)
        p.add_argument("--positional-encoding", dest="positional_encoding",
                       action="store_true", default=None)
        p.add_argument("--head-pooling", dest="head_pooling",
                       action="store_true", default=None)

    def add_train_flags(p):
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--val-frac", dest="val_frac", type=float)
        p.add_argument("--augment", action="store_true", default=None)
        p.add_argument("--jitter", type=float)
        p.add_argument("--scale-range", dest="scale_range", type=float)

    def add_tls_flags(p):
        p.add_argument("--tls-cert", dest="tls_cert")
        p.add_argument("--tls-key", dest="tls_key")
        p.add_argument("--tls-ca", dest="tls_ca")

    p = sub.add_parser("preprocess", help="raw sensor file to window archive")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("own", "wisdm"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-rows", dest="window_rows", type=int)
    p.add_argument("--frame-seconds", dest="frame_seconds", type=float)
    p.add_argument("--stride-rows", dest="stride_rows", type=int)
    p.add_argument("--sample-rate", dest="sample_rate", type=float)
    add_config(p)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("partition", help="split an archive into skewed clients")
    p.add_argument("--windows", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--clients", type=int)
    p.add_argument("--reduction", type=float)
    p.add_argument("--mode", choices=("replicate_reduce", "disjoint_reduce"))
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true",
                   help="allow reductions outside [0.40, 0.50]")
    add_config(p)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("train", help="centralized training")
    p.add_argument("--windows", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    add_model_flags(p)
    add_train_flags(p)
    add_config(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="in-process federated averaging")
    p.add_argument("--partitions-dir", dest="partitions_dir", required=True)
    p.add_argument("--test")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--wire-rounding", dest="wire_rounding",
                   action="store_true", default=None,
                   help="float32-round parameters at broadcast/update, "
                        "matching the networked deployment")
    add_model_flags(p)
    add_train_flags(p)
    add_config(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("serve", help="aggregation server for networked clients")
    p.add_argument("--bind", default="0.0.0.0")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--test")
    p.add_argument("--window-rows", dest="window_rows", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--handshake-timeout", dest="handshake_timeout",
                   type=float, default=60.0)
    add_model_flags(p)
    add_train_flags(p)
    add_tls_flags(p)
    add_config(p)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("client", help="federated worker")
    p.add_argument("--server", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--client-id", dest="client_id", type=int, required=True)
    p.add_argument("--retries", type=int, default=5)
    p.add_argument("--retry-wait", dest="retry_wait", type=float, default=2.0)
    add_tls_flags(p)
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("eval", help="metrics report from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--run-config", dest="run_config",
                   help="resolved run.config of the training run "
                        "(default: next to the checkpoint)")
    p.add_argument("--render", choices=("text", "csv"), default="text")
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"transfed {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (DataError, ConfigError, wire.ProtocolError, fednet.ServerError,
            fedcore.TrainingDivergedError, ValueError) as exc:
        print(f"transfed {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
