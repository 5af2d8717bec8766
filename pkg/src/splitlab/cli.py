"""Command-line front end: train, attack-invert, attack-labels, report.

Configuration comes from an optional key=value file plus flag overrides
(flags win). Every run is deterministic given the effective config and
seed; the effective config is echoed at startup and hashed into report
rows.

Exit codes: 0 success, 2 config error, 3 protocol error, 4 numeric
failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import threading

import numpy as np

from .attacks.inversion import InversionConfig, default_tv_lambda, unsplit_invert
from .attacks.labels import infer_label, make_tail_clone, tail_param_gradients
from .data import Dataset, load_cifar_bin, load_idx, sample_class_balanced, synth_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    ProtocolError,
    SplitLabError,
)
from .harness import (
    SweepConfig,
    eval_accuracy,
    label_inference_accuracy,
    merged_model,
    mse_images,
    run_depth_sweep,
    snapshot_tap,
    _dump_pair,
)
from .layers import LayerStack
from .models import build_net, load_checkpoint, save_checkpoint, split_at, tail_start_index
from .protocol import SessionConfig, ServerTap, run_client, run_server, run_session
from .transport import inproc_pair, tcp_connect, tcp_listen

DATASET_ARCH = {"synth": "tiny8", "mnist": "mnist", "fmnist": "mnist", "cifar": "cifar"}

DEFAULTS = {
    "dataset": "synth",
    "data_dir": "data",
    "arch": "",  # derived from dataset when empty
    "split_depth": 1,
    "topology": "label_sharing",
    "transport": "inproc",
    "role": "both",
    "seed": 0,
    "epochs": 1,
    "batch_size": 64,
    "lr": 0.001,
    "optimizer": "adam",
    "tail_depth": 1,
    "lambda": -1.0,  # <0 -> per-depth default
    "input_steps": 100,
    "model_steps": 100,
    "rounds": 20,
    "samples": 200,
    "train_subset": 10000,
    "sample_per_class": 1,
    "depths": "1,2,3",
    "out_dir": "out",
    "checkpoint": "",
}

_INT_KEYS = {"split_depth", "seed", "epochs", "batch_size", "tail_depth",
             "input_steps", "model_steps", "rounds", "samples",
             "train_subset", "sample_per_class"}
_FLOAT_KEYS = {"lr", "lambda"}


def read_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def effective_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    env_dir = os.environ.get("SPLITLAB_DATA_DIR")
    if env_dir and getattr(args, "data_dir", None) is None:
        cfg["data_dir"] = env_dir
    for key in _INT_KEYS:
        cfg[key] = int(cfg[key])
    for key in _FLOAT_KEYS:
        cfg[key] = float(cfg[key])
    if cfg["dataset"] not in DATASET_ARCH:
        raise ConfigError(f"unknown dataset {cfg['dataset']!r}")
    if not cfg["arch"]:
        cfg["arch"] = DATASET_ARCH[cfg["dataset"]]
    return cfg


def load_dataset(cfg: dict, split: str) -> Dataset:
    name, root = cfg["dataset"], cfg["data_dir"]
    if name == "synth":
        n = 512 if split == "train" else 256
        return synth_dataset(n, (1, 8, 8), seed=cfg["seed"] + (0 if split == "train" else 1),
                             name="synth")
    if name in ("mnist", "fmnist"):
        sub = os.path.join(root, "mnist" if name == "mnist" else "fashion")
        prefix = "train" if split == "train" else "t10k"
        return load_idx(
            os.path.join(sub, f"{prefix}-images-idx3-ubyte"),
            os.path.join(sub, f"{prefix}-labels-idx1-ubyte"),
            name=name, split=split,
        )
    sub = os.path.join(root, "cifar")
    if split == "train":
        paths = [os.path.join(sub, f"data_batch_{i}") for i in range(1, 6)]
    else:
        paths = [os.path.join(sub, "test_batch")]
    return load_cifar_bin(paths, name=name, split=split)


def session_config(cfg: dict) -> SessionConfig:
    return SessionConfig(
        arch=cfg["arch"], split_depth=cfg["split_depth"], topology=cfg["topology"],
        seed=cfg["seed"], optimizer=cfg["optimizer"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        tail_depth=cfg["tail_depth"],
    ).validate()


def _parse_tcp(spec: str) -> tuple[str, int]:
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] != "tcp":
        raise ConfigError(f"transport must be 'inproc' or 'tcp:host:port', got {spec!r}")
    try:
        return parts[1], int(parts[2])
    except ValueError:
        raise ConfigError(f"bad port in transport {spec!r}") from None


def _write_curve(path: str, losses: list[float]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses, 1):
            writer.writerow([i, loss])


def cmd_train(cfg: dict) -> int:
    scfg = session_config(cfg)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    train = load_dataset(cfg, "train")
    subset = train.subset(np.arange(min(cfg["train_subset"], len(train))))

    if cfg["transport"] == "inproc":
        if cfg["role"] != "both":
            raise ConfigError("inproc transport requires role=both")
        tap = ServerTap()
        client_res, server_res = run_session(
            scfg, subset.images, subset.labels, inproc_pair(), tap=tap
        )
        save_checkpoint(client_res.model, os.path.join(out, "client.ckpt"))
        save_checkpoint(server_res.model, os.path.join(out, "server.ckpt"))
        if scfg.topology == "label_sharing":
            merged = merged_model(client_res, server_res, scfg.split_depth)
            save_checkpoint(merged, os.path.join(out, "model.ckpt"))
        _write_curve(os.path.join(out, "train_curve.csv"), client_res.losses)
        print(f"trained {len(client_res.losses)} steps; "
              f"final loss {client_res.losses[-1]:.4f}" if client_res.losses
              else "trained 0 steps")
        return 0

    host, port = _parse_tcp(cfg["transport"])
    if cfg["role"] == "server":
        transport = tcp_listen(host, port)
        res = run_server(transport, scfg,
                         images=subset.images if scfg.topology == "server_data" else None)
        transport.close()
        save_checkpoint(res.model, os.path.join(out, "server.ckpt"))
        _write_curve(os.path.join(out, "train_curve.csv"), res.losses)
    elif cfg["role"] == "client":
        transport = tcp_connect(host, port)
        if scfg.topology == "server_data":
            res = run_client(transport, scfg, None, subset.labels)
        else:
            res = run_client(transport, scfg, subset.images, subset.labels)
        transport.close()
        save_checkpoint(res.model, os.path.join(out, "client.ckpt"))
        _write_curve(os.path.join(out, "train_curve.csv"), res.losses)
    else:
        raise ConfigError("tcp transport requires role=client or role=server")
    print(f"trained {res.model.step_count} steps over {cfg['transport']}")
    return 0


def cmd_attack_invert(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("attack-invert requires --checkpoint from a training run")
    model = load_checkpoint(cfg["checkpoint"])
    depth = cfg["split_depth"]
    f1, _ = split_at(model, depth)
    test = load_dataset(cfg, "test")
    sample = sample_class_balanced(test, cfg["sample_per_class"], cfg["seed"])
    entries = snapshot_tap(f1, sample.images)
    lam = cfg["lambda"] if cfg["lambda"] >= 0 else default_tv_lambda(depth)
    inv = InversionConfig(
        tv_lambda=lam, input_steps=cfg["input_steps"],
        model_steps=cfg["model_steps"], max_rounds=cfg["rounds"],
        seed=cfg["seed"],
    )
    res = unsplit_invert(entries, model.arch, depth, inv, ground_truth=sample.images)
    out = cfg["out_dir"]
    _dump_pair(sample.images, res.x_est, os.path.join(out, "inversion"))
    with open(os.path.join(out, "inversion", "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "objective", "tv", "mse_truth"])
        for m in res.history:
            writer.writerow([m.round, m.objective, m.tv,
                             "" if m.mse_truth is None else m.mse_truth])
    clone_full = build_net(model.arch, seed=cfg["seed"], split_depth=depth)
    clone_full.layers[:depth] = res.clone.layers
    save_checkpoint(clone_full, os.path.join(out, "inversion", "clone.ckpt"))
    final_mse = mse_images(res.x_est, sample.images)
    print(f"inversion: depth={depth} lambda={lam} rounds={len(res.history)} "
          f"mse={final_mse:.4f}")
    return 0


def cmd_attack_labels(cfg: dict) -> int:
    if cfg["topology"] not in ("server_data", "client_labels"):
        raise ConfigError(
            "label inference needs a topology where the client owns the loss "
            "(server_data or client_labels)"
        )
    if cfg["batch_size"] != 1:
        raise ConfigError(
            "label inference requires batch_size=1: the attack matches the "
            "gradients of a single stochastic step, batch gradients average "
            "label information away"
        )
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
    else:
        model = build_net(cfg["arch"], seed=cfg["seed"])
    ds = load_dataset(cfg, "train")
    acc = label_inference_accuracy(model, ds, cfg["tail_depth"], cfg["samples"],
                                   cfg["seed"])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "label_inference.json"), "w") as fh:
        json.dump({"dataset": cfg["dataset"], "arch": model.arch,
                   "tail_depth": cfg["tail_depth"], "samples": cfg["samples"],
                   "accuracy": acc, "seed": cfg["seed"]}, fh, indent=2)
    print(f"label inference: tail_depth={cfg['tail_depth']} "
          f"samples={cfg['samples']} accuracy={acc:.1%}")
    return 0


def cmd_report(cfg: dict) -> int:
    depths = [int(d) for d in str(cfg["depths"]).split(",") if d]
    train = load_dataset(cfg, "train")
    test = load_dataset(cfg, "test")
    lam = None if cfg["lambda"] < 0 else cfg["lambda"]
    sweep = SweepConfig(
        arch=cfg["arch"], depths=depths, topology=cfg["topology"],
        seed=cfg["seed"], optimizer=cfg["optimizer"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        train_subset=cfg["train_subset"],
        sample_per_class=cfg["sample_per_class"],
        label_tail_depth=cfg["tail_depth"], label_samples=cfg["samples"],
        inversion=InversionConfig(
            tv_lambda=lam, input_steps=cfg["input_steps"],
            model_steps=cfg["model_steps"], max_rounds=cfg["rounds"],
            seed=cfg["seed"],
        ),
        out_dir=cfg["out_dir"],
    )
    rows = run_depth_sweep(sweep, train, test)
    print(f"report: wrote {len(rows)} new rows to "
          f"{os.path.join(cfg['out_dir'], 'report.csv')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitlab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "attack-invert", "attack-labels", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--dataset", choices=sorted(DATASET_ARCH))
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--arch")
        p.add_argument("--split-depth", dest="split_depth", type=int)
        p.add_argument("--topology", choices=["label_sharing", "server_data",
                                              "client_labels"])
        p.add_argument("--transport")
        p.add_argument("--role", choices=["client", "server", "both"])
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--optimizer", choices=["sgd", "adam"])
        p.add_argument("--tail-depth", dest="tail_depth", type=int)
        p.add_argument("--lambda", dest="lambda", type=float)
        p.add_argument("--input-steps", dest="input_steps", type=int)
        p.add_argument("--model-steps", dest="model_steps", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--train-subset", dest="train_subset", type=int)
        p.add_argument("--sample-per-class", dest="sample_per_class", type=int)
        p.add_argument("--depths")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--checkpoint")
    return parser


COMMANDS = {
    "train": cmd_train,
    "attack-invert": cmd_attack_invert,
    "attack-labels": cmd_attack_labels,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        print(f"config: {json.dumps(cfg, sort_keys=True)}")
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (OSError, DataError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5
    except SplitLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
