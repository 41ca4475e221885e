"""``stigcn`` command-line entry point.

Reports go to stdout as JSON, short summaries to stderr. Exit status is 0 on
success, 1 on invalid input and 2 when a command fails at run time.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import DataFormatError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .graph import (GraphError, adjacency, build_topology, chebyshev_basis, edge_checksum,
                    normalized_laplacian, scaled_laplacian)
from .metrics import retrieval_eval
from .model import NetworkConfig, build_stigcn, preset_config, profile
from .training import PRECISIONS, TrainConfig, TrainingError, evaluate, extract_features, grad_check, predict_logits, train
from .weights import WeightFileError, load_weights, save_weights

ENV_PRECISION = "STIGCN_PRECISION"
NETWORK_PRESETS = ("ntu", "kinetics", "toy", "tiny", "curriculum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=1) + "\n")


def _say(msg):
    sys.stderr.write(msg + "\n")


def _default_precision():
    p = os.environ.get(ENV_PRECISION, "f32")
    if p not in PRECISIONS:
        raise UsageError(f"{ENV_PRECISION} must be one of {sorted(PRECISIONS)}, got {p!r}")
    return p


def _read_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    unknown = set(cfg) - {"network", "train", "data"}
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _network(args, cfg) -> NetworkConfig:
    """Network from --preset, else the config's network section, else a
    sidecar written next to --weights."""
    if getattr(args, "preset", None):
        net = preset_config(args.preset)
    elif "network" in cfg:
        net = NetworkConfig.from_dict(cfg["network"])
    elif getattr(args, "weights", None) and _sidecar(args.weights).exists():
        net = NetworkConfig.from_dict(json.loads(_sidecar(args.weights).read_text()))
    else:
        raise UsageError("a network is required: pass --preset or --config with a network section")
    if getattr(args, "data_bias", False):
        net = NetworkConfig.from_dict({**net.to_dict(), "data_bias": True})
    return net


def _train_config(args, cfg) -> TrainConfig:
    d = {"precision": _default_precision(), **cfg.get("train", {})}
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
        d["decay_epochs"] = [e for e in d.get("decay_epochs", []) if e < args.epochs]
    if getattr(args, "precision", None):
        d["precision"] = args.precision
    return TrainConfig.from_dict(d)


def _precision(args, cfg):
    return getattr(args, "precision", None) or cfg.get("train", {}).get("precision") or _default_precision()


def _sidecar(weights):
    p = Path(weights)
    return p.with_name(p.name + ".config.json")


def _synthetic(spec: dict, net: NetworkConfig, split, seed=None):
    allowed = {f.name for f in fields(SyntheticSpec)} - {"programs"}
    unknown = set(spec) - allowed
    if unknown:
        raise UsageError(f"unknown synthetic data fields: {sorted(unknown)}")
    d = {"class_count": net.class_count, "frames": net.frames, "bodies": net.bodies,
         "split": split, **spec}
    if seed is not None:
        d["seed"] = seed
    return generate_synthetic(SyntheticSpec(**d), net.topology)


def _dataset(args, cfg, net, split="train"):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    section = cfg.get("data", {}).get(split)
    if section is None:
        raise UsageError(f"no data: pass --data or add a data.{split} section to the config")
    if "path" in section:
        return load_dataset(section["path"])
    return _synthetic(section, net, split)


def _model(args, cfg):
    net = _network(args, cfg)
    dtype = PRECISIONS[_precision(args, cfg)]
    if getattr(args, "weights", None):
        return load_weights(args.weights, build_stigcn(net, dtype=dtype))
    raise UsageError("--weights is required")


# -- subcommands ------------------------------------------------------------

def cmd_graph(args):
    if args.edges:
        spec = json.loads(Path(args.edges).read_text())
        topo = build_topology(spec["edges"], spec.get("joint_count"), spec.get("center_joint", 0),
                              spec.get("name", "custom"))
    else:
        topo = build_topology(args.preset)
    mat = adjacency(topo)
    if args.kind in ("laplacian", "scaled_laplacian", "chebyshev"):
        mat = normalized_laplacian(mat)
    if args.kind in ("scaled_laplacian", "chebyshev"):
        mat = scaled_laplacian(mat, args.lambda_mode)
    if args.kind == "chebyshev":
        mat = chebyshev_basis(mat, args.order).matrices[args.order]
    _emit({**mat.to_json(), "topology": topo.name, "edge_checksum": edge_checksum(topo)})
    _say(f"{mat.kind} of {topo.name}: {mat.size}x{mat.size}")


def cmd_inspect(args):
    cfg = _read_config(args.config)
    net = _network(args, cfg)
    report = profile(build_stigcn(net, seed=0), frames=args.frames, bodies=args.bodies)
    _emit(report)
    _say(f"params {report['total_params']:,}  headline {report['headline_gflops']:.3f} GFLOPs")


def cmd_gradcheck(args):
    cfg = _read_config(args.config)
    net = _network(args, cfg) if (args.preset or "network" in cfg) else preset_config("tiny")
    report = grad_check(net, tolerance=args.tolerance, step=args.step, seed=args.seed,
                        batch=args.batch)
    _emit(report)
    worst = max(report["params"], key=lambda r: r["max_rel_err"])
    _say(f"{'PASS' if report['passed'] else 'FAIL'}: {report['param_count']} params, "
         f"worst {worst['name']} {worst['max_rel_err']:.2e} at {worst['worst_index']}")
    return 0 if report["passed"] else 2


def cmd_gen_data(args):
    topo = build_topology(args.topology)
    spec = SyntheticSpec(class_count=args.classes, samples_per_class=args.per_class,
                         frames=args.frames, bodies=args.bodies, noise_sigma=args.noise,
                         seed=args.seed, phase_jitter=args.phase_jitter, split=args.split)
    ds = generate_synthetic(spec, topo)
    man = save_dataset(ds, args.out)
    _emit({"path": str(args.out), "samples": len(ds), "shape": list(ds.X.shape[1:]),
           "num_classes": ds.num_classes, "topology": topo.name, "split": ds.split,
           "sha256": man["sha256"]})
    _say(f"wrote {len(ds)} samples to {args.out}")


def cmd_train(args):
    cfg = _read_config(args.config)
    net = _network(args, cfg)
    tcfg = _train_config(args, cfg)
    ds = _dataset(args, cfg, net)
    model = build_stigcn(net, seed=tcfg.seed, dtype=tcfg.dtype)
    _, records = train(model, ds, tcfg, log=args.log)
    out = {"epochs": tcfg.epochs, "samples": len(ds), "train": tcfg.to_dict(), "log": records}
    if args.out:
        save_weights(model, args.out)
        _sidecar(args.out).write_text(json.dumps(net.to_dict(), indent=1))
        out["weights"] = str(args.out)
    if cfg.get("data", {}).get("test") is not None or args.test_data:
        test = load_dataset(args.test_data) if args.test_data else _dataset(
            argparse.Namespace(), cfg, net, "test")
        out["test"] = evaluate(model, test)
    _emit(out)
    if records:
        last = records[-1]
        _say(f"epoch {last['epoch']}: loss {last['loss']:.4f} train_acc {last['train_acc']:.3f}")


def cmd_eval(args):
    cfg = _read_config(args.config)
    model = _model(args, cfg)
    ds = _dataset(args, cfg, model.config, "test")
    report = evaluate(model, ds, ks=tuple(args.k))
    _emit(report)
    _say("  ".join(f"{k} {v:.4f}" for k, v in report.items() if k != "count"))


def cmd_infer(args):
    cfg = _read_config(args.config)
    model = _model(args, cfg)
    ds = _dataset(args, cfg, model.config, "test")
    logits = predict_logits(model, ds.X)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob = z / z.sum(axis=1, keepdims=True)
    pred = np.argmax(logits, axis=1)
    _emit({"predictions": [{"id": ds.ids[i], "label": int(pred[i]),
                            "confidence": float(prob[i, pred[i]])} for i in range(len(ds))]})
    _say(f"labelled {len(ds)} samples")


def cmd_features(args):
    cfg = _read_config(args.config)
    model = _model(args, cfg)
    ds = _dataset(args, cfg, model.config, "test")
    feats = extract_features(model, ds.X)
    np.savez(args.out, features=feats, labels=ds.y, ids=np.array(ds.ids))
    _emit({"path": str(args.out), "shape": list(feats.shape)})
    _say(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {args.out}")


def cmd_retrieve(args):
    if args.features:
        with np.load(args.features) as z:
            feats, labels = z["features"], z["labels"]
    else:
        cfg = _read_config(args.config)
        model = _model(args, cfg)
        ds = _dataset(args, cfg, model.config, "test")
        feats, labels = extract_features(model, ds.X), ds.y
    res = retrieval_eval(feats, labels, metric=args.metric).to_dict()
    res["metric"] = args.metric
    _emit(res)
    _say(f"mAP {res['mAP']:.4f}  CMC@1 {res['cmc_rank1']:.4f}  excluded {len(res['excluded_queries'])}")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stigcn", description="Spatio-temporal inception graph networks for "
                "skeleton action recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def net_flags(sp, weights=False):
        sp.add_argument("--preset", choices=NETWORK_PRESETS, help="named network configuration")
        sp.add_argument("--config", help="JSON file with network/train/data sections")
        if weights:
            sp.add_argument("--weights", required=True, help="weight file written by train --out")
            sp.add_argument("--data", help=".sksq dataset (default: the config's data.test)")
            sp.add_argument("--precision", choices=sorted(PRECISIONS),
                            help=f"float width (default: ${ENV_PRECISION} or f32)")

    g = sub.add_parser("graph", help="dump an adjacency, Laplacian or Chebyshev matrix")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--preset", default="ntu25", help="topology preset (ntu25, kinetics18, mini5)")
    src.add_argument("--edges", help='JSON file {"edges": [[a, b], ...], "joint_count", "center_joint"}')
    g.add_argument("--kind", default="adjacency",
                   choices=("adjacency", "laplacian", "scaled_laplacian", "chebyshev"),
                   help="matrix to dump")
    g.add_argument("--order", type=int, default=1, help="Chebyshev order r (kind chebyshev)")
    g.add_argument("--lambda-mode", default="fixed_two", choices=("fixed_two", "exact"),
                   help="largest-eigenvalue estimate used for scaling")
    g.set_defaults(func=cmd_graph)

    i = sub.add_parser("inspect", help="parameter and FLOP report")
    net_flags(i)
    i.add_argument("--frames", type=int, help="override T for the FLOP count")
    i.add_argument("--bodies", type=int, help="override M for the FLOP count")
    i.add_argument("--data-bias", action="store_true", help="enable the data-dependent bias")
    i.set_defaults(func=cmd_inspect)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check (float64)")
    net_flags(gc)
    gc.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    gc.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    gc.add_argument("--seed", type=int, default=0, help="init and input seed")
    gc.add_argument("--batch", type=int, default=2, help="batch size of the probe input")
    gc.set_defaults(func=cmd_gradcheck)

    gd = sub.add_parser("gen-data", help="write a seeded synthetic .sksq dataset")
    gd.add_argument("--out", required=True, help="output .sksq path (manifest written alongside)")
    gd.add_argument("--topology", default="ntu25", help="topology preset")
    gd.add_argument("--classes", type=int, default=4, help="class count")
    gd.add_argument("--per-class", type=int, default=200, help="samples per class")
    gd.add_argument("--frames", type=int, default=64, help="frames per sample")
    gd.add_argument("--bodies", type=int, default=1, help="body slots")
    gd.add_argument("--noise", type=float, default=0.02, help="Gaussian noise sigma")
    gd.add_argument("--phase-jitter", type=float, default=2 * np.pi,
                    help="per-sample phase offsets drawn from [0, jitter)")
    gd.add_argument("--seed", type=int, default=0, help="generator seed")
    gd.add_argument("--split", default="train", choices=("train", "test"), help="split tag")
    gd.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network; writes weights and JSON-lines logs")
    net_flags(t)
    t.add_argument("--data", help=".sksq training set (default: the config's data.train)")
    t.add_argument("--test-data", help=".sksq held-out set evaluated after training")
    t.add_argument("--out", help="weight file to write")
    t.add_argument("--log", help="JSON-lines epoch log path")
    t.add_argument("--seed", type=int, help="override train.seed (also seeds initialization)")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--precision", choices=sorted(PRECISIONS),
                   help=f"float width (default: config, then ${ENV_PRECISION}, then f32)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-k accuracy of trained weights")
    net_flags(e, weights=True)
    e.add_argument("--k", type=int, nargs="+", default=[1, 5], help="k values")
    e.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", help="per-sample predicted labels")
    net_flags(inf, weights=True)
    inf.set_defaults(func=cmd_infer)

    f = sub.add_parser("features", help="pooled features to an .npz file")
    net_flags(f, weights=True)
    f.add_argument("--out", required=True, help="output .npz path")
    f.set_defaults(func=cmd_features)

    r = sub.add_parser("retrieve", help="leave-one-out retrieval mAP and CMC@1")
    r.add_argument("--features", help=".npz from the features command")
    r.add_argument("--preset", choices=NETWORK_PRESETS, help="named network configuration")
    r.add_argument("--config", help="JSON file with network/train/data sections")
    r.add_argument("--weights", help="weight file, used when --features is absent")
    r.add_argument("--data", help=".sksq dataset, used when --features is absent")
    r.add_argument("--precision", choices=sorted(PRECISIONS), help="float width")
    r.add_argument("--metric", default="cosine", choices=("cosine", "euclidean"),
                   help="similarity used for ranking")
    r.set_defaults(func=cmd_retrieve)
    return p


_RUNTIME_ERRORS = (WeightFileError, DataFormatError, TrainingError, OSError, RuntimeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = args.func(args)
    except _RUNTIME_ERRORS as exc:
        _say(f"stigcn {args.command}: {exc}")
        return 2
    except (UsageError, GraphError, ValueError, KeyError, TypeError) as exc:
        _say(f"stigcn {args.command}: {exc}")
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
