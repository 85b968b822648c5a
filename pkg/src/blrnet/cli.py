"""Command-line interface: pretrain, train, export, evaluate, benchmark.

Every metrics file is CSV with the full run configuration embedded as
leading `# key = value` comment lines, so any output is reproducible from
the file alone. Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bitpack import bit_forward, pack, xnor_dot
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import DatasetError, augment_batch, load_cifar10, load_mnist
from .export import (Ensemble, det_forward, ensemble_predict, error_coverage,
                     export, member_log_softmax, reestimate_bn,
                     uncertainty_statistic)
from .model import ModelSpec, build_stochastic
from .rng import RngStream
from .tensor import NumericError
from .training import (ObjectiveConfig, OptimizerState, evaluate_fp,
                       fp_pretrain, init_from_fp, run_training)


def _add_override_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--dataset", choices=["mnist", "cifar10"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--arch")
    p.add_argument("--objective",
                   choices=["variance-regularized", "variational-bound"])
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=["transfer", "xavier"])
    p.add_argument("--no-batchnorm", dest="batchnorm", action="store_false",
                   default=None)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--zca", action="store_true", default=None)
    p.add_argument("--output-dir", dest="output_dir")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    keys = ("dataset data_dir train_subset val_size arch objective tau lr "
            "batch_size epochs pretrain_epochs seed init batchnorm augment "
            "zca output_dir").split()
    return apply_overrides(cfg, {k: getattr(args, k, None) for k in keys})


def _load_dataset(cfg: RunConfig):
    path = cfg.data_dir or None
    if cfg.dataset == "mnist":
        ds = load_mnist(path, val_size=cfg.val_size)
    else:
        ds = load_cifar10(path, zca=cfg.zca, zca_eps=cfg.zca_eps,
                          val_size=cfg.val_size)
    if cfg.train_subset and cfg.train_subset < len(ds.train_x):
        ds.train_x = ds.train_x[:cfg.train_subset]
        ds.train_y = ds.train_y[:cfg.train_subset]
    return ds


def _write_metrics(path: Path, cfg: RunConfig, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for k, v in asdict(cfg).items():
            f.write(f"# {k} = {v}\n")
        f.write("epoch,split,loss,accuracy\n")
        for r in rows:
            f.write(f"{r['epoch']},{r['split']},{r['loss']:.17g},"
                    f"{r['accuracy']:.17g}\n")


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    spec = ModelSpec(cfg.arch, ds.input_shape, batchnorm=cfg.batchnorm)
    metrics: list[dict] = []
    net = fp_pretrain(spec, (ds.train_x, ds.train_y),
                      epochs=cfg.pretrain_epochs, seed=cfg.seed,
                      lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                      val=(ds.val_x, ds.val_y), metrics_out=metrics)
    out = _out(cfg)
    save_checkpoint(net, out / "fp.blrn", seed=cfg.seed,
                    metadata={"config": asdict(cfg)})
    tl, ta = evaluate_fp(net, ds.test_x, ds.test_y)
    metrics.append({"epoch": cfg.pretrain_epochs - 1, "split": "test",
                    "loss": tl, "accuracy": ta})
    _write_metrics(out / "pretrain.csv", cfg, metrics)
    print(f"fp test accuracy {ta:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    spec = ModelSpec(cfg.arch, ds.input_shape, batchnorm=cfg.batchnorm)
    rng = RngStream(cfg.seed)
    net = build_stochastic(spec, rng)
    if cfg.init == "transfer":
        fp_path = args.fp_checkpoint or (_out(cfg) / "fp.blrn")
        fp, _ = load_checkpoint(fp_path)
        init_from_fp(net, fp)
    obj = ObjectiveConfig(beta_var=cfg.beta_var, wd_softmax=cfg.wd_softmax,
                          tau=cfg.tau, kind=cfg.objective)
    opt = OptimizerState(net.parameters(), lr=cfg.lr, factor=cfg.lr_factor,
                         patience=cfg.lr_patience, min_delta=cfg.lr_min_delta,
                         lr_floor=cfg.lr_floor)
    train_x = ds.train_x
    if cfg.augment:
        train_x = augment_batch(ds.train_x, rng.child())
    metrics = run_training(net, obj, opt, (train_x, ds.train_y),
                           (ds.val_x, ds.val_y), cfg.epochs, rng,
                           batch_size=cfg.batch_size)
    out = _out(cfg)
    save_checkpoint(net, out / "model.blrn", seed=cfg.seed,
                    metadata={"config": asdict(cfg)})
    _write_metrics(out / "train.csv", cfg, metrics)
    print(f"final val accuracy {metrics[-1]['accuracy']:.4f}")
    return 0


def _bn_batches(ds, count: int = 8, size: int = 250):
    batches = [ds.train_x[i * size:(i + 1) * size] for i in range(count)]
    return [b for b in batches if len(b) >= 2]


def cmd_export(args) -> int:
    cfg = _resolve_config(args)
    net, _ = load_checkpoint(args.checkpoint)
    out = _out(cfg)
    rng = RngStream(cfg.seed)
    ds = _load_dataset(cfg) if args.reestimate else None
    for i in range(args.count):
        mode = args.mode
        det = export(net, mode, rng if mode == "sample" else None)
        if ds is not None:
            reestimate_bn(det, _bn_batches(ds))
        name = "map.blrn" if mode == "map" else f"sample_{i:03d}.blrn"
        save_checkpoint(det, out / name, seed=cfg.seed,
                        metadata={"mode": mode, "config": asdict(cfg)})
    return 0


def cmd_reestimate_bn(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    det, header = load_checkpoint(args.checkpoint)
    reestimate_bn(det, _bn_batches(ds, count=args.batches))
    save_checkpoint(det, args.checkpoint, seed=header["seed"],
                    metadata=header["metadata"])
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    det, _ = load_checkpoint(args.checkpoint)
    forward = bit_forward if args.engine == "bit" else det_forward
    logits = forward(det, ds.test_x)
    acc = float((logits.argmax(axis=1) == ds.test_y).mean())
    ls = member_log_softmax(det, ds.test_x)
    loss = float(-ls[np.arange(len(ds.test_y)), ds.test_y].mean())
    _write_metrics(_out(cfg) / "eval.csv", cfg,
                   [{"epoch": 0, "split": "test", "loss": loss,
                     "accuracy": acc}])
    print(f"test accuracy {acc:.4f} ({args.engine} engine)")
    return 0


def _load_ensemble(paths) -> Ensemble:
    return Ensemble([load_checkpoint(p)[0] for p in paths])


def cmd_ensemble_eval(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    ens = _load_ensemble(args.checkpoints)
    pred, _ = ensemble_predict(ens, ds.test_x)
    acc = float((pred == ds.test_y).mean())
    _write_metrics(_out(cfg) / "ensemble_eval.csv", cfg,
                   [{"epoch": 0, "split": "test", "loss": float("nan"),
                     "accuracy": acc}])
    print(f"ensemble of {len(ens.members)}: test accuracy {acc:.4f}")
    return 0


def cmd_coverage(args) -> int:
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    ens = _load_ensemble(args.checkpoints)
    pred, member_ls = ensemble_predict(ens, ds.test_x)
    scores = uncertainty_statistic(member_ls, pred)
    curve = error_coverage(scores, pred == ds.test_y)
    out = _out(cfg) / "coverage.csv"
    with open(out, "w") as f:
        for k, v in asdict(cfg).items():
            f.write(f"# {k} = {v}\n")
        f.write("coverage,error\n")
        for c, err in curve.points:
            f.write(f"{c:.17g},{err:.17g}\n")
    print(f"wrote {len(curve.points)} coverage points to {out}")
    return 0


def cmd_ablate(args) -> int:
    # self-contained pipeline variant for ablation studies
    cfg = _resolve_config(args)
    ds = _load_dataset(cfg)
    spec = ModelSpec(cfg.arch, ds.input_shape, batchnorm=cfg.batchnorm)
    rng = RngStream(cfg.seed)
    net = build_stochastic(spec, rng)
    if cfg.init == "transfer":
        fp = fp_pretrain(spec, (ds.train_x, ds.train_y),
                         epochs=cfg.pretrain_epochs, seed=cfg.seed,
                         lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                         val=(ds.val_x, ds.val_y))
        init_from_fp(net, fp)
    obj = ObjectiveConfig(beta_var=cfg.beta_var, wd_softmax=cfg.wd_softmax,
                          tau=cfg.tau, kind=cfg.objective)
    opt = OptimizerState(net.parameters(), lr=cfg.lr)
    metrics = run_training(net, obj, opt, (ds.train_x, ds.train_y),
                           (ds.val_x, ds.val_y), cfg.epochs, rng,
                           batch_size=cfg.batch_size)
    tag = f"{cfg.init}_{'bn' if cfg.batchnorm else 'nobn'}"
    _write_metrics(_out(cfg) / f"ablate_{tag}.csv", cfg, metrics)
    print(f"ablation {tag}: final val accuracy {metrics[-1]['accuracy']:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    rng = np.random.default_rng(cfg.seed)
    out = _out(cfg) / "bench.csv"
    with open(out, "w") as f:
        f.write("n,engine,ns_per_inference\n")
        for n in args.sizes:
            a = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            b = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            pa, pb = pack(a), pack(b)
            reps = max(10, args.reps)
            t0 = time.perf_counter_ns()
            for _ in range(reps):
                xnor_dot(pa, pb)
            bit_ns = (time.perf_counter_ns() - t0) / reps
            t0 = time.perf_counter_ns()
            for _ in range(reps):
                float(np.dot(a, b))
            float_ns = (time.perf_counter_ns() - t0) / reps
            f.write(f"{n},bit,{bit_ns:.1f}\n")
            f.write(f"{n},float,{float_ns:.1f}\n")
    print(f"wrote benchmark to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="blrnet",
        description="Train and deploy stochastic binary neural networks")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        _add_override_flags(p)
        p.set_defaults(fn=fn)
        return p

    add("pretrain", cmd_pretrain, help="train the full-precision twin")
    p = add("train", cmd_train, help="train the stochastic binary network")
    p.add_argument("--fp-checkpoint", type=Path,
                   help="full-precision checkpoint for transfer init")
    p = add("export", cmd_export, help="export deterministic binary nets")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=["map", "sample"], default="map")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--reestimate", action="store_true",
                   help="re-estimate BN statistics on training batches")
    p = add("reestimate-bn", cmd_reestimate_bn,
            help="refresh BN statistics of an exported net in place")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--batches", type=int, default=8)
    p = add("eval", cmd_eval, help="evaluate an exported net on the test set")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--engine", choices=["float", "bit"], default="float")
    p = add("ensemble-eval", cmd_ensemble_eval,
            help="evaluate an ensemble of exported nets")
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    p = add("coverage", cmd_coverage, help="write an error-coverage curve")
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    add("ablate", cmd_ablate,
        help="self-contained pipeline run for ablation studies")
    p = add("bench", cmd_bench, help="benchmark bit vs float dot products")
    p.add_argument("--sizes", type=int, nargs="+",
                   default=[64, 256, 1024, 4096])
    p.add_argument("--reps", type=int, default=100)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
