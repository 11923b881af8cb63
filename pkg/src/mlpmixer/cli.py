"""Command-line entry point. Every command prints ``key=value`` lines.

Exit codes: 0 success, 1 check failed (perm-check/gradcheck FAIL), 2 usage or
input error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .data import EmptyDatasetError, FormatError, build_perm_pipeline, load_dataset
from .gradcheck import check_gradients
from .model import (ConfigError, NAMED_CONFIGS, flops_per_image, forward, get_config, init_params,
                    param_count, randomized_params)
from .probe import DEFAULT_LAMBDAS, few_shot_eval, few_shot_from_features
from .surgery import UnsupportedVariant, expand_for_resolution, permute_input, permute_weights
from .train import Diverged, MetricsCSV, Schedule, TrainPlan, evaluate, train_loop

TOLERANCE = 1e-5


class UsageError(Exception):
    pass


def emit(**kv) -> None:
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}={v}")


def _config(args) -> tuple[str, object]:
    cfg = get_config(args.config)
    if getattr(args, "image", None):
        try:
            h, w = (int(v) for v in args.image.lower().split("x"))
        except ValueError:
            raise UsageError(f"--image must look like 224x224, got {args.image!r}") from None
        cfg = cfg.replace(image=(h, w, cfg.image[2]))
    return args.config, cfg


def cmd_params(args) -> int:
    name, cfg = _config(args)
    n = param_count(cfg)
    emit(config=name, image=f"{cfg.image[0]}x{cfg.image[1]}", seq_len=cfg.seq_len, params=n,
         params_m=f"{n / 1e6:.1f}M", params_m_rounded=round(n / 1e6), macs=flops_per_image(cfg))
    return 0


def cmd_flops(args) -> int:
    name, cfg = _config(args)
    macs = flops_per_image(cfg)
    emit(config=name, seq_len=cfg.seq_len, macs=macs, gmacs=macs / 1e9, params=param_count(cfg))
    return 0


def _datasets(args):
    if args.dataset != "synthetic":
        if not args.data_dir or not os.path.isdir(args.data_dir):
            raise UsageError(f"data directory {args.data_dir!r} does not exist")
    try:
        return load_dataset(args.dataset, args.data_dir)
    except (FileNotFoundError, FormatError, EmptyDatasetError) as err:
        raise UsageError(str(err)) from None


def _check_geometry(cfg, ds) -> None:
    if ds.geometry != cfg.image or ds.num_classes != cfg.num_classes:
        raise UsageError(f"model expects images {cfg.image} with {cfg.num_classes} classes; "
                         f"dataset has {ds.geometry} with {ds.num_classes}")


def cmd_train(args) -> int:
    _, cfg = _config(args)
    train, test = _datasets(args)
    if args.train_limit:
        train = train.subset(slice(0, args.train_limit))
    init = None
    if args.init:
        start = ckpt_io.load(args.init)
        cfg, init = start.config, start.params
    _check_geometry(cfg, train)
    per_epoch = len(train) // min(args.batch, len(train))
    total = args.epochs * per_epoch
    warmup = int(round(args.warmup * total))
    sched = Schedule(args.schedule, warmup, total, args.lr)
    plan = TrainPlan(schedule=sched, optimizer=args.optimizer, weight_decay=args.wd, batch=args.batch,
                     mixup_p=args.mixup, drop_rate=args.dropout, stoch_depth=args.stochdepth,
                     clip_norm=args.clip, augment=not args.no_augment, seed=args.seed)
    perm = build_perm_pipeline(args.perm, cfg, args.perm_seed) if args.perm != "none" else None
    sink = MetricsCSV(args.metrics) if args.metrics else None
    try:
        result = train_loop(cfg, plan, train, sink, val=test if args.validate else None, perm=perm, params=init)
    except Diverged as err:
        print(f"diverged at step {err.step}", file=sys.stderr)
        emit(status="diverged", step=err.step)
        return 3
    finally:
        if sink is not None:
            sink.close()
    if args.out:
        ckpt_io.save(result, args.out)
    emit(steps=total, status="ok")
    if args.eval_test and total:
        loss, acc = evaluate(result.params, result.config, test, perm=perm)
        emit(test_loss=loss, test_top1=acc)
    return 0


def cmd_eval(args) -> int:
    ck = ckpt_io.load(args.ckpt)
    _, test = _datasets(args)
    _check_geometry(ck.config, test)
    perm = build_perm_pipeline(args.perm, ck.config, args.perm_seed) if args.perm != "none" else None
    loss, acc = evaluate(ck.params, ck.config, test, perm=perm)
    emit(loss=loss, top1=acc, n=len(test))
    return 0


def _lambdas(text: str | None):
    if not text:
        return DEFAULT_LAMBDAS
    return tuple(float(v) for v in text.split(","))


def cmd_probe(args) -> int:
    lambdas = _lambdas(args.l2)
    if args.features:
        z = np.load(args.features)
        k = int(max(z["train_labels"].max(), z["test_labels"].max()) + 1)
        acc, lam = few_shot_from_features(z["train_features"], z["train_labels"], z["test_features"],
                                          z["test_labels"], k, args.shots, lambdas, args.seed)
        emit(few_shot_top1=acc, shots=args.shots, l2=lam)
        return 0
    if not args.ckpt:
        raise UsageError("probe needs --ckpt or --features")
    ck = ckpt_io.load(args.ckpt)
    train, test = _datasets(args)
    _check_geometry(ck.config, train)
    acc = few_shot_eval(ck.params, ck.config, train, test, args.shots, lambdas, args.seed)
    emit(few_shot_top1=acc, shots=args.shots)
    return 0


def cmd_expand(args) -> int:
    ck = ckpt_io.load(args.ckpt)
    try:
        params, cfg = expand_for_resolution(ck.params, ck.config, args.factor)
    except (UnsupportedVariant, ConfigError) as err:
        raise UsageError(str(err)) from None
    ckpt_io.save(Checkpoint(cfg, params, ck.state), args.out)
    emit(factor=args.factor, seq_len=cfg.seq_len, mlp_d_s=cfg.mlp_d_s, params=param_count(cfg))
    return 0


def cmd_perm_check(args) -> int:
    if args.ckpt:
        ck = ckpt_io.load(args.ckpt)
        cfg, params = ck.config, ck.params
    else:
        cfg = get_config(args.config)
        params = randomized_params(cfg, args.seed, dtype=np.float32)
    if cfg.variant != "standard":
        raise UsageError(f"perm-check supports the standard variant only, got {cfg.variant!r}")
    rng = np.random.default_rng(args.seed)
    images = rng.random((args.images,) + cfg.image).astype(np.float32)
    spec = build_perm_pipeline("patch", cfg, args.seed)
    base = forward(images, params, cfg)
    moved = forward(permute_input(images, spec, cfg), permute_weights(params, spec, cfg), cfg)
    delta = float(np.max(np.abs(base - moved)))
    ok = delta < TOLERANCE
    emit(max_abs_delta=delta, tolerance=TOLERANCE, result="PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    cfg = get_config(args.config)
    errors = check_gradients(cfg, args.seed)
    worst = max(errors, key=errors.get)
    ok = errors[worst] < TOLERANCE
    emit(max_rel_err=errors[worst], worst_param=worst, tensors=len(errors),
         result="PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    _, cfg = _config(args)
    params = init_params(cfg, args.seed)
    images = np.random.default_rng(args.seed).random((args.batch,) + cfg.image).astype(np.float32)
    forward(images, params, cfg)  # warm-up
    start = time.perf_counter()
    for _ in range(args.iters):
        forward(images, params, cfg)
    elapsed = time.perf_counter() - start
    ips = args.batch * args.iters / elapsed
    emit(batch=args.batch, iters=args.iters, threads=1, img_per_sec=ips,
         macs_per_sec=ips * flops_per_image(cfg))
    return 0


def cmd_viz(args) -> int:
    from .viz import export_stem_units, export_token_units
    ck = ckpt_io.load(args.ckpt)
    if not 0 <= args.block < ck.config.num_blocks:
        raise UsageError(f"block {args.block} out of range (model has {ck.config.num_blocks})")
    files = export_token_units(ck.params, ck.config, args.block, args.out)
    if args.stem:
        files += export_stem_units(ck.params, ck.config, args.out)
    emit(files=len(files), out=args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("params", cmd_params), ("flops", cmd_flops)):
        p = sub.add_parser(name, help="print sequence length, parameter count and MACs")
        p.add_argument("--config", required=True, help=f"one of {', '.join(NAMED_CONFIGS)} or a JSON file")
        p.add_argument("--image", help="override input resolution, e.g. 448x448")
        p.set_defaults(fn=fn)

    def data_flags(p, data_required=True):
        p.add_argument("--dataset", choices=("cifar10", "mnist", "synthetic"), required=data_required)
        p.add_argument("--data-dir")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default="tiny-cifar")
    data_flags(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=0.1)
    p.add_argument("--warmup", type=float, default=0.05, help="warmup fraction of total steps")
    p.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    p.add_argument("--schedule", choices=("linear_warmup_linear_decay", "linear_warmup_cosine"),
                   default="linear_warmup_linear_decay")
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--mixup", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--stochdepth", type=float, default=0.0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--perm", choices=("none", "patch", "global"), default="none")
    p.add_argument("--perm-seed", type=int, default=0)
    p.add_argument("--train-limit", type=int, default=0, help="use only the first N training images")
    p.add_argument("--init", help="start from this checkpoint (fine-tuning)")
    p.add_argument("--validate", action="store_true", help="evaluate the test split at each log row")
    p.add_argument("--eval-test", action="store_true", help="print test accuracy after training")
    p.add_argument("--out")
    p.add_argument("--metrics")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy on the test split")
    p.add_argument("--ckpt", required=True)
    data_flags(p)
    p.add_argument("--perm", choices=("none", "patch", "global"), default="none")
    p.add_argument("--perm-seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="linear few-shot probe on frozen features")
    p.add_argument("--ckpt")
    p.add_argument("--features", help="npz with train_features/train_labels/test_features/test_labels")
    data_flags(p, data_required=False)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--l2", help="comma-separated ridge lambdas")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("expand", help="block-diagonal expansion for a K times larger resolution")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_expand)

    p = sub.add_parser("perm-check", help="patch/pixel permutation equivalence check")
    p.add_argument("--ckpt")
    p.add_argument("--config", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=32)
    p.set_defaults(fn=cmd_perm_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a toy model")
    p.add_argument("--config", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="eval-mode throughput")
    p.add_argument("--config", default="tiny-cifar")
    p.add_argument("--image")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("viz", help="export token-mixing units as PGM images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--stem", action="store_true", help="also export stem projection units")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, UnsupportedVariant, ckpt_io.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
