"""Tiny-cifar training smoke run: 30 epochs per seed, reports test top-1.

Takes hours on a single CPU core.  Usage:

    python scripts/train_cifar_smoke.py /path/to/cifar-10-batches-bin --seeds 0 1 2
"""
import argparse
import logging

from mlpmixer.checkpoint import save
from mlpmixer.data import load_cifar10
from mlpmixer.model import NAMED_CONFIGS
from mlpmixer.train import MetricsCSV, Schedule, TrainPlan, evaluate, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_dir")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out-prefix", default="smoke")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = NAMED_CONFIGS["tiny-cifar"]
    train, test = load_cifar10(args.data_dir)
    total = args.epochs * (len(train) // 128)
    for seed in args.seeds:
        plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", round(0.05 * total), total, 1e-3),
                         batch=128, mixup_p=0.2, stoch_depth=0.1, seed=seed)
        with MetricsCSV(f"{args.out_prefix}_seed{seed}.csv") as sink:
            result = train_loop(cfg, plan, train, sink=sink, val=test)
        save(result, f"{args.out_prefix}_seed{seed}.ckpt")
        loss, acc = evaluate(result.params, result.config, test)
        print(f"seed={seed} test_loss={loss:.4f} test_top1={acc:.4f}")


if __name__ == "__main__":
    main()
