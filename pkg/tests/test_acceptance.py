"""Acceptance criteria, one recorded PASS/FAIL line each (see the terminal summary)."""

import os
import time

import numpy as np
import pytest

from mlpmixer import tensor as T
from mlpmixer.checkpoint import from_bytes, to_bytes
from mlpmixer.data import load_cifar10, make_synthetic
from mlpmixer.gradcheck import check_gradients
from mlpmixer.model import (NAMED_CONFIGS, MixerConfig, bind, embed, flops_per_image, forward,
                            get_config, init_params, mixer_block, param_count, param_shapes,
                            randomized_params, token_features)
from mlpmixer.probe import few_shot_from_features, ridge_fit
from mlpmixer.surgery import (PermSpec, expand_for_resolution, expansion_param_delta, mosaic,
                              permute_input, permute_weights)
from mlpmixer.train import Schedule, TrainPlan, evaluate, train_loop

CIFAR_DIR = os.environ.get("MIXER_CIFAR10_DIR")
TINY = NAMED_CONFIGS["tiny-cifar"]


@pytest.fixture(scope="module")
def trained_tiny():
    """tiny-cifar after 20 optimizer steps on the offline stand-in data."""
    data = make_synthetic(320, TINY.image, seed=0)
    plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", 2, 20, 1e-3), batch=16, seed=0)
    return train_loop(TINY, plan, data).params


def closed_form_count(blocks, patch, c, d_s, d_c, res=224, ch=3):
    s = (res // patch) ** 2
    return (ch * patch * patch * c + c) + blocks * (4 * c + 2 * s * d_s + d_s + s + 2 * c * d_c + d_c + c) + 2 * c


def test_c01_named_parameter_counts(record_criterion):
    start = time.perf_counter()
    expected = {"S/32": 19, "S/16": 18, "B/32": 60, "B/16": 59, "L/32": 206, "L/16": 207, "H/14": 431}
    got = {name: round(param_count(get_config(name)) / 1e6) for name in expected}
    b16 = param_count(get_config("B/16"))
    elapsed = time.perf_counter() - start
    ok = got == expected and b16 == closed_form_count(12, 16, 768, 384, 3072) == 59_111_472 and elapsed < 1
    record_criterion("01 named-config parameter counts", ok, f"{got} B/16={b16} ({elapsed:.3f}s)")
    assert ok


def test_c02_named_sequence_lengths(record_criterion):
    start = time.perf_counter()
    got = {p: MixerConfig(1, p, 8, 8, 8, image=(224, 224, 3)).seq_len for p in (32, 16, 14)}
    elapsed = time.perf_counter() - start
    ok = got == {32: 49, 16: 196, 14: 256} and elapsed < 1
    record_criterion("02 named-config sequence lengths", ok, f"{got} ({elapsed:.3f}s)")
    assert ok


def test_c03_gradient_suite(record_criterion):
    start = time.perf_counter()
    cfg = NAMED_CONFIGS["toy"]  # 1 block, S=4, C=8
    worst, where = 0.0, None
    for seed in range(20):
        errors = check_gradients(cfg, seed)
        name = max(errors, key=errors.get)
        if errors[name] > worst:
            worst, where = errors[name], (seed, name)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record_criterion("03 gradient suite (20 seeds)", ok, f"max rel err {worst:.2e} at {where} ({elapsed:.1f}s)")
    assert ok


def test_c04_permutation_equivalence(record_criterion, trained_tiny):
    start = time.perf_counter()
    params = {k: v.astype(np.float32) for k, v in trained_tiny.items()}
    images = np.random.default_rng(0).random((32,) + TINY.image).astype(np.float32) * 2 - 1
    base = forward(images, params, TINY)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng([seed, 44])
        spec = PermSpec(rng.permutation(TINY.seq_len), rng.permutation(TINY.patch_dim))
        moved = forward(permute_input(images, spec, TINY), permute_weights(params, spec, TINY), TINY)
        worst = max(worst, float(np.max(np.abs(moved - base))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record_criterion("04 permutation equivalence (f32)", ok, f"max |logit delta| {worst:.2e} ({elapsed:.1f}s)")
    assert ok


def test_c05_expansion(record_criterion, trained_tiny):
    start = time.perf_counter()
    params = {k: v.astype(np.float32) for k, v in trained_tiny.items()}
    img = (np.random.default_rng(1).random(TINY.image).astype(np.float32) * 2 - 1)
    big_params, big = expand_for_resolution(params, TINY, 2)
    feats = token_features(mosaic(img, 2)[None], big_params, big)[0]
    single = token_features(img[None], params, TINY)[0]
    s = TINY.seq_len
    worst = max(float(np.max(np.abs(feats[i * s:(i + 1) * s] - single))) for i in range(4))
    pooled = float(np.max(np.abs(feats.mean(axis=0) - single.mean(axis=0))))
    delta = param_count(big) - param_count(TINY)
    # independent count of the dense expanded tensors
    dense = sum(int(np.prod(v)) for n, v in param_shapes(big).items() if not n.startswith("head")) - \
        sum(int(np.prod(v)) for n, v in param_shapes(TINY).items() if not n.startswith("head"))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and pooled < 1e-5 and delta == dense == expansion_param_delta(TINY, 2) and elapsed < 60
    record_criterion("05 K=2 expansion mosaic + dense count delta", ok,
                     f"per-part {worst:.2e}, pooled {pooled:.2e}, delta {delta} ({elapsed:.1f}s)")
    assert ok


@pytest.mark.xfail(strict=True, reason="the (K^4-K^2) coefficient omits the (K^2-1)*S*D_S diagonal growth "
                                       "of each dense w1/w2; see the decision log")
def test_c05b_expansion_delta_with_k4_minus_k2_coefficient(record_criterion):
    k, s, d, blocks = 2, TINY.seq_len, TINY.mlp_d_s, TINY.num_blocks
    formula = blocks * ((k**4 - k**2) * 2 * s * d + (k**2 - 1) * (d + s))
    _, big = expand_for_resolution(init_params(TINY), TINY, k)
    actual = param_count(big) - param_count(TINY)
    ok = actual == formula
    record_criterion("05b expansion delta vs (K^4-K^2) formula", ok,
                     f"actual {actual}, formula {formula}, gap {actual - formula} = 2L(K^2-1)S*D_S")
    assert ok


def test_c06_zero_residual_identity(record_criterion):
    start = time.perf_counter()
    cfg = TINY
    params = randomized_params(cfg, 0, dtype=np.float32)
    for name in params:
        if name.startswith("block") and name.split(".")[1][0] in "wb":
            params[name] = np.zeros_like(params[name])
    p = bind(params)
    images = np.random.default_rng(2).standard_normal((4,) + cfg.image).astype(np.float32)
    x = stem = embed(images, p, cfg)
    for i in range(cfg.num_blocks):
        x = mixer_block(x, p, i, cfg)
    elapsed = time.perf_counter() - start
    ok = np.array_equal(x.data, stem.data) and elapsed < 1
    record_criterion("06 zero-residual identity", ok, f"exact={np.array_equal(x.data, stem.data)} ({elapsed:.3f}s)")
    assert ok


def test_c07_flop_linearity(record_criterion):
    start = time.perf_counter()
    ratios, counted = [], []
    for grid in (4, 8, 16):  # S = 16, 64, 256
        cfg = MixerConfig(2, 2, 16, 8, 32, image=(2 * grid, 2 * grid, 3))
        block = flops_per_image(cfg) - flops_per_image(cfg.replace(num_blocks=0))
        ratios.append((block // cfg.seq_len, block % cfg.seq_len))
        with T.count_macs() as counter:
            forward(np.zeros((1,) + cfg.image), init_params(cfg), cfg)
        counted.append(counter.macs == flops_per_image(cfg))
    elapsed = time.perf_counter() - start
    ok = len(set(ratios)) == 1 and ratios[0][1] == 0 and all(counted) and elapsed < 1
    record_criterion("07 FLOP linearity in S", ok, f"per-token block MACs {ratios[0][0]} ({elapsed:.3f}s)")
    assert ok


def _two_epoch_data():
    if CIFAR_DIR:
        train, test = load_cifar10(CIFAR_DIR)
        return train, test, "cifar10"
    train = make_synthetic(4096, TINY.image, seed=0)
    test = make_synthetic(1024, TINY.image, seed=1, split="test")
    return train, test, "synthetic stand-in (CIFAR-10 not available offline)"


def test_c08_training_smoke_two_epochs(record_criterion):
    start = time.perf_counter()
    train, _, source = _two_epoch_data()
    per_epoch = len(train) // 128
    plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", round(0.05 * 2 * per_epoch), 2 * per_epoch, 1e-3),
                     batch=128, mixup_p=0.2, stoch_depth=0.1, seed=0)
    rows = []
    train_loop(TINY, plan, train, sink=rows.append)
    losses = [r["train_loss"] for r in rows]
    elapsed = time.perf_counter() - start
    ok = len(losses) == 2 and losses[1] < losses[0] and elapsed < 600
    record_criterion("08a training smoke, 2 epochs", ok,
                     f"epoch losses {[round(v, 4) for v in losses]} on {source} ({elapsed:.0f}s)")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion("08b training smoke, 30 epochs x 3 seeds")
def test_c08_training_smoke_thirty_epochs(record_criterion):
    if not CIFAR_DIR:
        record_criterion("08b training smoke, 30 epochs x 3 seeds", None,
                         "needs MIXER_CIFAR10_DIR; CIFAR-10 is not available offline")
        pytest.fail("criterion needs the real CIFAR-10 binaries in MIXER_CIFAR10_DIR")
    train, test = load_cifar10(CIFAR_DIR)
    per_epoch = len(train) // 128
    accs = []
    for seed in range(3):
        plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", round(0.05 * 30 * per_epoch),
                                           30 * per_epoch, 1e-3),
                         batch=128, mixup_p=0.2, stoch_depth=0.1, seed=seed)
        result = train_loop(TINY, plan, train)
        accs.append(evaluate(result.params, result.config, test)[1])
    ok = all(a >= 0.60 for a in accs)
    record_criterion("08b training smoke, 30 epochs x 3 seeds", ok, f"test top-1 {accs}")
    assert ok


def test_c09_probe_suite(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        f = rng.standard_normal((50, 32)) * rng.uniform(0.1, 10)
        y = np.eye(10)[rng.integers(0, 10, 50)]
        for lam in (1e-6, 1e-4, 1e-2, 1.0):
            w = ridge_fit(f, y, lam)
            resid = f.T @ (f @ w - y) + lam * len(f) * w
            worst = max(worst, np.linalg.norm(resid) / (np.linalg.norm(f.T @ y) + lam * len(f) * np.linalg.norm(w)))
    train_y, test_y = np.arange(200) % 10, rng.integers(0, 10, 500)
    perfect, _ = few_shot_from_features(np.eye(10)[train_y], train_y, np.eye(10)[test_y], test_y, 10)
    chance = []
    for seed in range(10):
        r = np.random.default_rng([seed, 9])
        acc, _ = few_shot_from_features(r.standard_normal((500, 32)), np.arange(500) % 10,
                                        r.standard_normal((2000, 32)), r.integers(0, 10, 2000), 10, seed=seed)
        chance.append(acc)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and perfect == 1.0 and abs(np.mean(chance) - 0.1) <= 0.03 and elapsed < 60
    record_criterion("09 probe suite", ok,
                     f"stationarity {worst:.1e}, perfect {perfect}, chance {np.mean(chance):.3f} ({elapsed:.2f}s)")
    assert ok


def test_c10_determinism_and_persistence(record_criterion):
    start = time.perf_counter()
    data = make_synthetic(256, TINY.image, seed=5)
    plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", 1, 8, 1e-3), batch=32, seed=5)
    a, b = to_bytes(train_loop(TINY, plan, data)), to_bytes(train_loop(TINY, plan, data))
    again = to_bytes(from_bytes(a))
    elapsed = time.perf_counter() - start
    ok = a == b == again and elapsed < 60
    record_criterion("10 determinism and persistence", ok,
                     f"reproducible={a == b}, round-trip={a == again}, {len(a)} bytes ({elapsed:.1f}s)")
    assert ok
