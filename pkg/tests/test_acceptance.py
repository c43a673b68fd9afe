"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import copy
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from calibsmooth import experiment as ex
from calibsmooth.baselines import apply_temperature, erl_logit_grad, erl_loss, fit_temperature
from calibsmooth.metrics import OOD, PredictionSet, auroc, detection_f1, ece, nbaucc
from calibsmooth.numerics import (
    backward,
    cross_entropy,
    cross_entropy_logit_grad,
    entropy,
    forward,
    kl_divergence,
    neg_entropy_logit_grad,
    softmax,
)
from calibsmooth.regularizers import ManifoldSmoothingConfig, generate_off_manifold, generate_on_manifold, r_off, r_on
from conftest import central_diff, random_model, record_criterion, rel_err

CONFIG = Path(__file__).parents[1] / "configs" / "gaussian_ood.toml"


def synthetic_config(**over) -> ex.ExperimentConfig:
    values = ex.load_config(CONFIG)
    for key, value in over.items():
        ex.set_path(values, key, value)
    return ex.config_from_dict(values)


# -- 1: four-sample h1/h2 example ------------------------------------------------


def four_sample(ood_conf):
    conf = [0.9, 0.95] + ood_conf
    return PredictionSet([0, 0, OOD, OOD], [0, 0, 0, 0], conf)


def brute_nbaucc(pos, neg, tau_upper, m=50):
    total = Fraction(0)
    tu = Fraction(tau_upper).limit_denominator(10**6)
    pos = [Fraction(c).limit_denominator(10**6) for c in pos]
    neg = [Fraction(c).limit_denominator(10**6) for c in neg]
    for i in range(1, m + 1):
        tau = tu * i / m
        tp, fp = sum(c < tau for c in pos), sum(c < tau for c in neg)
        if tp:
            p, r = Fraction(tp, tp + fp), Fraction(tp, len(pos))
            total += 2 * p * r / (p + r)
    return float(total / m)


def test_criterion_1_four_sample_oracle():
    start = time.perf_counter()
    h1, h2 = four_sample([0.8, 0.85]), four_sample([0.1, 0.15])
    got = {
        "h1@0.5": nbaucc(h1, "ood", 0.5),
        "h2@0.5": nbaucc(h2, "ood", 0.5),
        "h1@1": nbaucc(h1, "ood", 1.0),
        "h2@1": nbaucc(h2, "ood", 1.0),
    }
    oracle = {
        "h1@0.5": brute_nbaucc([0.8, 0.85], [0.9, 0.95], 0.5),
        "h2@0.5": brute_nbaucc([0.1, 0.15], [0.9, 0.95], 0.5),
        "h1@1": brute_nbaucc([0.8, 0.85], [0.9, 0.95], 1.0),
        "h2@1": brute_nbaucc([0.1, 0.15], [0.9, 0.95], 1.0),
    }
    aurocs = (auroc(h1, "ood"), auroc(h2, "ood"))
    elapsed = time.perf_counter() - start
    ok = (
        got["h1@0.5"] == 0.0
        and abs(got["h2@0.5"] - 0.773) <= 0.03
        and abs(got["h1@1"] - 0.145) <= 0.03
        and abs(got["h2@1"] - 0.845) <= 0.03
        and all(abs(got[k] - oracle[k]) < 1e-12 for k in got)
        and aurocs == (1.0, 1.0)
        and elapsed < 1.0
    )
    detail = ", ".join(f"{k}={v:.4f}" for k, v in got.items()) + f", auroc={aurocs}, {elapsed:.3f}s"
    record_criterion(1, "four-sample NBAUCC oracle", ok, detail)
    assert ok


# -- 2: gradient suite -----------------------------------------------------------


def _losses(model, x, y, on, off, dropout_seed):
    """Scalar losses keyed by name, each with its analytic parameter gradient."""
    n = len(x)

    def fwd(inp):
        rng = np.random.default_rng(dropout_seed) if model.dropout_rate else None
        return forward(model, inp, "train" if rng is not None else "eval", rng)

    def ce():
        return float(np.mean(cross_entropy(y, fwd(x).output)))

    def ce_grad():
        res = fwd(x)
        return backward(model, res.cache, grad_logits=cross_entropy_logit_grad(y, res.output) / n)

    def erl():
        return float(np.mean(erl_loss(fwd(x).output, y, 0.3)))

    def erl_grad():
        res = fwd(x)
        return backward(model, res.cache, grad_logits=erl_logit_grad(res.output, y, 0.3) / n)

    def kl():
        return r_on(model, on)[0]

    def neg_h():
        return r_off(model, off)[0]

    def composite():
        return ce() + 0.7 * kl() + 0.4 * neg_h()

    def composite_grad():
        tape = ce_grad()
        tape.add(r_on(model, on)[1], 0.7)
        tape.add(r_off(model, off)[1], 0.4)
        return tape

    return {
        "ce": (ce, ce_grad),
        "erl": (erl, erl_grad),
        "r_on(kl)": (kl, lambda: r_on(model, on)[1]),
        "r_off(entropy)": (neg_h, lambda: r_off(model, off)[1]),
        "composite": (composite, composite_grad),
    }


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    worst = {}
    activations = ["tanh", "relu", "linear"]
    for seed in range(24):
        rng = np.random.default_rng(1000 + seed)
        d, k = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        sizes = (d, int(rng.integers(3, 6)), int(rng.integers(2, 5)), k)
        model = random_model(rng, sizes, activations[seed % 3], dropout_rate=0.2 if seed % 4 == 0 else 0.0)
        x = rng.normal(size=(5, d))
        y = np.eye(k)[rng.integers(0, k, 5)]
        cfg = ManifoldSmoothingConfig(delta_on=0.05, delta_off=0.2)
        on = generate_on_manifold(model, x, y, cfg, rng)
        off = generate_off_manifold(model, x, y, cfg, rng)
        for name, (loss, grad) in _losses(model, x, y, on, off, seed).items():
            tape = grad()
            err = max(rel_err(g, central_diff(loss, p)) for p, g in zip(model.parameters(), tape.parameters()))
            worst[name] = max(worst.get(name, 0.0), err)
    # logit-level identities for the information quantities
    rng = np.random.default_rng(7)
    for _ in range(20):
        z = rng.normal(size=(4, 3))
        q = np.eye(3)[rng.integers(0, 3, 4)] * 0.8 + 0.2 / 3
        kl_fd = central_diff(lambda: float(np.sum(kl_divergence(q, softmax(z)))), z)
        worst["kl(logits)"] = max(worst.get("kl(logits)", 0.0), rel_err(cross_entropy_logit_grad(q, softmax(z)), kl_fd))
        h_fd = central_diff(lambda: float(np.sum(-entropy(softmax(z)))), z)
        worst["entropy(logits)"] = max(worst.get("entropy(logits)", 0.0), rel_err(neg_entropy_logit_grad(softmax(z)), h_fd))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; 24 models, {elapsed:.1f}s"
    record_criterion(2, "gradient suite", ok, detail)
    assert ok


# -- 3: constraint suite ---------------------------------------------------------


def test_criterion_3_constraint_suite():
    violations = 0
    triples = 1200
    for seed in range(triples):
        rng = np.random.default_rng(seed)
        d, k, n = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 9))
        model = random_model(rng, (d, int(rng.integers(3, 7)), k), ["tanh", "relu"][seed % 2])
        x = rng.normal(size=(n, d)) * rng.uniform(0.1, 5)
        labels = rng.integers(0, k, n)
        y = np.eye(k)[labels]
        cfg = ManifoldSmoothingConfig(
            delta_on=float(10 ** rng.uniform(-5, 0)),
            delta_off=float(10 ** rng.uniform(-4, 0.5)),
            delta_y=float(rng.uniform(0, 1)),
            inner_steps=int(rng.integers(1, 4)),
        )
        on = generate_on_manifold(model, x, y, cfg, rng)
        off = generate_off_manifold(model, x, y, cfg, rng)
        ball = np.all(np.abs(on.x_prime - x[on.anchor_index]) <= cfg.delta_on + 1e-12)
        radius = np.max(np.abs(off.x_dprime - x[off.anchor_index]), axis=1)
        sphere = np.all(np.abs(radius - cfg.delta_off) <= 1e-9 * cfg.delta_off)
        simplex = np.all(on.y_prime >= 0) and np.allclose(on.y_prime.sum(axis=1), 1.0, atol=1e-12)
        split = True
        for a, p, yp in zip(on.anchor_index, on.partner_index, on.y_prime):
            expect = (1 - cfg.delta_y) * y[a] + cfg.delta_y * y[p]
            split &= bool(np.array_equal(yp, expect))
            if labels[a] != labels[p]:
                split &= yp[labels[a]] == 1 - cfg.delta_y and yp[labels[p]] == cfg.delta_y
        violations += not (ball and sphere and simplex and split)
    ok = violations == 0
    record_criterion(3, "constraint suite", ok, f"{triples} (model, batch, seed) triples, {violations} violations")
    assert ok


# -- 4: metric identities --------------------------------------------------------


def test_criterion_4_metric_identities():
    checks = {}
    # bin-calibrated: every bin's confidence equals its accuracy
    conf, hit = [], []
    for c, correct in ((0.3, 3), (0.5, 5), (0.7, 7), (0.9, 9)):
        conf += [c] * 10
        hit += [True] * correct + [False] * (10 - correct)
    recs = PredictionSet(np.where(hit, 0, 1), np.zeros(len(hit), int), conf)
    checks["ece_calibrated"] = ece(recs) < 1e-12
    for a in (0.0, 0.5, 0.9):
        n_right = int(round(a * 20))
        recs = PredictionSet([0] * n_right + [1] * (20 - n_right), [0] * 20, [1.0] * 20)
        checks[f"ece_confident_a={a}"] = abs(ece(recs) - (1 - a)) < 1e-12
    mixed = PredictionSet([0, 1, OOD, 0], [0, 0, 1, 1], [0.9, 0.6, 0.4, 0.7])
    checks["f1_tau0"] = (
        detection_f1(mixed, "ood", 0.0) == 0.0 and detection_f1(mixed.in_distribution(), "misclassified", 0.0) == 0.0
    )
    art = ex.train(synthetic_config(method="vanilla", **{"optim.epochs": 20}))
    bundle = ex.load_data(art.config.data)
    logits = forward(art.model, bundle.test_x).logits
    t = fit_temperature(forward(art.model, bundle.dev_x).logits, bundle.dev_y)
    plain = PredictionSet.from_probs(forward(art.model, bundle.test_x).output, bundle.test_y)
    scaled = PredictionSet.from_probs(apply_temperature(logits, t), bundle.test_y)
    checks["ts_preserves_labels"] = np.array_equal(plain.predicted, scaled.predicted) and plain.accuracy() == scaled.accuracy()
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(4, "metric identities", ok, f"{len(checks)} checks, T={t:.3f}" + (f", failed {failed}" if failed else ""))
    assert ok


# -- 5: reduction equivalence ----------------------------------------------------


def test_criterion_5_reduction_equivalence():
    zero = ex.train(synthetic_config(**{"smoothing.lambda_on": 0.0, "smoothing.lambda_off": 0.0}))
    vanilla = ex.train(synthetic_config(method="vanilla"))
    same_losses = [r["loss"] for r in zero.trace] == [r["loss"] for r in vanilla.trace]
    same_params = all(a.tobytes() == b.tobytes() for a, b in zip(zero.model.parameters(), vanilla.model.parameters()))
    ok = same_losses and same_params
    record_criterion(5, "reduction equivalence", ok, f"{len(zero.trace)} epochs, losses bitwise equal={same_losses}, params equal={same_params}")
    assert ok


# -- 6: directional end-to-end ---------------------------------------------------


def _paired(config, seeds):
    rows = []
    for s in seeds:
        cfg = copy.deepcopy(config)
        cfg.seed = s
        rows.append(ex.summarize(ex.train(cfg).report, 0.5))
    return {k: float(np.mean([r[k] for r in rows])) for k in ("accuracy", "ece", "nbaucc_ood", "nbaucc_mis", "mean_conf_ood")}


def test_criterion_6_directional_end_to_end():
    start = time.perf_counter()
    seeds = range(5)
    vanilla = _paired(synthetic_config(method="vanilla"), seeds)
    full = _paired(synthetic_config(), seeds)
    off_only = _paired(synthetic_config(**{"smoothing.lambda_on": 0.0}), seeds)
    elapsed = time.perf_counter() - start
    checks = {
        "ece": full["ece"] < vanilla["ece"],
        "ood": full["nbaucc_ood"] > vanilla["nbaucc_ood"],
        "mis": full["nbaucc_mis"] > vanilla["nbaucc_mis"],
        "acc": abs(full["accuracy"] - vanilla["accuracy"]) <= 0.02,
        "r_off_ood": off_only["nbaucc_ood"] > vanilla["nbaucc_ood"],
        "runtime": elapsed < 600,
    }
    ok = all(checks.values())
    detail = (
        f"ECE {vanilla['ece']:.4f}->{full['ece']:.4f}, "
        f"OOD {vanilla['nbaucc_ood']:.4f}->{full['nbaucc_ood']:.4f}, "
        f"Mis {vanilla['nbaucc_mis']:.4f}->{full['nbaucc_mis']:.4f}, "
        f"acc {vanilla['accuracy']:.4f}->{full['accuracy']:.4f}, "
        f"R_off-only OOD {off_only['nbaucc_ood']:.4f}, {elapsed:.0f}s"
    )
    failed = [k for k, v in checks.items() if not v]
    record_criterion(6, "directional end-to-end", ok, detail + (f"; failed {failed}" if failed else ""))
    assert ok


# -- 7: sweep sanity -------------------------------------------------------------


def test_criterion_7_sweep_sanity():
    grid = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]
    rows = ex.sweep(synthetic_config(), "delta_off", grid, repeats=3)
    assert all(r["status"] == "ok" for r in rows)
    means = [r["ece"] for r in rows]
    pooled_std = math.sqrt(np.mean([r["ece_std"] ** 2 for r in rows]))
    spread = max(means) - min(means)
    ok = len(rows) == len(grid) and spread > 2 * pooled_std
    detail = "ECE " + ", ".join(f"{v:g}:{m:.4f}" for v, m in zip(grid, means)) + f"; spread {spread:.4f} vs 2*std {2 * pooled_std:.4f}"
    record_criterion(7, "delta_off sweep sensitivity", ok, detail)
    assert ok
