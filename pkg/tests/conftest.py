"""Shared fixtures and gradient-check cases."""

from __future__ import annotations

import numpy as np
import pytest

from anchorret import numcore as nc
from anchorret.objectives import EmbeddingBatch, LossConfig, total_loss
from anchorret.synthgen import SplitSpec, build_lexicon, generate_in_memory

H = 1e-5
TOL = 1e-4

# verdict lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def _sq(x):
    # sum of squares keeps the root scalar and every gradient non-trivial
    return nc.total(nc.mul(x, x))


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _case_total_loss(rng, cfg):
    V = nc.parameter(rng.normal(size=(6, 4)))
    Z = nc.parameter(rng.normal(size=(6, 4)))
    log_tau = nc.parameter([np.log(0.5)])
    labels = np.array([0, 1, 0, 2, 1, 2])

    def f():
        batch = EmbeddingBatch(nc.l2_normalize(V), nc.l2_normalize(Z), labels)
        return total_loss(batch, cfg, nc.exp(log_tau))

    return f, [V, Z, log_tau]


def _binary(op):
    def make(rng):
        a = nc.parameter(rng.normal(size=(3, 4)))
        b = nc.parameter(rng.normal(size=(3, 4)))
        return (lambda: _sq(op(a, b))), [a, b]
    return make


def _unary(op, positive=False):
    def make(rng):
        v = rng.normal(size=(3, 4))
        if positive:
            v = np.abs(v) + 0.5
        else:
            v = np.where(np.abs(v) < 0.05, 0.3, v)  # keep relu away from its kink
        x = nc.parameter(v)
        return (lambda: _sq(op(x))), [x]
    return make


def _mean(rng):
    x = nc.parameter(rng.normal(size=(3, 4)))
    return (lambda: nc.mean(nc.tanh(x))), [x]


def _matmul(rng):
    a = nc.parameter(rng.normal(size=(3, 5)))
    b = nc.parameter(rng.normal(size=(5, 2)))
    return (lambda: _sq(nc.matmul(a, b))), [a, b]


def _add_bias(rng):
    x = nc.parameter(rng.normal(size=(4, 3)))
    b = nc.parameter(rng.normal(size=(3,)))
    return (lambda: _sq(nc.add_bias(x, b))), [x, b]


def _scale_by(rng):
    x = nc.parameter(rng.normal(size=(3, 3)))
    s = nc.parameter([rng.uniform(0.5, 2.0)])
    return (lambda: _sq(nc.scale_by(x, s))), [x, s]


def _diag_lse(rng):
    x = nc.parameter(rng.normal(size=(4, 4)))
    return (lambda: nc.total(nc.logsumexp_rows(x)) - nc.total(nc.diag(x))), [x]


def _concat(rng):
    a = nc.parameter(rng.normal(size=(2, 3)))
    b = nc.parameter(rng.normal(size=(3, 3)))
    return (lambda: _sq(nc.tanh(nc.concat_rows(a, b)))), [a, b]


def _normalize_vec(rng):
    x = nc.parameter(rng.normal(size=(5,)))
    w = nc.constant(rng.normal(size=(5,)))
    return (lambda: nc.total(nc.mul(nc.l2_normalize(x), w))), [x]


def _normalize_rows(rng):
    x = nc.parameter(rng.normal(size=(4, 3)))
    w = nc.constant(rng.normal(size=(4, 3)))
    return (lambda: nc.total(nc.mul(nc.l2_normalize(x), w))), [x]


def _mlp(rng):
    x = nc.constant(rng.normal(size=(5, 6)))
    w1 = nc.parameter(rng.normal(size=(6, 4)) * 0.5)
    b1 = nc.parameter(rng.normal(size=(4,)) * 0.1)
    w2 = nc.parameter(rng.normal(size=(4, 3)) * 0.5)
    return (lambda: nc.mean(nc.l2_normalize(nc.matmul(nc.tanh(nc.add_bias(nc.matmul(x, w1), b1)), w2)))), [w1, b1, w2]


def _reuse(rng):
    # the same leaf on several paths
    x = nc.parameter(rng.normal(size=(3, 3)))
    return (lambda: nc.total(nc.matmul(x, nc.transpose(x))) + _sq(x)), [x]


GRAD_CASES = {
    "add": _binary(nc.add),
    "sub": _binary(nc.sub),
    "mul": _binary(nc.mul),
    "matmul": _matmul,
    "transpose": _unary(nc.transpose),
    "add_bias": _add_bias,
    "scale": _unary(lambda x: nc.scale(x, -2.5)),
    "scale_by": _scale_by,
    "tanh": _unary(nc.tanh),
    "relu": _unary(nc.relu),
    "exp": _unary(lambda x: nc.exp(nc.scale(x, 0.5))),
    "reciprocal": _unary(nc.reciprocal, positive=True),
    "mean": _mean,
    "logsumexp_diag": _diag_lse,
    "concat_rows": _concat,
    "l2_normalize_vector": _normalize_vec,
    "l2_normalize_rows": _normalize_rows,
    "mlp": _mlp,
    "reuse": _reuse,
    "total_loss_full": lambda rng: _case_total_loss(rng, LossConfig()),
    "total_loss_v2t_inv": lambda rng: _case_total_loss(rng, LossConfig(use_t2v=False)),
    "total_loss_t2v_only": lambda rng: _case_total_loss(rng, LossConfig(use_v2t=False, use_inv=False)),
    "total_loss_inv_only": lambda rng: _case_total_loss(rng, LossConfig(use_v2t=False, use_t2v=False)),
}


def gradcheck(name: str, seed: int) -> float:
    """Worst relative error between backward and central differences over all leaves."""
    rng = np.random.default_rng(seed)
    f, leaves = GRAD_CASES[name](rng)
    for leaf in leaves:
        leaf.zero_grad()
    nc.backward(f())
    worst = 0.0
    for leaf in leaves:
        numeric = nc.numerical_grad(lambda: f().item(), leaf.value, H)
        worst = max(worst, nc.relative_error(leaf.grad, numeric))
    return worst


@pytest.fixture(scope="session")
def lexicon():
    return build_lexicon(20, ("en", "zh", "es"), seed=0)


TINY_SPLITS = {
    "train": SplitSpec((0, 15), 2, 1.0),
    "ood_eval": SplitSpec((20, 28), 1, 1.5),
    "finetune": SplitSpec((28, 40), 2, 1.5),
}


@pytest.fixture(scope="session")
def tiny_dataset(lexicon):
    """120 train / 60 OOD / 120 fine-tune samples; enough for shape and contract tests."""
    return generate_in_memory(lexicon, TINY_SPLITS, seed=3)
