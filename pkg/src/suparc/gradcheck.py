"""Central-difference verification of every differentiable op, loss and model block.

Each check draws a seeded random case, reduces the op's output to a scalar
with a random weighting (so no gradient coordinate is trivially symmetric),
and compares ``backward`` against :func:`finite_difference_gradient`.
Inputs are kept away from kinks and clamp boundaries, where the two
estimates legitimately disagree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, finite_difference_gradient, relative_error
from .data import collate, Utterance
from .losses import (
    arccos_loss,
    mae_loss,
    pair_label,
    suparc_loss,
    supervised_ntxent,
    total_loss,
    triplet_modalities_loss,
)
from .model import EncoderConfig, init_params

TOLERANCE = 1e-4
STEP = 1e-5
ERROR_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    group: str
    trials: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.group:<6} {self.name:<22} trials={self.trials:<4d} max_rel_err={self.max_error:.3e}"


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.mul(out, w))


def _away_from(x: np.ndarray, points, gap: float = 1e-2) -> np.ndarray:
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.where(x[close] >= p, gap, -gap)
    return x


def _unary(op: Callable, sampler: Callable) -> Callable:
    def build(rng):
        x = sampler(rng)
        w = rng.standard_normal(op(Tensor(x)).shape)
        return (lambda X: _weighted(op(X), w)), x
    return build


def _binary(op: Callable, which: int, sample_a: Callable, sample_b: Callable) -> Callable:
    def build(rng):
        a, b = sample_a(rng), sample_b(rng)
        w = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        if which == 0:
            return (lambda X: _weighted(op(X, b), w)), a
        return (lambda X: _weighted(op(a, X), w)), b
    return build


def _normal(shape):
    return lambda rng: rng.standard_normal(shape)


def _positive(shape):
    return lambda rng: np.abs(rng.standard_normal(shape)) + 0.1


def _nonzero(shape):
    return lambda rng: _away_from(rng.standard_normal(shape), [0.0], 0.05)


def _build_matmul_a(rng):
    return _binary(ad.matmul, 0, _normal((3, 4)), _normal((4, 2)))(rng)


def _build_getitem(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((4, 3))
    return (lambda X: _weighted(X[:, 2:5], w)), x


def _build_take_rows(rng):
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 5, size=7)
    w = rng.standard_normal((7, 3))
    return (lambda X: _weighted(ad.take_rows(X, idx), w)), x


def _build_concat(rng):
    x = rng.standard_normal((3, 2))
    other = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 6))
    return (lambda X: _weighted(ad.concat([other, X], axis=1), w)), x


def _build_sum_axis(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal(4)
    return (lambda X: _weighted(ad.tensor_sum(X, axis=0), w)), x


def _build_cosine(rng):
    a = rng.standard_normal(5)
    b = rng.standard_normal(5)
    return (lambda X: ad.cosine_similarity(X, b)), a


def _build_pairwise(rng):
    h = rng.standard_normal((5, 3))
    w = rng.standard_normal((5, 5))
    return (lambda X: _weighted(ad.pairwise_cosine(X), w)), h


def _build_rowwise(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    w = rng.standard_normal(4)
    return (lambda X: _weighted(ad.rowwise_cosine(a, X), w)), b


def _label_batch(rng, n: int = 6) -> np.ndarray:
    y = rng.uniform(-3, 3, n)
    y[1] = y[0] + rng.uniform(-0.4, 0.4)
    return np.clip(y, -3, 3)


def _build_mae(rng):
    y = rng.uniform(-3, 3, 6)
    y_hat = y + _away_from(rng.standard_normal(6), [0.0], 1e-2)
    return (lambda X: mae_loss(X, y)), y_hat


def _build_ntxent(rng):
    h = rng.standard_normal((6, 4))
    pairs = pair_label(_label_batch(rng), 0.5)
    return (lambda X: supervised_ntxent(X, pairs, 0.1)), h


def _build_arccos(rng):
    h = rng.standard_normal((6, 4))
    pairs = pair_label(_label_batch(rng), 0.5)
    m = rng.uniform(0, 0.5)
    return (lambda X: arccos_loss(X, pairs, 0.1, m)), h


def _build_suparc(rng):
    m = 0.15
    while True:
        h = rng.standard_normal((6, 4))
        y = _label_batch(rng)
        unit = h / np.linalg.norm(h, axis=1, keepdims=True)
        theta = np.arccos(np.clip(unit @ unit.T, -1, 1))
        delta = np.abs(y[:, None] - y[None, :])
        shifted = (theta - m * delta)[delta > 0.5]
        # only negatives pass through the [0, pi] clamp
        if np.all(np.minimum(np.abs(shifted), np.abs(shifted - np.pi)) > 1e-3):
            break
    pairs = pair_label(y, 0.5)
    return (lambda X: suparc_loss(X, y, pairs, 0.1, m)), h


def _split7(X):
    return X[0:3], {m: X[3 + 3 * k:6 + 3 * k] for k, m in enumerate("tva")}, {
        frozenset(p): X[12 + 3 * k:15 + 3 * k] for k, p in enumerate(("tv", "ta", "va"))
    }


def _triplet_args(x):
    def unit(v):
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    h, singles, doubles = x[0:3], {m: x[3 + 3 * k:6 + 3 * k] for k, m in enumerate("tva")}, {
        p: x[12 + 3 * k:15 + 3 * k] for k, p in enumerate(("tv", "ta", "va"))
    }
    s1 = {m: np.sum(unit(h) * unit(v), axis=1) for m, v in singles.items()}
    s2 = {p: np.sum(unit(h) * unit(v), axis=1) for p, v in doubles.items()}
    args = []
    for p, v in s2.items():
        for m in p:
            args.append(v - s1[m] + 0.2)
    return np.concatenate(args)


def _build_triplet(rng):
    while True:
        x = rng.standard_normal((21, 4))
        if np.all(np.abs(_triplet_args(x)) > 1e-3):
            break

    def f(X):
        h, singles, doubles = _split7(X)
        return triplet_modalities_loss(h, singles, doubles, 0.2)

    return f, x


def _build_total(rng):
    h = rng.standard_normal((6, 4))
    y = _label_batch(rng)
    pairs = pair_label(y, 0.5)
    y_hat = y + _away_from(rng.standard_normal(6), [0.0], 1e-2)
    w = rng.standard_normal((6, 4))

    def f(X):
        main = mae_loss(ad.add(Tensor(y_hat), ad.tensor_sum(ad.mul(X, w)) * 0.01), y)
        return total_loss(main, supervised_ntxent(X, pairs, 0.5), ad.mean(ad.tanh(X)), 0.1, 0.1)

    return f, h


# ------------------------------------------------------------------ model

_SMALL = EncoderConfig(text_vocab=7, text_embed_dim=3, visual_in=3, audio_in=2, hidden=2, rep_dim=3)


def _small_batch(rng, n: int = 3):
    utterances = []
    for i in range(n):
        utterances.append(Utterance(
            id=str(i),
            y=float(rng.uniform(-3, 3)),
            text=rng.integers(0, _SMALL.text_vocab, size=int(rng.integers(1, 4))),
            visual=rng.standard_normal((int(rng.integers(1, 4)), _SMALL.visual_in)),
            audio=rng.standard_normal((int(rng.integers(1, 4)), _SMALL.audio_in)),
        ))
    return collate(utterances)


def _model_check(param: str, forward: Callable) -> Callable:
    def build(rng):
        model = init_params(_SMALL, int(rng.integers(0, 2**31)))
        # nonzero biases so every path carries signal
        for p in model.parameters():
            p.values = p.values + 0.1 * rng.standard_normal(p.shape)
        batch = _small_batch(rng)
        x = model.params[param].values.copy()
        out_shape = forward(model, batch).shape
        w = rng.standard_normal(out_shape)

        def f(X):
            model.params[param] = X
            return _weighted(forward(model, batch), w)

        return f, x
    return build


def _fwd_text(model, batch):
    return model.encode_text(batch)


def _fwd_recurrent(model, batch):
    return model.encode_recurrent("visual", batch.visual, batch.visual_lengths)


def _fwd_fuse(model, batch):
    return model.fuse(*model.encode(batch))


def _fwd_masked(model, batch):
    h_t, h_v, h_a = model.encode(batch)
    return model.masked_fuse(h_t, h_v, h_a, ("v",))


def _fwd_predict(model, batch):
    return model.predict(model.fuse(*model.encode(batch)))


CHECKS: dict[str, tuple[str, Callable]] = {
    "matmul_a": ("op", _build_matmul_a),
    "matmul_b": ("op", _binary(ad.matmul, 1, _normal((3, 4)), _normal((4, 2)))),
    "add": ("op", _binary(ad.add, 0, _normal((3, 2)), _normal((3, 2)))),
    "add_scalar": ("op", _binary(ad.add, 1, _normal((3, 2)), _normal(()))),
    "sub": ("op", _binary(ad.sub, 1, _normal((3, 2)), _normal((3, 2)))),
    "mul": ("op", _binary(ad.mul, 0, _normal((3, 2)), _normal((3, 2)))),
    "mul_scalar": ("op", _binary(ad.mul, 1, _normal((3, 2)), _normal(()))),
    "div_num": ("op", _binary(ad.div, 0, _normal((3, 2)), _nonzero((3, 2)))),
    "div_den": ("op", _binary(ad.div, 1, _normal((3, 2)), _nonzero((3, 2)))),
    "add_bias": ("op", _binary(ad.add_bias, 1, _normal((3, 4)), _normal(4))),
    "scale": ("op", _unary(lambda x: ad.scale(x, -2.5), _normal((3, 3)))),
    "neg": ("op", _unary(ad.neg, _normal(4))),
    "tanh": ("op", _unary(ad.tanh, _normal((3, 3)))),
    "sigmoid": ("op", _unary(ad.sigmoid, _normal((3, 3)))),
    "relu": ("op", _unary(ad.relu, _nonzero((3, 3)))),
    "exp": ("op", _unary(ad.exp, _normal((3, 3)))),
    "log": ("op", _unary(ad.log, _positive((3, 3)))),
    "sqrt": ("op", _unary(ad.sqrt, _positive((3, 3)))),
    "abs": ("op", _unary(ad.absolute, _nonzero((3, 3)))),
    "clamp": ("op", _unary(lambda x: ad.clamp(x, -0.5, 0.5),
                           lambda rng: _away_from(rng.standard_normal((3, 3)), [-0.5, 0.5])) ),
    "cos": ("op", _unary(ad.cos, _normal((3, 3)))),
    "arccos": ("op", _unary(ad.arccos, lambda rng: 0.95 * np.tanh(rng.standard_normal((3, 3))))),
    "sum": ("op", _unary(ad.tensor_sum, _normal((3, 3)))),
    "sum_axis": ("op", _build_sum_axis),
    "mean": ("op", _unary(ad.mean, _normal((3, 3)))),
    "reshape": ("op", _unary(lambda x: ad.reshape(x, (2, 6)), _normal((3, 4)))),
    "transpose": ("op", _unary(ad.transpose, _normal((3, 4)))),
    "getitem": ("op", _build_getitem),
    "concat": ("op", _build_concat),
    "take_rows": ("op", _build_take_rows),
    "cosine_similarity": ("op", _build_cosine),
    "pairwise_cosine": ("op", _build_pairwise),
    "rowwise_cosine": ("op", _build_rowwise),
    "mae_loss": ("loss", _build_mae),
    "supervised_ntxent": ("loss", _build_ntxent),
    "arccos_loss": ("loss", _build_arccos),
    "suparc_loss": ("loss", _build_suparc),
    "triplet_modalities": ("loss", _build_triplet),
    "total_loss": ("loss", _build_total),
    "encode_text": ("model", _model_check("text.embedding", _fwd_text)),
    "encode_recurrent": ("model", _model_check("visual.fwd.w_hh", _fwd_recurrent)),
    "fuse": ("model", _model_check("fusion.layer0.weight", _fwd_fuse)),
    "masked_fuse": ("model", _model_check("audio.bwd.w_ih", _fwd_masked)),
    "predict": ("model", _model_check("predictor.layer0.weight", _fwd_predict)),
}


def check_once(name: str, rng: np.random.Generator, h: float = STEP) -> float:
    _, build = CHECKS[name]
    f, x = build(rng)
    X = Tensor(x, requires_grad=True)
    backward(f(X))
    numeric = finite_difference_gradient(f, x, h)
    return relative_error(X.grad, numeric, ERROR_FLOOR)


def run_gradchecks(trials: int = 100, seed: int = 0, groups=None, names=None,
                   tolerance: float = TOLERANCE) -> list[CheckResult]:
    """Run ``trials`` seeded cases of each selected check; return one result per check."""
    results = []
    for index, (name, (group, _)) in enumerate(CHECKS.items()):
        if groups is not None and group not in groups:
            continue
        if names is not None and name not in names:
            continue
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, index, trial])
            worst = max(worst, check_once(name, rng))
        results.append(CheckResult(name, group, trials, worst, tolerance))
    return results
