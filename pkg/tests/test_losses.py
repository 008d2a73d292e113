import math

import numpy as np
import pytest

from suparc.autodiff import Tensor, backward, finite_difference_gradient, relative_error
from suparc.exceptions import ConfigError, ContractError, DimensionError, EmptyPositiveError
from suparc.losses import (
    LossConfig,
    arccos_loss,
    mae_loss,
    pair_label,
    suparc_loss,
    supervised_ntxent,
    total_loss,
    triplet_modalities_loss,
)

# anchor, positive, negative; labels put the negative at distance 2 from both
H3 = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
Y3 = np.array([0.0, 0.0, 2.0])
THETA_FLOOR = math.acos(1 - 1e-7)


def random_batch(rng, n=8, d=5):
    y = rng.uniform(-3, 3, n)
    y[1] = y[0]
    return rng.standard_normal((n, d)), y


# ---------------------------------------------------------------- mae / pairs

def test_mae_examples():
    assert mae_loss([0.5, 1.0], [0.5, 1.0]).item() == 0.0
    assert mae_loss([1.0, -1.0], [0.0, 0.0]).item() == 1.0
    assert mae_loss([2.2, 0.6, -0.6], [3.0, 0.0, 0.0]).item() == pytest.approx(0.6667, abs=1e-4)


def test_mae_shape_mismatch():
    with pytest.raises(DimensionError):
        mae_loss([1.0, 2.0], [1.0])


def test_pair_label_examples():
    p = pair_label([2.2, 0.6], 0.5)
    assert p.t[0, 1] == 0 and p.delta[0, 1] == pytest.approx(1.6)
    p = pair_label([1.3, 1.3], 0.5)
    assert p.t[0, 1] == 1 and p.delta[0, 1] == 0.0
    p = pair_label([3.0, -3.0], 0.5)
    assert p.t[0, 1] == 0 and p.delta[0, 1] == 6.0


def test_pair_matrix_symmetric_with_unit_diagonal(rng):
    for _ in range(20):
        p = pair_label(rng.uniform(-3, 3, 9), 0.5)
        assert np.array_equal(p.t, p.t.T) and np.array_equal(p.delta, p.delta.T)
        assert np.all(np.diag(p.t) == 1) and np.all(np.diag(p.delta) == 0)
        assert np.all(np.diag(p.positive_mask()) == 0)


def test_pair_label_needs_two():
    with pytest.raises(ContractError):
        pair_label([1.0], 0.5)


# ------------------------------------------------------------- contrastive

def test_ntxent_identical_pair_is_zero():
    h = np.array([[0.3, 0.4], [0.3, 0.4]])
    assert supervised_ntxent(h, pair_label([1.0, 1.0]), 0.1).item() == pytest.approx(0.0, abs=1e-12)


def test_ntxent_spot_value():
    value = supervised_ntxent(H3, pair_label(Y3, 0.5), tau=1.0).item()
    assert abs(value - math.log1p(math.exp(-1))) <= 1e-6
    assert abs(value - 0.313262) <= 1e-6


def test_arccos_spot_values():
    pairs = pair_label(Y3, 0.5)
    zero = arccos_loss(H3, pairs, tau=1.0, m=0.0).item()
    half = arccos_loss(H3, pairs, tau=1.0, m=0.5).item()
    assert abs(zero - 0.313262) <= 1e-6
    # the positive angle sits at the arccos clamp floor, not exactly 0
    expected = math.log1p(math.exp(-math.cos(THETA_FLOOR + 0.5)))
    assert half == pytest.approx(expected, abs=1e-12)
    assert half > zero


def test_suparc_spot_value():
    value = suparc_loss(H3, Y3, pair_label(Y3, 0.5), tau=1.0, m=0.5).item()
    assert abs(value - (-math.log(math.e / (math.e + math.exp(math.sin(1)))))) <= 1e-6
    assert abs(value - 0.617021) <= 1e-6


def test_suparc_larger_gap_larger_loss():
    y_small, y_large = np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 4.0])
    small = suparc_loss(H3, y_small, pair_label(y_small), 1.0, 0.2).item()
    large = suparc_loss(H3, y_large, pair_label(y_large), 1.0, 0.2).item()
    assert large > small


def test_suparc_zero_margin_equals_arccos(rng):
    for _ in range(100):
        h, y = random_batch(rng)
        pairs = pair_label(y, 0.5)
        a = suparc_loss(h, y, pairs, 0.1, 0.0).item()
        b = arccos_loss(h, pairs, 0.1, 0.0).item()
        assert abs(a - b) <= 1e-12


@pytest.mark.parametrize("name", ["ntxent", "arccos", "suparc"])
def test_contrastive_row_rescaling_invariance(rng, name):
    for _ in range(25):
        h, y = random_batch(rng)
        pairs = pair_label(y, 0.5)
        scales = rng.uniform(0.01, 100, size=(h.shape[0], 1))
        fn = {
            "ntxent": lambda H: supervised_ntxent(H, pairs, 0.1),
            "arccos": lambda H: arccos_loss(H, pairs, 0.1, 0.2),
            "suparc": lambda H: suparc_loss(H, y, pairs, 0.1, 0.15),
        }[name]
        assert abs(fn(h).item() - fn(h * scales).item()) <= 1e-9
        assert abs(fn(h).item() - fn(5 * h).item()) <= 1e-9


def test_suparc_margin_monotone(rng):
    checked = 0
    while checked < 30:
        h, y = random_batch(rng, n=6, d=4)
        pairs = pair_label(y, 0.5)
        unit = h / np.linalg.norm(h, axis=1, keepdims=True)
        theta = np.arccos(np.clip(unit @ unit.T, -1, 1))
        margins = np.linspace(0.0, 0.3, 7)
        neg = pairs.t == 0
        if not all(np.all((theta - m * pairs.delta)[neg] > 0) for m in margins):
            continue
        values = [suparc_loss(h, y, pairs, 0.1, m).item() for m in margins]
        assert all(b >= a for a, b in zip(values, values[1:]))
        checked += 1


def test_no_positives_raises():
    y = np.array([-3.0, 0.0, 3.0])
    h = np.eye(3)
    for fn in (
        lambda: supervised_ntxent(h, pair_label(y), 0.1),
        lambda: arccos_loss(h, pair_label(y), 0.1),
        lambda: suparc_loss(h, y, pair_label(y), 0.1),
    ):
        with pytest.raises(EmptyPositiveError):
            fn()


def test_suparc_gradient_on_four_batch(rng):
    h = rng.standard_normal((4, 3))
    y = np.array([0.0, 0.2, 1.5, -2.0])
    pairs = pair_label(y)
    f = lambda X: suparc_loss(X, y, pairs, 0.1, 0.15)
    X = Tensor(h, requires_grad=True)
    backward(f(X))
    assert relative_error(X.grad, finite_difference_gradient(f, h)) <= 1e-4


# ----------------------------------------------------------------- triplet

def _seven(h, single, double):
    singles = {m: single for m in "tva"}
    doubles = {frozenset(p): double for p in ("tv", "ta", "va")}
    return h, singles, doubles


def test_triplet_identical_vectors():
    v = np.array([0.3, -0.2, 0.9])
    assert triplet_modalities_loss(*_seven(v, v, v), m_tri=0.2).item() == 1.2
    # dyadic margin: 6 * m is exact in binary floating point
    assert triplet_modalities_loss(*_seven(v, v, v), m_tri=0.25).item() == 6 * 0.25
    assert triplet_modalities_loss(*_seven(v, v, v), m_tri=0.0).item() == 0.0


def test_triplet_margin_satisfied_is_zero():
    h = np.array([1.0, 0.0])
    assert triplet_modalities_loss(*_seven(h, h, np.array([0.0, 1.0])), m_tri=0.2).item() == 0.0


def test_triplet_batched_nonnegative(rng):
    for _ in range(50):
        h = rng.standard_normal((4, 5))
        singles = {m: rng.standard_normal((4, 5)) for m in "tva"}
        doubles = {frozenset(p): rng.standard_normal((4, 5)) for p in ("tv", "ta", "va")}
        assert triplet_modalities_loss(h, singles, doubles, 0.2).item() >= 0.0


def test_triplet_needs_all_masks():
    v = np.ones(3)
    with pytest.raises(ContractError):
        triplet_modalities_loss(v, {"t": v}, {frozenset("tv"): v}, 0.2)


# ------------------------------------------------------------------- total

def test_total_loss_weights():
    assert total_loss(Tensor(0.5), Tensor(0.3), Tensor(1.2), 0.1, 0.1).item() == pytest.approx(0.65, abs=1e-15)


def test_total_loss_zero_weights_is_main(rng):
    y_hat = Tensor(rng.normal(size=5), requires_grad=True)
    main = mae_loss(y_hat, rng.normal(size=5))
    assert total_loss(main, Tensor(9.0), Tensor(9.0), 0.0, 0.0) is main
    assert total_loss(main, 0.0, 0.0, 0.0, 0.0).item() == main.item()


def test_total_loss_skipped_term_contributes_zero():
    assert total_loss(Tensor(0.5), 0.0, Tensor(1.0), 0.1, 0.1).item() == pytest.approx(0.6)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(tau=0.0)
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1.0)
    assert LossConfig() == LossConfig(0.1, 0.15, 0.5, 0.2, 0.1, 0.1)
