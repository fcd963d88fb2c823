import math

import numpy as np
import pytest

from voxelformer.autograd import Tensor, gradcheck, l2_normalize
from voxelformer.errors import ContractError, ShapeError
from voxelformer.losses import (
    LossWeights,
    MixupSpec,
    Phase,
    bimixco_loss,
    infonce_loss,
    mixup,
    mse_loss,
    phase_for_epoch,
    softclip_loss,
    softclip_targets,
    total_loss,
)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def naive_bimixco(p, t, lam, k, tau):
    """Term-by-term double loop over the BiMixCo definition."""
    n = p.shape[0]

    def fwd_log(i, j):
        den = sum(math.exp(p[i] @ t[m] / tau) for m in range(n))
        return math.log(math.exp(p[i] @ t[j] / tau) / den)

    def bwd_log(l, j):
        den = sum(math.exp(p[m] @ t[j] / tau) for m in range(n))
        return math.log(math.exp(p[l] @ t[j] / tau) / den)

    total = 0.0
    for i in range(n):
        total -= lam[i] * fwd_log(i, i) + (1 - lam[i]) * fwd_log(i, k[i])
    for j in range(n):
        inner = lam[j] * bwd_log(j, j)
        for l in range(n):
            if k[l] == j:
                inner += (1 - lam[l]) * bwd_log(l, j)
        total -= inner
    return total


def naive_softclip(p, t, tau):
    n = p.shape[0]
    total = 0.0
    for i in range(n):
        t_den = sum(math.exp(t[i] @ t[m] / tau) for m in range(n))
        p_den = sum(math.exp(p[i] @ t[m] / tau) for m in range(n))
        for j in range(n):
            target = math.exp(t[i] @ t[j] / tau) / t_den
            total -= target * math.log(math.exp(p[i] @ t[j] / tau) / p_den)
    return total


# -- mse ------------------------------------------------------------------


def test_mse_zero_when_equal():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert mse_loss(Tensor(x), Tensor(x)).item() == 0.0


def test_mse_single_sample():
    assert mse_loss(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]])).item() == 25.0


def test_mse_batch_mean():
    assert mse_loss(Tensor([[0.0, 0.0], [0.0, 0.0]]), Tensor([[3.0, 4.0], [3.0, 0.0]])).item() == 17.0


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


# -- mixup ----------------------------------------------------------------


def test_mixup_identity_and_full_swap():
    z = np.arange(12.0).reshape(4, 3)
    k = np.array([2, 0, 3, 1])
    np.testing.assert_array_equal(mixup(z, MixupSpec(np.ones(4), k)), z)
    np.testing.assert_array_equal(mixup(z, MixupSpec(np.zeros(4), k)), z[k])


def test_mixup_half():
    out = mixup(np.array([[2.0], [4.0]]), MixupSpec([0.5, 1.0], [1, 1]))
    np.testing.assert_array_equal(out[0], [3.0])


def test_mixup_on_tensors_is_differentiable():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    spec = MixupSpec.sample(4, rng)
    w = Tensor(rng.normal(size=(4, 3)))
    np.testing.assert_allclose(mixup(z, spec).data, mixup(z.data, spec))
    assert gradcheck(lambda: (mixup(z, spec) * w).sum(), [z]) < 1e-4


def test_mixup_spec_validation():
    with pytest.raises(ContractError):
        MixupSpec([1.5, 0.0], [0, 1])
    with pytest.raises(ContractError):
        MixupSpec([1.0, 0.0], [0, 2])
    spec = MixupSpec.sample(16, np.random.default_rng(0), alpha=0.15)
    assert sorted(spec.partners.tolist()) == list(range(16))
    assert np.all((spec.lambdas >= 0) & (spec.lambdas <= 1))


# -- BiMixCo --------------------------------------------------------------


def test_bimixco_hand_value():
    basis = np.eye(2)
    loss = bimixco_loss(Tensor(basis), Tensor(basis), MixupSpec.identity(2), tau=1.0).item()
    expected = 4 * -math.log(math.e / (math.e + 1))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(1.2533, abs=1e-3)
    assert naive_bimixco(basis, basis, [1, 1], [0, 1], 1.0) == pytest.approx(expected, abs=1e-12)


def test_bimixco_lambda_one_is_infonce():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        p, t = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
        spec = MixupSpec(np.ones(n), rng.permutation(n))
        a = bimixco_loss(Tensor(p), Tensor(t), spec, 0.1).item()
        assert a == pytest.approx(infonce_loss(Tensor(p), Tensor(t), 0.1).item(), abs=1e-9)


def test_bimixco_temperature_sweep_decreases_to_zero():
    basis = np.eye(4)
    values = [bimixco_loss(Tensor(basis), Tensor(basis), MixupSpec.identity(4), tau).item()
              for tau in (1.0, 0.1, 0.01)]
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-10


def test_bimixco_matches_naive_loop():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        p, t = unit_rows(rng, n, 6), unit_rows(rng, n, 6)
        spec = MixupSpec.sample(n, rng)
        tau = float(rng.uniform(0.05, 1.0))
        vec = bimixco_loss(Tensor(p), Tensor(t), spec, tau).item()
        assert vec == pytest.approx(naive_bimixco(p, t, spec.lambdas, spec.partners, tau), abs=1e-9, rel=0)


def test_bimixco_rejects_unnormalized():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        bimixco_loss(Tensor(rng.normal(size=(3, 4))), Tensor(unit_rows(rng, 3, 4)), MixupSpec.identity(3), 0.1)


def test_bimixco_gradients():
    rng = np.random.default_rng(5)
    raw, t = Tensor(rng.normal(size=(5, 4)), requires_grad=True), Tensor(unit_rows(rng, 5, 4))
    spec = MixupSpec.sample(5, rng)
    assert gradcheck(lambda: bimixco_loss(l2_normalize(raw, axis=1), t, spec, 0.5), [raw]) < 1e-4


# -- SoftCLIP -------------------------------------------------------------


def test_softclip_targets_rows_sum_to_one():
    rng = np.random.default_rng(6)
    np.testing.assert_allclose(softclip_targets(unit_rows(rng, 7, 5), 0.1).sum(axis=1), 1.0, atol=1e-9)


def test_softclip_hand_value_orthonormal():
    basis = np.eye(2)
    q = np.array([math.e / (math.e + 1), 1 / (math.e + 1)])
    np.testing.assert_allclose(softclip_targets(basis, 1.0), [q, q[::-1]], atol=1e-12)
    entropy = -(q * np.log(q)).sum()
    loss = softclip_loss(Tensor(basis), Tensor(basis), 1.0).item()
    assert loss == pytest.approx(2 * entropy, abs=1e-12)
    assert loss == pytest.approx(1.16441, abs=1e-5)


def test_softclip_self_term_equals_target_entropy():
    rng = np.random.default_rng(7)
    t = unit_rows(rng, 6, 4)
    q = softclip_targets(t, 0.2)
    expected = -(q * np.log(q)).sum()
    assert softclip_loss(Tensor(t), Tensor(t), 0.2).item() == pytest.approx(expected, abs=1e-9)


def test_softclip_matches_naive_loop():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        p, t = unit_rows(rng, n, 6), unit_rows(rng, n, 6)
        tau = float(rng.uniform(0.05, 1.0))
        vec = softclip_loss(Tensor(p), Tensor(t), tau).item()
        assert vec == pytest.approx(naive_softclip(p, t, tau), abs=1e-9, rel=0)


def test_softclip_gradients():
    rng = np.random.default_rng(9)
    raw, t = Tensor(rng.normal(size=(5, 4)), requires_grad=True), Tensor(unit_rows(rng, 5, 4))
    assert gradcheck(lambda: softclip_loss(l2_normalize(raw, axis=1), t, 0.5), [raw]) < 1e-4


def test_contrastive_losses_finite_at_small_temperature():
    rng = np.random.default_rng(10)
    p, t = unit_rows(rng, 8, 4), unit_rows(rng, 8, 4)
    assert np.isfinite(softclip_loss(Tensor(p), Tensor(t), 1e-3).item())
    assert np.isfinite(bimixco_loss(Tensor(p), Tensor(t), MixupSpec.sample(8, rng), 1e-3).item())


def test_contrastive_needs_two_samples():
    with pytest.raises(ContractError):
        softclip_loss(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), 0.1)


# -- total loss and schedule ----------------------------------------------


def test_total_loss_default_weights():
    assert total_loss(0.5, 2.0, LossWeights()).item() == 17.0
    assert total_loss(0.0, 0.0, LossWeights()).item() == 0.0
    assert total_loss(0.7, 3.0, LossWeights(mse=1.0, contrastive=0.0)).item() == 0.7


def test_total_loss_is_linear():
    rng = np.random.default_rng(11)
    w = LossWeights(mse=float(rng.uniform(0.1, 40)), contrastive=float(rng.uniform(0.1, 5)))
    for _ in range(50):
        a1, c1, a2, c2, s = rng.normal(size=5)
        lhs = total_loss(a1 + a2, c1 + c2, w).item()
        assert lhs == pytest.approx(total_loss(a1, c1, w).item() + total_loss(a2, c2, w).item(), abs=1e-9)
        assert total_loss(s * a1, s * c1, w).item() == pytest.approx(s * total_loss(a1, c1, w).item(), abs=1e-9)


def test_phase_schedule():
    assert [phase_for_epoch(e, 9) for e in range(9)] == [Phase.BIMIXCO] * 3 + [Phase.SOFTCLIP] * 6
    assert phase_for_epoch(0, 1) is Phase.SOFTCLIP
    assert [phase_for_epoch(e, 3) for e in range(3)] == [Phase.BIMIXCO, Phase.SOFTCLIP, Phase.SOFTCLIP]
    with pytest.raises(ContractError):
        phase_for_epoch(9, 9)
    with pytest.raises(ContractError):
        phase_for_epoch(-1, 9)
