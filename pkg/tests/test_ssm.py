"""State-space layer tests: initializer closed form, discretization,
kernel/recurrence/convolution agreement, and the residual block contract.
"""

import numpy as np
import pytest

from geomil import autograd as ag
from geomil.ssm import (
    ConfigurationError,
    S4BlockParams,
    SsmLayerParams,
    conv_apply,
    discretize,
    drop_path,
    hippo_diag_init,
    recurrent_scan,
    s4_branch,
    s4_block_forward,
    ssm_kernel,
)


def make_layer(a_vals, b_vals, c_vals, dt_vals, skip_vals):
    """Hand-built layer from complex state values and per-channel readouts."""
    a = np.asarray(a_vals, dtype=np.complex128)
    b = np.asarray(b_vals, dtype=np.complex128)
    c = np.asarray(c_vals, dtype=np.complex128)
    return SsmLayerParams(
        a_re=a.real.copy(), a_im=a.imag.copy(),
        b_re=b.real.copy(), b_im=b.imag.copy(),
        dt=np.asarray(dt_vals, dtype=np.float64),
        c_re=c.real.copy(), c_im=c.imag.copy(),
        skip=np.asarray(skip_vals, dtype=np.float64),
    )


class TestInit:
    def test_closed_form_spectrum(self):
        layer = hippo_diag_init(4, d_model=2, seed=0)
        expected = np.array([-0.5 + 0j, -0.5 + 1j * np.pi,
                             -0.5 + 2j * np.pi, -0.5 + 3j * np.pi])
        np.testing.assert_allclose(layer.a_diag, expected, atol=0)
        np.testing.assert_allclose(layer.b, np.ones(4), atol=0)

    def test_negative_real_parts(self):
        for seed in range(5):
            layer = hippo_diag_init(8, 3, seed)
            assert np.all(layer.a_re < 0)
            assert np.all(layer.dt >= 1e-3) and np.all(layer.dt <= 1e-1)

    def test_seed_determinism(self):
        a = hippo_diag_init(8, 4, seed=42)
        b = hippo_diag_init(8, 4, seed=42)
        for name in ("a_re", "a_im", "b_re", "b_im", "dt", "c_re", "c_im", "skip"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_rejects_bad_state_count(self):
        with pytest.raises(ConfigurationError):
            hippo_diag_init(3, 1, 0)
        with pytest.raises(ConfigurationError):
            hippo_diag_init(0, 1, 0)
        with pytest.raises(ConfigurationError):
            hippo_diag_init(4, 0, 0)


class TestDiscretize:
    def test_exact_scalar_case(self):
        # a = -1, dt = ln 2 -> a_bar = 1/2, b_bar = (1/2 - 1)/(-1) = 1/2
        layer = make_layer([-1.0, -1.0], [1.0, 1.0], [[1.0, 0.0]], [np.log(2.0)], [0.0])
        a_bar, b_bar = discretize(layer)
        assert a_bar[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert b_bar[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_vanishing_state_limit(self):
        # |a| below the guard threshold falls back to b_bar = dt * b
        layer = make_layer([-1e-14, -1e-14], [1.0, 1.0], [[1.0, 1.0]], [0.25], [0.0])
        _, b_bar = discretize(layer)
        np.testing.assert_allclose(b_bar[0], [0.25, 0.25], rtol=1e-9)

    def test_contraction(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            layer = hippo_diag_init(int(rng.choice([4, 8, 16])), 3, seed)
            a_bar, _ = discretize(layer)
            assert np.all(np.abs(a_bar) < 1.0)

    def test_unstable_layer_rejected(self):
        layer = make_layer([0.5, 0.5], [1, 1], [[1, 1]], [0.1], [0.0])
        with pytest.raises(ConfigurationError):
            discretize(layer)


class TestKernel:
    def test_length_one_definition(self):
        layer = hippo_diag_init(8, 2, seed=1)
        _, b_bar = discretize(layer)
        expected = 2.0 * np.real(np.einsum("cn,cn->c", layer.c_out, b_bar))
        np.testing.assert_allclose(ssm_kernel(layer, 1)[0], expected, atol=1e-14)

    def test_geometric_sequence(self):
        # one active real state (the partner state is silenced through its
        # readout); with c = 1/2 the output doubling cancels and
        # K[l] = b_bar * a_bar^l exactly
        layer = make_layer([-0.8, -0.8], [1.0, 0.0], [[0.5, 0.0]], [0.3], [0.0])
        a_bar, b_bar = discretize(layer)
        K = ssm_kernel(layer, 16)[:, 0]
        expected = b_bar[0, 0].real * a_bar[0, 0].real ** np.arange(16)
        np.testing.assert_allclose(K, expected, rtol=1e-12)

    def test_matches_impulse_response(self):
        layer = hippo_diag_init(8, 2, seed=7)
        L = 64
        impulse = np.zeros((L, 2))
        impulse[0] = 1.0
        y = recurrent_scan(impulse, layer)
        K = ssm_kernel(layer, L)
        skip = layer.skip
        np.testing.assert_allclose(K + impulse * skip, y, atol=1e-12)

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            ssm_kernel(hippo_diag_init(4, 1, 0), 0)


class TestScanAndConv:
    def test_zero_input(self):
        layer = hippo_diag_init(8, 2, seed=0)
        assert np.all(recurrent_scan(np.zeros((32, 2)), layer) == 0)

    def test_linearity(self):
        layer = hippo_diag_init(8, 1, seed=3)
        rng = np.random.default_rng(0)
        u, v = rng.standard_normal((2, 128, 1))
        a, b = 1.7, -0.4
        lhs = recurrent_scan(a * u + b * v, layer)
        rhs = a * recurrent_scan(u, layer) + b * recurrent_scan(v, layer)
        assert np.max(np.abs(lhs - rhs)) <= 1e-9

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal((32, 3))
        K = np.zeros((32, 3))
        K[0] = 1.0
        np.testing.assert_allclose(conv_apply(u, K, np.zeros(3)), u, atol=1e-12)

    def test_impulse_sifts_kernel(self):
        rng = np.random.default_rng(2)
        K = rng.standard_normal((16, 2))
        u = np.zeros((16, 2))
        u[0] = 1.0
        np.testing.assert_allclose(conv_apply(u, K, np.zeros(2)), K, atol=1e-12)

    def test_matches_naive_convolution(self):
        rng = np.random.default_rng(3)
        for L in (8, 64, 256):
            u = rng.standard_normal((L, 2))
            K = rng.standard_normal((L, 2))
            skip = rng.standard_normal(2)
            naive = np.zeros_like(u)
            for l in range(L):
                for j in range(l + 1):
                    naive[l] += K[j] * u[l - j]
            naive += skip * u
            assert np.max(np.abs(conv_apply(u, K, skip) - naive)) <= 1e-8

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv_apply(np.zeros((8, 1)), np.zeros((4, 1)), np.zeros(1))

    def test_path_equivalence(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for trial in range(20):
            layer = hippo_diag_init(int(rng.choice([4, 8, 16])),
                                    int(rng.choice([1, 2])), seed=trial)
            for L in (16, 256, 1024):
                u = rng.standard_normal((L, layer.d_model))
                y_conv = conv_apply(u, ssm_kernel(layer, L), layer.skip)
                y_scan = recurrent_scan(u, layer)
                worst = max(worst, float(np.max(np.abs(y_conv - y_scan))))
        assert worst <= 1e-10

    def test_long_input_stays_bounded(self):
        layer = hippo_diag_init(8, 1, seed=5)
        a_bar, b_bar = discretize(layer)
        bound = np.sum(np.abs(b_bar)) / (1.0 - np.max(np.abs(a_bar)))
        rng = np.random.default_rng(6)
        u = rng.uniform(-1.0, 1.0, size=(100_000, 1))
        y = recurrent_scan(u, layer)
        assert np.all(np.isfinite(y))
        c_norm = np.sum(np.abs(layer.c_out))
        assert np.max(np.abs(y)) <= 2.0 * c_norm * bound + np.max(np.abs(layer.skip * u))


def tiny_block(seed=0, d_model=4, n_state=4, zero_mix=False, drop_path_rate=0.0):
    layer = hippo_diag_init(n_state, d_model, seed)
    rng = np.random.default_rng(seed + 100)
    mix_w = np.zeros((d_model, d_model)) if zero_mix else rng.standard_normal((d_model, d_model)) * 0.3
    return S4BlockParams(
        norm_g=np.ones(d_model), norm_b=np.zeros(d_model), ssm=layer,
        mix_w=mix_w, mix_b=np.zeros(d_model), drop_path_rate=drop_path_rate,
    )


class TestBlock:
    def test_zero_mix_is_residual_passthrough(self):
        blk = tiny_block(zero_mix=True)
        x = np.random.default_rng(0).standard_normal((12, 4))
        assert np.array_equal(s4_block_forward(x, blk), x)

    def test_eval_deterministic(self):
        blk = tiny_block(1)
        x = np.random.default_rng(1).standard_normal((9, 4))
        assert np.array_equal(s4_block_forward(x, blk), s4_block_forward(x, blk))

    def test_single_token(self):
        blk = tiny_block(2)
        x = np.random.default_rng(2).standard_normal((1, 4))
        out = s4_block_forward(x, blk)
        assert out.shape == (1, 4) and np.all(np.isfinite(out))

    def test_residual_recomposes_bitwise(self):
        blk = tiny_block(3)
        x = np.random.default_rng(3).standard_normal((10, 4))
        out = s4_block_forward(x, blk, mode="eval")
        branch = s4_branch(x, blk)
        assert np.array_equal(out, x + branch)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            s4_block_forward(np.zeros((5, 3)), tiny_block())

    def test_drop_path_train_scaling(self):
        blk = tiny_block(4, drop_path_rate=0.5)
        x = np.random.default_rng(4).standard_normal((6, 4))
        seen = set()
        for seed in range(20):
            out = s4_block_forward(x, blk, mode="train", rng=np.random.default_rng(seed))
            if np.array_equal(out, x):
                seen.add("dropped")
            else:
                branch = s4_branch(x, blk)
                np.testing.assert_allclose(out, x + 2.0 * branch, rtol=1e-12)
                seen.add("kept")
        assert seen == {"dropped", "kept"}

    def test_long_input_uses_recurrent_fallback(self):
        blk = tiny_block(5)
        x = np.random.default_rng(5).standard_normal((40, 4))
        full = s4_block_forward(x, blk, max_kernel_len=40)
        chunked = s4_block_forward(x, blk, max_kernel_len=16)
        np.testing.assert_allclose(chunked, full, atol=1e-10)

    def test_batched_matches_single(self):
        blk = tiny_block(6)
        rng = np.random.default_rng(6)
        bags = [rng.standard_normal((7, 4)) for _ in range(3)]
        stacked = s4_block_forward(np.concatenate(bags), blk, n_bags=3)
        singles = np.concatenate([s4_block_forward(b, blk) for b in bags])
        np.testing.assert_allclose(stacked, singles, atol=1e-12)
