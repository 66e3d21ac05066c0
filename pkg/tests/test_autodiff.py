"""Tensor engine: forward oracles, gradient contracts, determinism."""

import numpy as np
import pytest

from fuseclust import autodiff as ad

from oracles import (
    central_diff,
    gelu_oracle,
    layer_norm_oracle,
    matmul_oracle,
    rel_errors,
    softmax_oracle,
)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = ad.constant(rng.normal(size=(3, 5)), dtype=np.float64)
        out = ad.matmul(ad.constant(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_annihilator(self):
        rng = np.random.default_rng(1)
        b = ad.constant(rng.normal(size=(2, 2)), dtype=np.float64)
        out = ad.matmul(ad.constant(np.zeros((2, 2))), b)
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(ad.constant(a, dtype=np.float64),
                        ad.constant(b, dtype=np.float64))
        assert np.max(np.abs(out.data - matmul_oracle(a, b))) <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        a = ad.constant(np.zeros((2, 3)))
        b = ad.constant(np.zeros((4, 2)))
        with pytest.raises(ad.ShapeError, match=r"2, 3.*4, 2"):
            ad.matmul(a, b)

    def test_batched_broadcast(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(ad.constant(a, dtype=np.float64),
                        ad.constant(b, dtype=np.float64))
        for i in range(5):
            np.testing.assert_allclose(out.data[i], matmul_oracle(a[i], b),
                                       atol=1e-12)


class TestSoftmax:
    def test_constant_vector(self):
        out = ad.softmax(ad.constant(np.full(3, 4.2), dtype=np.float64), axis=0)
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6))
        for s in (-100.0, -1.0, 0.5, 1e3):
            a = ad.softmax(ad.constant(x, dtype=np.float64), axis=1)
            b = ad.softmax(ad.constant(x + s, dtype=np.float64), axis=1)
            assert np.max(np.abs(a.data - b.data)) <= 1e-12

    def test_direct_formula_oracle(self):
        out = ad.softmax(ad.constant([0.0, 1.0, 2.0], dtype=np.float64), axis=0)
        np.testing.assert_allclose(out.data, softmax_oracle([0.0, 1.0, 2.0]),
                                   atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        x32 = ad.constant(rng.normal(size=(8, 11)).astype(np.float32))
        x64 = ad.constant(rng.normal(size=(8, 11)), dtype=np.float64)
        s32 = ad.softmax(x32, axis=1).data.sum(axis=1)
        s64 = ad.softmax(x64, axis=1).data.sum(axis=1)
        np.testing.assert_allclose(s32, 1.0, atol=1e-6)
        np.testing.assert_allclose(s64, 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_token_absorbed_by_eps(self):
        x = ad.constant(np.full((2, 8), 3.0), dtype=np.float64)
        g = ad.constant(np.ones(8), dtype=np.float64)
        b = ad.constant(np.zeros(8), dtype=np.float64)
        out = ad.layer_norm(x, g, b)
        np.testing.assert_array_equal(out.data, np.zeros((2, 8)))

    def test_zero_gamma_collapses_to_beta(self):
        rng = np.random.default_rng(4)
        x = ad.constant(rng.normal(size=(3, 6)), dtype=np.float64)
        g = ad.constant(np.zeros(6), dtype=np.float64)
        b = ad.constant(rng.normal(size=6), dtype=np.float64)
        out = ad.layer_norm(x, g, b)
        np.testing.assert_array_equal(out.data, np.broadcast_to(b.data, (3, 6)))

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=16)
        gamma = rng.normal(size=16)
        beta = rng.normal(size=16)
        out = ad.layer_norm(ad.constant(x[None, :], dtype=np.float64),
                            ad.constant(gamma, dtype=np.float64),
                            ad.constant(beta, dtype=np.float64))
        assert np.max(np.abs(out.data[0] - layer_norm_oracle(x, gamma, beta))) <= 1e-12


class TestGelu:
    def test_zero(self):
        assert ad.gelu(ad.constant(0.0, dtype=np.float64)).data == 0.0

    def test_saturation(self):
        out = ad.gelu(ad.constant(10.0, dtype=np.float64))
        assert abs(out.item() - 10.0) <= 1e-3

    def test_formula_oracle_at_one(self):
        out = ad.gelu(ad.constant(1.0, dtype=np.float64))
        assert abs(out.item() - gelu_oracle(1.0)) <= 1e-12

    def test_finite_on_bounded_range(self):
        x = np.linspace(-1e3, 1e3, 4001)
        for op in (ad.gelu, ad.relu):
            assert np.all(np.isfinite(op(ad.constant(x, dtype=np.float64)).data))


class TestBackwardContracts:
    def test_linear_map_grad(self):
        rng = np.random.default_rng(12)
        x = ad.constant(rng.normal(size=(4, 1)), dtype=np.float64)
        w = ad.parameter(rng.normal(size=(3, 4)), dtype=np.float64)
        with ad.Tape() as tape:
            loss = ad.matmul(w, x).sum()
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, np.broadcast_to(x.data.T, (3, 4)),
                                   atol=1e-12)

    def test_disconnected_parameter_zero_grad(self):
        w = ad.parameter(np.ones((2, 2)), dtype=np.float64)
        p = ad.parameter(np.ones(5), dtype=np.float64)
        x = ad.constant(np.ones((2, 2)), dtype=np.float64)
        with ad.Tape() as tape:
            loss = ad.mul(w, x).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(p.grad, np.zeros(5))

    def test_non_scalar_loss_rejected(self):
        w = ad.parameter(np.ones(3), dtype=np.float64)
        with ad.Tape() as tape:
            y = ad.mul(w, w)
        with pytest.raises(ad.ContractError, match="scalar"):
            tape.backward(y)

    def test_nan_gradient_names_op(self):
        # d/dx sqrt at 0 is infinite; the backward check must say which op
        x = ad.parameter(np.array([0.0, 1.0]), dtype=np.float64)
        with ad.Tape() as tape:
            loss = ad.sqrt(x).sum()
        with pytest.raises(ad.NumericError, match="sqrt"):
            tape.backward(loss)

    def test_nonfinite_forward_names_op(self):
        x = ad.constant(np.array([-1.0]), dtype=np.float64)
        with pytest.raises(ad.NumericError, match="log"):
            with ad.Tape():
                ad.log(x)

    def test_grad_accumulates_across_uses(self):
        w = ad.parameter(np.array([2.0]), dtype=np.float64)
        with ad.Tape() as tape:
            loss = ad.add(ad.mul(w, w), w).sum()
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, [5.0], atol=1e-12)


def _fd_check(build, params, seed, tol=1e-4):
    """build(params) -> scalar loss Tensor; checks every parameter."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    with ad.Tape() as tape:
        loss = build()
    tape.backward(loss)
    for p in params:
        flat = p.data.reshape(-1)

        def f(vec, p=p, flat=flat):
            backup = flat.copy()
            flat[:] = vec
            try:
                return build().item()
            finally:
                flat[:] = backup

        fd = central_diff(f, flat.copy(), h=1e-5)
        errs = rel_errors(p.grad.reshape(-1), fd)
        assert errs.max() <= tol, (p.name, errs.max())


class TestCompositeGradients:
    """Finite-difference checks for every op family the model composes."""

    def test_elementwise_chain(self):
        rng = np.random.default_rng(21)
        a = ad.parameter(rng.uniform(0.5, 1.5, size=(3, 4)), name="a", dtype=np.float64)
        b = ad.parameter(rng.uniform(0.5, 1.5, size=(3, 4)), name="b", dtype=np.float64)

        def build():
            h = ad.div(ad.mul(a, b), ad.add(ad.exp(ad.neg(a)), 1.0))
            h = ad.add(ad.log(ad.add(ad.sqrt(b), 1.0)), h)
            return ad.sub(h, ad.tsum(b) * 0.01).mean()

        _fd_check(build, [a, b], 21)

    def test_matmul_linear(self):
        rng = np.random.default_rng(22)
        x = ad.constant(rng.normal(size=(5, 3)), dtype=np.float64)
        w = ad.parameter(rng.normal(size=(3, 4)), name="w", dtype=np.float64)
        bias = ad.parameter(rng.normal(size=4), name="bias", dtype=np.float64)

        def build():
            return ad.mul(ad.linear(x, w, bias), ad.linear(x, w, bias)).mean()

        _fd_check(build, [w, bias], 22)

    def test_softmax_layernorm_gelu(self):
        rng = np.random.default_rng(23)
        x = ad.parameter(rng.normal(size=(2, 5, 6)), name="x", dtype=np.float64)
        g = ad.parameter(rng.uniform(0.5, 1.5, size=6), name="g", dtype=np.float64)
        bt = ad.parameter(rng.normal(size=6), name="bt", dtype=np.float64)
        w = ad.constant(rng.normal(size=(2, 5, 5)), dtype=np.float64)

        def build():
            h = ad.layer_norm(x, g, bt)
            att = ad.softmax(ad.mul(w, 1.3), axis=-1)
            return ad.gelu(ad.matmul(att, h)).mean()

        _fd_check(build, [x, g, bt], 23)

    def test_relu_reductions_shapes(self):
        rng = np.random.default_rng(24)
        x = ad.parameter(rng.normal(size=(4, 6)) + 0.3, name="x", dtype=np.float64)

        def build():
            h = ad.relu(x)
            h = ad.reshape(h, (2, 2, 6))
            h = ad.transpose(h, (1, 0, 2))
            h = ad.tsum(h, axis=2)
            return ad.tmean(h)

        _fd_check(build, [x], 24)

    def test_concat_split_narrow(self):
        rng = np.random.default_rng(25)
        a = ad.parameter(rng.normal(size=(2, 3, 4)), name="a", dtype=np.float64)
        b = ad.parameter(rng.normal(size=(2, 3, 4)), name="b", dtype=np.float64)

        def build():
            y = ad.concat([a, b], axis=1)
            l, r = ad.split(y, 2, axis=1)
            n = ad.narrow(y, 1, 2, 3)
            return ad.add(ad.mul(l, r).sum(), ad.mul(n, n).mean())

        _fd_check(build, [a, b], 25)

    def test_gather_rows(self):
        rng = np.random.default_rng(26)
        table = ad.parameter(rng.normal(size=(7, 3)), name="table", dtype=np.float64)
        idx = np.array([0, 3, 3, 6])

        def build():
            rows = ad.gather_rows(table, idx)
            return ad.mul(rows, rows).sum()

        _fd_check(build, [table], 26)

    def test_conv2d(self):
        rng = np.random.default_rng(27)
        x = ad.parameter(rng.normal(size=(2, 3, 8, 8)), name="x", dtype=np.float64)
        w = ad.parameter(rng.normal(size=(5, 3, 3, 3)) * 0.2, name="w", dtype=np.float64)
        b = ad.parameter(rng.normal(size=5), name="b", dtype=np.float64)

        def build():
            h = ad.conv2d(x, w, b, stride=2, pad=1)
            return ad.mul(h, h).mean()

        _fd_check(build, [x, w, b], 27)

    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(28)
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(ad.constant(x, dtype=np.float64),
                        ad.constant(w, dtype=np.float64),
                        ad.constant(b, dtype=np.float64), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for oc in range(3):
            for oy in range(3):
                for ox in range(3):
                    ref = b[oc]
                    for c in range(2):
                        for u in range(3):
                            for v in range(3):
                                ref += w[oc, c, u, v] * xp[0, c, oy * 2 + u, ox * 2 + v]
                    assert abs(out[0, oc, oy, ox] - ref) <= 1e-10


class TestTapeSemantics:
    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(31)
            x = ad.constant(rng.normal(size=(4, 4)).astype(np.float32))
            w = ad.parameter(rng.normal(size=(4, 4)).astype(np.float32))
            with ad.Tape() as tape:
                loss = ad.gelu(ad.matmul(x, w)).mean()
            tape.backward(loss)
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)

    def test_replay_bit_identical(self):
        rng = np.random.default_rng(32)
        x = ad.constant(rng.normal(size=(3, 3)), dtype=np.float64)
        w = ad.parameter(rng.normal(size=(3, 3)), dtype=np.float64)
        with ad.Tape() as tape:
            h = ad.softmax(ad.matmul(x, w), axis=1)
            ad.layer_norm(h, ad.constant(np.ones(3), dtype=np.float64),
                          ad.constant(np.zeros(3), dtype=np.float64)).sum()
        assert tape.replay() is True

    def test_replay_detects_mutation(self):
        x = ad.parameter(np.ones((2, 2)), dtype=np.float64)
        with ad.Tape() as tape:
            ad.mul(x, x)
        x.data[0, 0] = 5.0
        with pytest.raises(ad.NumericError, match="replay"):
            tape.replay()

    def test_backward_reverse_order_uses_final_values(self):
        # y = x*x; z = y+y; grads must flow z then y then x
        x = ad.parameter(np.array([3.0]), dtype=np.float64)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            z = ad.add(y, y).sum()
        tape.backward(z)
        np.testing.assert_allclose(x.grad, [12.0], atol=1e-12)

    def test_no_tape_means_no_recording(self):
        x = ad.parameter(np.ones(3), dtype=np.float64)
        out = ad.mul(x, x)
        assert out.data is not None
        with ad.Tape() as tape:
            pass
        assert tape.records == []
