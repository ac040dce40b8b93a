import math

import numpy as np
import pytest

from mimcspt.tensor import (
    NonFiniteError,
    Rng,
    ShapeError,
    Tensor,
    gather_rows,
    gelu,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    precision,
    scatter_rows,
    softmax,
)


def naive_matmul(a, b):
    """Triple-loop oracle, independent of np.matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        rng = Rng(1)
        a = Tensor(rng.normal(size=(5, 5)))
        eye = Tensor(np.eye(5))
        np.testing.assert_array_equal(matmul(a, eye).data, a.data)

    def test_zero_annihilates(self):
        a = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
        z = Tensor(np.zeros((4, 2)))
        np.testing.assert_array_equal(matmul(a, z).data, np.zeros((3, 2), np.float32))

    def test_two_by_two(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_against_triple_loop_random_shapes(self):
        rng = Rng(7)
        for _ in range(20):
            m, k, n = (int(x) for x in rng.integers(1, 65, size=3))
            a = rng.normal(size=(m, k)).astype(np.float32)
            b = rng.normal(size=(k, n)).astype(np.float32)
            got = matmul(Tensor(a), Tensor(b)).data
            want = naive_matmul(a, b)
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched(self):
        rng = Rng(3)
        a = rng.normal(size=(4, 3, 5)).astype(np.float32)
        b = rng.normal(size=(4, 5, 2)).astype(np.float32)
        got = matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(got[i], naive_matmul(a[i], b[i]), rtol=1e-5, atol=1e-5)


class TestSoftmax:
    def test_uniform_input(self):
        y = softmax(Tensor([0.0, 0.0, 0.0]), axis=-1).data
        np.testing.assert_allclose(y, [1 / 3] * 3, rtol=1e-6)

    def test_shift_invariance(self):
        rng = Rng(5)
        v = rng.normal(size=8).astype(np.float32)
        a = softmax(Tensor(v), axis=-1).data
        b = softmax(Tensor(v + 100.0), axis=-1).data
        np.testing.assert_allclose(a, b, rtol=1e-5)

    def test_closed_form(self):
        y = softmax(Tensor([0.0, math.log(3.0)]), axis=-1).data
        np.testing.assert_allclose(y, [0.25, 0.75], rtol=1e-6)

    def test_rows_sum_to_one_long_rows(self):
        rng = Rng(11)
        for n in (3, 64, 1024, 4096):
            x = rng.normal(scale=10.0, size=(4, n)).astype(np.float32)
            y = softmax(Tensor(x), axis=-1).data
            np.testing.assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-6)
            assert (y >= 0).all()

    def test_empty_axis_errors(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((3, 0))), axis=-1)


class TestLayerNorm:
    def test_constant_row_gives_beta(self):
        x = Tensor(np.full((2, 4), 7.0))
        gamma = Tensor(np.ones(4))
        beta = Tensor(np.full(4, 0.5))
        y = layer_norm(x, gamma, beta, eps=1e-6).data
        np.testing.assert_allclose(y, np.full((2, 4), 0.5), atol=1e-3)

    def test_hand_case_eps_zero(self):
        y = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
        np.testing.assert_allclose(y, [[1.0, -1.0]], rtol=1e-6)

    def test_zero_gamma_gives_beta(self):
        rng = Rng(2)
        x = Tensor(rng.normal(size=(3, 6)))
        y = layer_norm(x, Tensor(np.zeros(6)), Tensor(np.full(6, 2.0))).data
        np.testing.assert_array_equal(y, np.full((3, 6), 2.0, dtype=np.float32))

    def test_affine_shape_check(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_tails_match_erf_oracle(self):
        # For |x| = 10, Phi is within 1e-23 of {0, 1}.
        y = gelu(Tensor([10.0, -10.0], dtype=np.float64)).data
        assert abs(y[0] - 10.0) < 1e-6
        assert abs(y[1] - 0.0) < 1e-6

    def test_against_scalar_erf(self):
        xs = np.linspace(-3, 3, 13)
        got = gelu(Tensor(xs, dtype=np.float64)).data
        want = np.array([x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs])
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestFiniteness:
    def test_overflow_raises(self):
        x = Tensor(np.array([3.0e38], dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            _ = x * 2.0

    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    def test_div_by_zero_raises(self):
        with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
            _ = Tensor([1.0]) / Tensor([0.0])


class TestGatherScatter:
    def test_gather_matches_rows(self):
        rng = Rng(9)
        x = rng.normal(size=(2, 6, 3)).astype(np.float32)
        idx = np.array([[0, 5, 2], [1, 1, 4]])
        got = gather_rows(Tensor(x), idx).data
        for b in range(2):
            for k in range(3):
                np.testing.assert_array_equal(got[b, k], x[b, idx[b, k]])

    def test_scatter_roundtrip(self):
        rng = Rng(10)
        src = rng.normal(size=(2, 3, 4)).astype(np.float32)
        idx = np.array([[5, 0, 2], [1, 4, 3]])
        full = scatter_rows(Tensor(src), idx, 6)
        back = gather_rows(full, idx).data
        np.testing.assert_array_equal(back, src)
        # untouched rows are zero
        assert full.data[0, 1].sum() == 0.0


class TestGradCheck:
    def test_linear_function(self):
        a = np.array([2.0, -3.0, 0.5])

        def f(p):
            return (p["w"] * Tensor(a, dtype=p["w"].dtype)).sum()

        err = grad_check(f, {"w": Tensor([1.0, 1.0, 1.0])}, eps=1e-4)
        assert err < 1e-7  # linear: error O(eps^2) only from float roundoff

    def test_quadratic(self):
        def f(p):
            return (p["w"] * p["w"]).sum()

        w = Tensor([1.0])

        def analytic():
            with precision("float64"):
                t = Tensor(np.array([1.0]), requires_grad=True)
                (t * t).sum().backward()
                return t.grad[0]

        assert analytic() == pytest.approx(2.0)
        assert grad_check(f, {"w": w}, eps=1e-4) < 1e-8

def _op_loss(opname, p, aux):
    w = p["w"]
    wa = aux[: w.shape[0], : w.shape[1]]
    if opname == "add":
        return (w + Tensor(wa, dtype=w.dtype)).sum()
    if opname == "sub":
        return (Tensor(wa, dtype=w.dtype) - w).sum()
    if opname == "mul":
        return (w * Tensor(wa, dtype=w.dtype) * w).sum()
    if opname == "div":
        return (w / Tensor(np.abs(wa) + 1.0, dtype=w.dtype)).sum()
    if opname == "matmul":
        return matmul(w, Tensor(aux[: w.shape[1], : w.shape[0]], dtype=w.dtype)).sum()
    if opname == "softmax":
        return (softmax(w, axis=-1) * Tensor(aux[: w.shape[0], : w.shape[1]], dtype=w.dtype)).sum()
    if opname == "log_softmax":
        return (log_softmax(w, axis=-1) * Tensor(aux[: w.shape[0], : w.shape[1]], dtype=w.dtype)).sum()
    if opname == "layer_norm":
        d = w.shape[-1]
        return (layer_norm(w, p["gamma"], p["beta"], eps=1e-5)
                * Tensor(aux[: w.shape[0], :d], dtype=w.dtype)).sum()
    if opname == "gelu":
        return gelu(w).sum()
    if opname == "abs":
        return w.abs().sum()
    if opname == "mean":
        return (w.mean(axis=-1) * Tensor(aux[: w.shape[0], 0], dtype=w.dtype)).sum()
    if opname == "gather":
        idx = np.array([2, 0, 1, 2])
        return (gather_rows(w, idx) * Tensor(aux[:4, : w.shape[1]], dtype=w.dtype)).sum()
    if opname == "scatter":
        idx = np.array([3, 0])
        return (scatter_rows(gather_rows(w, np.array([0, 1])), idx, 5)
                * Tensor(aux[:5, : w.shape[1]], dtype=w.dtype)).sum()
    if opname == "transpose":
        return matmul(w.transpose(1, 0), w).sum()
    raise AssertionError(opname)


@pytest.mark.parametrize("opname", [
    "add", "sub", "mul", "div", "matmul", "softmax", "log_softmax",
    "layer_norm", "gelu", "abs", "mean", "gather", "scatter", "transpose",
])
def test_grad_check_every_op_many_instances(opname):
    """Analytic vs central-difference agreement on >=100 random instances per op."""
    rng = Rng(sum(ord(c) for c in opname))
    reps = 100
    for r in range(reps):
        rows = int(rng.integers(3, 7))
        cols = int(rng.integers(3, 7))
        w = rng.normal(size=(rows, cols)).astype(np.float32)
        if opname == "abs":
            # keep away from the kink where central differences are invalid
            w = np.where(np.abs(w) < 0.05, 0.5, w)
        aux = rng.normal(size=(8, 8)).astype(np.float32)
        params = {"w": Tensor(w)}
        if opname == "layer_norm":
            params["gamma"] = Tensor(rng.normal(size=cols).astype(np.float32))
            params["beta"] = Tensor(rng.normal(size=cols).astype(np.float32))
        err = grad_check(lambda p: _op_loss(opname, p, aux), params,
                         eps=1e-4, max_coords_per_param=4, rng=rng)
        assert err < 1e-4, f"{opname} rep {r}: rel err {err}"


class TestAutodiffPlumbing:
    def test_grad_accumulates_over_reuse(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x + x  # dy/dx = 2x + 1 = 7
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_add_bias(self):
        w = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        (w + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 1.0).backward()


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(42).normal(size=100)
        b = Rng(42).normal(size=100)
        np.testing.assert_array_equal(a, b)

    def test_substreams_reproducible_and_distinct(self):
        r = Rng(7)
        s1 = r.substream("mask").normal(size=50)
        s2 = Rng(7).substream("mask").normal(size=50)
        s3 = Rng(7).substream("data").normal(size=50)
        np.testing.assert_array_equal(s1, s2)
        assert not np.array_equal(s1, s3)

    def test_state_roundtrip(self):
        r = Rng(3)
        r.normal(size=10)
        state = r.get_state()
        a = r.normal(size=5)
        r2 = Rng(3)
        r2.set_state(state)
        np.testing.assert_array_equal(a, r2.normal(size=5))

    def test_truncated_normal_bounds(self):
        x = Rng(1).truncated_normal(0.02, size=10000)
        assert np.abs(x).max() <= 0.04 + 1e-12
