import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capformer import numcore as nc
from capformer.errors import ContractError, NumericError, ShapeError

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def triple_loop_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in range(len(a))]
    for i in range(len(a)):
        for j in range(len(b[0])):
            out[i][j] = math.fsum(a[i][k] * b[k][j] for k in range(len(b)))
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        b = np.array([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(nc.matmul(np.eye(2), b), b)

    def test_row_times_column(self):
        assert nc.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(nc.matmul(a, b), triple_loop_matmul(a.tolist(), b.tolist()),
                                   rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n, p = rng.integers(1, 6, size=4)
        a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
        lhs = nc.matmul(nc.matmul(a, b), c)
        rhs = nc.matmul(a, nc.matmul(b, c))
        assert np.max(np.abs(lhs - rhs)) <= 1e-9


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nc.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)

    def test_large_values_do_not_overflow(self):
        np.testing.assert_array_equal(nc.softmax_rows(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])

    def test_high_precision_oracle(self):
        mpmath.mp.dps = 50
        xs = [1, 2, 3]
        denom = mpmath.fsum(mpmath.exp(x) for x in xs)
        expected = [float(mpmath.exp(x) / denom) for x in xs]
        got = nc.softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0]
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=0)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_rows_sum_to_one_and_shift_invariant(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(scale=rng.uniform(0.1, 50), size=tuple(rng.integers(1, 8, size=2)))
        s = nc.softmax_rows(m)
        assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-12)
        assert np.all((s > 0) | (m < m.max(axis=1, keepdims=True) - 700)) and np.all(s <= 1)
        shift = rng.normal(scale=100, size=(m.shape[0], 1))
        assert np.max(np.abs(nc.softmax_rows(m + shift) - s)) <= 1e-12


def two_pass_stats(row):
    n = len(row)
    mean = math.fsum(row) / n
    var = math.fsum((x - mean) ** 2 for x in row) / n
    return mean, var


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = nc.layer_norm(np.full((1, 4), 5.0), np.ones(4), np.zeros(4), 1e-5)
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_already_standardized(self):
        out = nc.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), 0.0)
        np.testing.assert_array_equal(out, [[1.0, -1.0]])

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(loc=2.0, scale=3.0, size=(4, 8))
        g, b = rng.normal(size=8), rng.normal(size=8)
        out = nc.layer_norm(x, g, b, 1e-5)
        for i, row in enumerate(x.tolist()):
            mean, var = two_pass_stats(row)
            expected = [(v - mean) / math.sqrt(var + 1e-5) * g[j] + b[j] for j, v in enumerate(row)]
            np.testing.assert_allclose(out[i], expected, rtol=1e-12, atol=1e-12)

    def test_output_rows_standardized(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 16)) * 10
        out = nc.layer_norm(x, np.ones(16), np.zeros(16), 1e-12)
        for row in out.tolist():
            mean, var = two_pass_stats(row)
            assert abs(mean) <= 1e-10
            assert abs(var - 1) <= 1e-8

    def test_output_variance_shrinks_by_eps(self):
        # output variance is exactly s2 / (s2 + eps)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 8)) * 0.01
        out = nc.layer_norm(x, np.ones(8), np.zeros(8), 1e-5)
        for row, orig in zip(out.tolist(), x.tolist()):
            s2 = two_pass_stats(orig)[1]
            assert two_pass_stats(row)[1] == pytest.approx(s2 / (s2 + 1e-5), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_invariant_under_positive_affine_rows(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 8))
        a = rng.uniform(0.5, 20, size=(3, 1))
        b = rng.normal(scale=10, size=(3, 1))
        ref = nc.layer_norm(x, np.ones(8), np.zeros(8), 1e-12)
        moved = nc.layer_norm(a * x + b, np.ones(8), np.zeros(8), 1e-12)
        assert np.max(np.abs(ref - moved)) <= 1e-8

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            nc.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(3))


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(nc.relu(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])

    def test_all_negative(self):
        np.testing.assert_array_equal(nc.relu(-np.ones((2, 3))), np.zeros((2, 3)))

    def test_entrywise_oracle(self):
        x = np.random.default_rng(1).normal(size=(5, 7))
        expected = np.array([[max(0.0, v) for v in row] for row in x.tolist()])
        np.testing.assert_array_equal(nc.relu(x), expected)


class TestBackward:
    def test_sum_of_matmul(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        with nc.Tape() as tape:
            bv = tape.watch(b, "b")
            loss = nc.sum_all(nc.matmul(a, bv))
        grad = nc.backward(tape, loss)["b"]
        # d/db[k, j] sum_ij (a b)_ij = sum_i a[i, k]
        np.testing.assert_allclose(grad, np.repeat(a.sum(axis=0)[:, None], 2, axis=1), atol=1e-14)
        report = nc.grad_check(lambda p: nc.sum_all(nc.matmul(a, p["b"])), {"b": b})
        assert report.passed

    def test_constant_loss_gives_zero_gradients(self):
        with nc.Tape() as tape:
            w = tape.watch(np.ones((2, 2)), "w")
            loss = nc.sum_all(nc.add(nc.scale(w, 0.0), np.full((2, 2), 3.0)))
        np.testing.assert_array_equal(nc.backward(tape, loss)["w"], np.zeros((2, 2)))

    def test_unused_parameter_gets_zero(self):
        with nc.Tape() as tape:
            a = tape.watch(np.ones((1, 3)), "a")
            tape.watch(np.ones((2, 2)), "unused")
            loss = nc.sum_squares(a)
        grads = nc.backward(tape, loss)
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads["a"], 2 * np.ones((1, 3)))

    def test_shared_parameter_accumulates(self):
        with nc.Tape() as tape:
            w = tape.watch(np.array([[2.0]]), "w")
            loss = nc.add(nc.mul(w, w), nc.scale(w, 3.0))  # w^2 + 3w
        assert nc.backward(tape, loss)["w"][0, 0] == 7.0

    def test_non_scalar_loss(self):
        with nc.Tape() as tape:
            w = tape.watch(np.ones((2, 2)), "w")
            out = nc.relu(w)
        with pytest.raises(ContractError):
            nc.backward(tape, out)

    def test_tape_is_reset(self):
        with nc.Tape() as tape:
            w = tape.watch(np.ones((2, 2)), "w")
            loss = nc.sum_all(w)
        nc.backward(tape, loss)
        assert tape.nodes == [] and tape.leaves == {}

    def test_tape_topological_and_no_tape_returns_arrays(self):
        with nc.Tape() as tape:
            w = tape.watch(np.ones((2, 2)), "w")
            nc.sum_all(nc.relu(nc.matmul(w, w)))
            for node in tape.nodes:
                assert all(i is None or i < node.output for i in node.inputs)
            with nc.no_tape():
                assert isinstance(nc.relu(w), np.ndarray)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 6))

        def run():
            with nc.Tape() as tape:
                wv = tape.watch(w.copy(), "w")
                s = nc.softmax_rows(nc.matmul(x, wv))
                loss = nc.sum_squares(nc.layer_norm(s, np.ones(6), np.zeros(6)))
            return nc.backward(tape, loss)["w"]

        assert run().tobytes() == run().tobytes()


class TestGradCheck:
    def test_squared_norm(self):
        p = np.random.default_rng(2).normal(size=(3, 4))
        report = nc.grad_check(lambda v: nc.sum_squares(v["p"]), {"p": p}, step=1e-5, tol=1e-8)
        np.testing.assert_allclose(report.per_parameter[0].analytic, 2 * p, atol=1e-15)
        assert report.max_rel_diff <= 1e-8 and report.passed

    def test_constant(self):
        report = nc.grad_check(lambda v: np.array([[4.0]]), {"p": np.ones((2, 2))})
        assert report.passed and report.max_abs_diff == 0.0

    def test_toy_attention_scores(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4))
        params = {"wq": rng.normal(size=(4, 2)), "wk": rng.normal(size=(4, 2)),
                  "wv": rng.normal(size=(4, 3))}

        def f(p):
            scores = nc.scale(nc.matmul(nc.matmul(x, p["wq"]), nc.transpose(nc.matmul(x, p["wk"]))),
                              1 / math.sqrt(2))
            return nc.sum_squares(nc.matmul(nc.softmax_rows(scores), nc.matmul(x, p["wv"])))

        assert nc.grad_check(f, params, step=1e-5, tol=1e-4).passed

    def test_non_finite_names_coordinate(self):
        def f(p):
            if nc.value_of(p["p"])[0, 1] > 1.0:
                return np.array([[np.inf]])
            return nc.sum_squares(p["p"])

        with pytest.raises(NumericError, match=r"p\[0, 1\]"):
            nc.grad_check(f, {"p": np.array([[0.0, 1.0]])})

    def test_injected_fault_is_detected(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3))
        with nc.inject_fault("matmul"):
            report = nc.grad_check(lambda p: nc.sum_squares(nc.matmul(x, p["w"])),
                                   {"w": rng.normal(size=(3, 2))})
        assert not report.passed and report.worst.name == "w"


# --------------------------------------------------------------------------
# every differentiable primitive against central differences, 100 seeds each
# --------------------------------------------------------------------------


def _weighted(out, rng):
    weights = rng.normal(size=nc.value_of(out).shape)
    return nc.sum_all(nc.mul(out, weights))


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return x + np.sign(x) * 0.05


PRIMITIVES = {
    "matmul": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))},
               lambda p: nc.matmul(p["a"], p["b"])),
    "add_row_broadcast": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(1, 4))},
                          lambda p: nc.add(p["a"], p["b"])),
    "sub_col_broadcast": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 1))},
                          lambda p: nc.sub(p["a"], p["b"])),
    "mul": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))},
            lambda p: nc.mul(p["a"], p["b"])),
    "scale": (lambda r: {"a": r.normal(size=(2, 5))}, lambda p: nc.scale(p["a"], -1.7)),
    "transpose": (lambda r: {"a": r.normal(size=(2, 5))}, lambda p: nc.transpose(p["a"])),
    "relu": (lambda r: {"a": _away_from_zero(r, (3, 4))}, lambda p: nc.relu(p["a"])),
    "softmax_rows": (lambda r: {"a": r.normal(scale=2, size=(3, 5))},
                     lambda p: nc.softmax_rows(p["a"])),
    "layer_norm": (lambda r: {"x": r.normal(size=(3, 6)), "g": r.normal(size=(1, 6)),
                              "b": r.normal(size=(1, 6))},
                   lambda p: nc.layer_norm(p["x"], p["g"], p["b"], 1e-5)),
    "concat_cols": (lambda r: {"a": r.normal(size=(3, 2)), "b": r.normal(size=(3, 4))},
                    lambda p: nc.concat_cols([p["a"], p["b"]])),
    "slice_cols": (lambda r: {"a": r.normal(size=(3, 6))}, lambda p: nc.slice_cols(p["a"], 1, 4)),
    "take_rows": (lambda r: {"a": r.normal(size=(5, 3))},
                  lambda p: nc.take_rows(p["a"], [4, 0, 4, 2])),
    "sum_squares": (lambda r: {"a": r.normal(size=(3, 3))}, lambda p: nc.sum_squares(p["a"])),
    "grouped_matmul_bt": (lambda r: {"a": r.normal(size=(6, 2)), "b": r.normal(size=(6, 2))},
                          lambda p: nc.grouped_matmul_bt(p["a"], p["b"], 3)),
    "grouped_matmul": (lambda r: {"p": r.normal(size=(6, 3)), "v": r.normal(size=(6, 2))},
                       lambda p: nc.grouped_matmul(p["p"], p["v"], 3)),
}


@pytest.mark.parametrize("op", sorted(PRIMITIVES))
@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_primitive_gradients_match_finite_differences(op, seed):
    make, fn = PRIMITIVES[op]
    rng = np.random.default_rng(seed)
    params = make(rng)
    w_rng_seed = int(rng.integers(2**31))
    report = nc.grad_check(lambda p: _weighted(fn(p), np.random.default_rng(w_rng_seed)), params,
                           step=1e-5, tol=1e-4)
    assert report.passed, (op, report.max_rel_diff)


def test_grouped_matmul_equals_blockwise_products():
    rng = np.random.default_rng(9)
    a, b, v = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.normal(size=(6, 4))
    s = nc.grouped_matmul_bt(a, b, 3)
    z = nc.grouped_matmul(s, v, 3)
    for g in range(2):
        rows = slice(3 * g, 3 * g + 3)
        np.testing.assert_allclose(s[rows], a[rows] @ b[rows].T, atol=1e-14)
        np.testing.assert_allclose(z[rows], s[rows] @ v[rows], atol=1e-14)
    np.testing.assert_allclose(nc.grouped_matmul_bt(a, b, 6), a @ b.T, atol=1e-14)


def test_broadcast_rejects_general_shapes():
    with pytest.raises(ShapeError):
        nc.add(np.ones((3, 4)), np.ones((2, 4)))
