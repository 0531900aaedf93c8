import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lineal import kernels
from lineal.blocks import DENSE, SPARSE, BasicTensorBlock, DataTensorBlock, construct, convert_layout
from lineal.errors import ShapeError, SingularMatrixError, ValueTypeError
from lineal.kernels import (
    MADDS,
    aggregate,
    as_matrix,
    bind,
    diag,
    elementwise,
    elementwise_compare,
    fill,
    left_index,
    matmul,
    rand_block,
    seq,
    slice_block,
    solve,
    transpose,
    tsmm,
)
from lineal.vtypes import Scalar, ValueType

from .oracles import gaussian_solve, naive_aggregate, naive_matmul, naive_tsmm


def blk(rows):
    return BasicTensorBlock.from_array(np.array(rows, dtype=float), force_layout=DENSE)


A22 = [[1.0, 2.0], [3.0, 4.0]]


class TestMatmul:
    def test_identity(self):
        out = matmul(blk(A22), blk([[1.0, 0.0], [0.0, 1.0]]))
        assert np.array_equal(out.to_array(), A22)

    def test_column_vector(self):
        out = matmul(blk(A22), blk([[5.0], [6.0]]))
        assert np.array_equal(out.to_array(), [[17.0], [39.0]])
        assert np.array_equal(out.to_array(), naive_matmul(A22, [[5], [6]]))

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, (7, 5))
        b = rng.uniform(-1, 1, (5, 9))
        out = matmul(blk(a), blk(b))
        assert np.allclose(out.to_array(), naive_matmul(a, b), atol=1e-12)

    def test_sparse_dense_agreement(self):
        xs = rand_block(100, 50, sparsity=0.1, seed=7)
        d = rand_block(50, 20, seed=8)
        assert xs.layout == SPARSE and d.layout == DENSE
        got = matmul(xs, d).to_array()
        want = matmul(convert_layout(xs, DENSE), d).to_array()
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_all_four_dispatches_agree(self):
        rng = np.random.default_rng(5)
        a = np.where(rng.random((30, 20)) < 0.2, rng.uniform(-1, 1, (30, 20)), 0.0)
        b = np.where(rng.random((20, 10)) < 0.2, rng.uniform(-1, 1, (20, 10)), 0.0)
        want = naive_matmul(a, b)
        for la in (DENSE, SPARSE):
            for lb in (DENSE, SPARSE):
                got = matmul(BasicTensorBlock.from_array(a, force_layout=la),
                             BasicTensorBlock.from_array(b, force_layout=lb))
                assert np.allclose(got.to_array(), want, atol=1e-12), (la, lb)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(blk(A22), blk([[1.0, 2.0]]))

    def test_string_rejected(self):
        s = construct([1, 1], ValueType.STRING, cells=["x"])
        with pytest.raises(ValueTypeError):
            matmul(s, s)

    def test_madd_counts(self):
        MADDS.reset()
        matmul(blk(np.ones((4, 5))), blk(np.ones((5, 6))))
        assert MADDS.reset() == 4 * 5 * 6
        xs = rand_block(100, 50, sparsity=0.1, seed=7)
        MADDS.reset()
        matmul(xs, rand_block(50, 20, seed=8))
        assert MADDS.reset() == xs.nnz * 20


class TestTsmm:
    def test_small_example(self):
        out = tsmm(blk(A22))
        assert np.array_equal(out.to_array(), [[10.0, 14.0], [14.0, 20.0]])

    def test_single_column_dot(self):
        out = tsmm(blk([[1.0], [2.0], [3.0]]))
        assert np.array_equal(out.to_array(), [[14.0]])

    def test_matches_explicit_transpose_product(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, (40, 8))
        got = tsmm(blk(x)).to_array()
        want = matmul(transpose(blk(x)), blk(x)).to_array()
        assert np.allclose(got, want, atol=1e-12)
        assert np.allclose(got, naive_tsmm(x), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_exact_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (int(rng.integers(1, 30)), int(rng.integers(1, 10))))
        g = tsmm(blk(x)).to_array()
        assert np.array_equal(g, g.T)

    def test_sparse_path_agrees(self):
        x = rand_block(200, 30, sparsity=0.1, seed=4)
        assert x.layout == SPARSE
        got = tsmm(x).to_array()
        want = tsmm(convert_layout(x, DENSE)).to_array()
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_madds_sparse_vs_dense(self):
        x = rand_block(500, 40, sparsity=0.1, seed=2)
        MADDS.reset()
        tsmm(x)
        sparse_madds = MADDS.reset()
        tsmm(convert_layout(x, DENSE))
        dense_madds = MADDS.reset()
        assert dense_madds == 500 * 40 * 41 // 2
        assert sparse_madds < 0.25 * dense_madds


class TestTranspose:
    def test_small(self):
        assert np.array_equal(transpose(blk(A22)).to_array(), [[1.0, 3.0], [2.0, 4.0]])

    def test_row_to_column(self):
        out = transpose(blk([[1.0, 2.0, 3.0]]))
        assert out.dims == (3, 1)

    def test_layout_preserved(self):
        s = convert_layout(blk([[0.0, 5.0], [0.0, 0.0]]), SPARSE)
        assert transpose(s).layout == SPARSE
        assert transpose(blk(A22)).layout == DENSE

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_involution(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (int(rng.integers(1, 12)), int(rng.integers(1, 12))))
        assert np.array_equal(transpose(transpose(blk(x))).to_array(), x)

    def test_rank3_rejected(self):
        b = BasicTensorBlock.from_array(np.zeros((2, 2, 2)))
        with pytest.raises(ShapeError):
            transpose(b)


class TestElementwise:
    def test_add(self):
        out = elementwise("+", blk([[1.0, 2.0]]), blk([[3.0, 4.0]]))
        assert np.array_equal(out.to_array(), [[4.0, 6.0]])

    def test_scalar_zero_annihilates_to_sparse(self):
        out = elementwise("*", blk(A22), Scalar(ValueType.FP64, 0.0))
        assert out.nnz == 0
        assert out.layout == SPARSE

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_addition_commutes(self, seed):
        rng = np.random.default_rng(seed)
        dims = (int(rng.integers(1, 10)), int(rng.integers(1, 10)))
        a, b = rng.uniform(-9, 9, dims), rng.uniform(-9, 9, dims)
        x = elementwise("+", blk(a), blk(b)).to_array()
        y = elementwise("+", blk(b), blk(a)).to_array()
        assert np.array_equal(x, y)

    def test_division_by_zero_is_ieee(self):
        out = elementwise("/", blk([[1.0, -1.0, 0.0]]), blk([[0.0, 0.0, 0.0]]))
        vals = out.to_array().ravel()
        assert vals[0] == np.inf and vals[1] == -np.inf and np.isnan(vals[2])

    def test_power(self):
        out = elementwise("^", blk([[2.0, 3.0]]), Scalar(ValueType.INT64, 2))
        assert np.array_equal(out.to_array(), [[4.0, 9.0]])

    def test_row_broadcast(self):
        out = elementwise("-", blk(A22), blk([[1.0, 2.0]]))
        assert np.array_equal(out.to_array(), [[0.0, 0.0], [2.0, 2.0]])

    def test_col_broadcast(self):
        out = elementwise("*", blk(A22), blk([[2.0], [10.0]]))
        assert np.array_equal(out.to_array(), [[2.0, 4.0], [30.0, 40.0]])

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            elementwise("+", blk(A22), blk([[1.0, 2.0, 3.0]]))

    def test_sparse_multiply_stays_sparse(self):
        s = rand_block(100, 100, sparsity=0.05, seed=1)
        out = elementwise("*", s, Scalar(ValueType.FP64, 2.0))
        assert out.layout == SPARSE
        assert np.allclose(out.to_array(), 2.0 * s.to_array())

    def test_compare(self):
        out = elementwise_compare(">", blk([[1.0, 5.0]]), Scalar(ValueType.FP64, 2.0))
        assert np.array_equal(out.to_array(), [[0.0, 1.0]])


class TestAggregate:
    def test_sum(self):
        assert aggregate("sum", blk(A22)).value == 10.0

    def test_colsums(self):
        out = aggregate("colSums", blk(A22))
        assert out.dims == (1, 2)
        assert np.array_equal(out.to_array(), [[4.0, 6.0]])
        assert list(out.to_array().ravel()) == naive_aggregate("colSums", A22)

    def test_rowsums(self):
        out = aggregate("rowSums", blk(A22))
        assert out.dims == (2, 1)
        assert np.array_equal(out.to_array().ravel(), [3.0, 7.0])

    def test_mean_all_zero(self):
        z = construct([5, 5], ValueType.FP64, cells=[0.0] * 25)
        assert z.layout == SPARSE
        assert aggregate("mean", z).value == 0.0

    def test_sparse_min_includes_implicit_zeros(self):
        s = construct([3, 3], ValueType.FP64, pairs=[((0, 0), 5.0)])
        assert aggregate("min", s).value == 0.0
        assert aggregate("max", s).value == 5.0
        neg = construct([3, 3], ValueType.FP64, pairs=[((0, 0), -5.0)])
        assert aggregate("min", neg).value == -5.0
        assert aggregate("max", neg).value == 0.0

    def test_min_of_empty_errors(self):
        empty = BasicTensorBlock.from_array(np.zeros((0, 3)))
        with pytest.raises(ShapeError):
            aggregate("min", empty)
        assert aggregate("sum", empty).value == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_against_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        arr = rng.uniform(-5, 5, (int(rng.integers(1, 12)), int(rng.integers(1, 8))))
        for kind in ("sum", "mean", "min", "max"):
            got = aggregate(kind, blk(arr)).value
            assert got == pytest.approx(naive_aggregate(kind, arr), abs=1e-10)

    def test_sparse_sum_matches_dense(self):
        s = rand_block(50, 50, sparsity=0.1, seed=6)
        d = convert_layout(s, DENSE)
        assert aggregate("sum", s).value == pytest.approx(aggregate("sum", d).value, abs=1e-12)


class TestBindSlice:
    def test_rbind(self):
        out = bind("rows", [blk([[1.0, 2.0]]), blk([[3.0, 4.0]])])
        assert np.array_equal(out.to_array(), A22)

    def test_cbind(self):
        out = bind("cols", [blk([[1.0], [2.0], [3.0]]), blk([[4.0], [5.0], [6.0]])])
        assert out.dims == (3, 2)
        assert np.array_equal(out.to_array(), [[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])

    def test_empty_list(self):
        with pytest.raises(ShapeError):
            bind("rows", [])

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            bind("rows", [blk([[1.0, 2.0]]), blk([[1.0]])])

    def test_slice_examples(self):
        assert np.array_equal(
            slice_block(blk(A22), [(0, 1), None]).to_array(), [[1.0, 2.0]])
        assert np.array_equal(slice_block(blk(A22), [None, None]).to_array(), A22)

    def test_slice_out_of_bounds(self):
        with pytest.raises(ShapeError):
            slice_block(blk(A22), [(0, 3), None])
        with pytest.raises(ShapeError):
            slice_block(blk(A22), [(1, 1), None])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bind_slice_duality(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        parts = [rng.uniform(-1, 1, (int(rng.integers(1, 5)), n)) for _ in range(int(rng.integers(2, 5)))]
        bound = bind("rows", [blk(p) for p in parts])
        lo = 0
        for p in parts:
            hi = lo + p.shape[0]
            assert np.array_equal(slice_block(bound, [(lo, hi), None]).to_array(), p)
            lo = hi

    def test_sparse_bind_stays_sparse(self):
        parts = [rand_block(40, 40, sparsity=0.05, seed=s) for s in (1, 2)]
        out = bind("rows", parts)
        assert out.layout == SPARSE
        assert np.array_equal(out.to_array(),
                              np.vstack([p.to_array() for p in parts]))

    def test_left_index(self):
        out = left_index(blk(A22), blk([[9.0]]), [(0, 1), (1, 2)])
        assert np.array_equal(out.to_array(), [[1.0, 9.0], [3.0, 4.0]])
        assert np.array_equal(blk(A22).to_array(), A22)  # input untouched


class TestSolve:
    def test_diagonal(self):
        x = solve(blk([[2.0, 0.0], [0.0, 4.0]]), blk([[2.0], [8.0]]))
        assert np.allclose(x.to_array().ravel(), [1.0, 2.0], atol=1e-12)

    def test_against_elimination_oracle(self):
        a = [[4.0, 2.0], [2.0, 3.0]]
        b = [[10.0], [8.0]]
        x = solve(blk(a), blk(b)).to_array().ravel()
        assert np.allclose(x, gaussian_solve(a, b), atol=1e-10)

    def test_singular_names_pivot(self):
        with pytest.raises(SingularMatrixError) as err:
            solve(blk([[1.0, 2.0], [2.0, 4.0]]), blk([[1.0], [1.0]]))
        assert err.value.pivot == 1
        assert "pivot 1" in str(err.value)

    def test_asymmetric_rejected(self):
        with pytest.raises(ShapeError):
            solve(blk([[1.0, 2.0], [0.0, 1.0]]), blk([[1.0], [1.0]]))

    def test_residual_bound_on_random_spd(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n = int(rng.integers(2, 20))
            m = rng.uniform(-1, 1, (n, n))
            a = m.T @ m + np.eye(n)
            a = (a + a.T) / 2
            b = rng.uniform(-1, 1, (n, 1))
            x = solve(blk(a), blk(b)).to_array()
            assert np.linalg.norm(a @ x - b) <= 1e-8 * (1 + np.linalg.norm(b))

    def test_ridge_retry_rescues_marginal_system(self):
        # PSD up to rounding: Cholesky may hit a tiny negative pivot without the retry
        v = np.array([[1.0, 1.0, 1.0]]).T
        a = v @ v.T + 1e-6 * np.eye(3)
        b = a @ np.array([[1.0], [2.0], [3.0]])
        x = solve(blk(a), blk(b)).to_array()
        assert np.linalg.norm(a @ x - b) <= 1e-8 * (1 + np.linalg.norm(b))


class TestBuilders:
    def test_fill(self):
        assert np.array_equal(fill(3.0, 2, 2).to_array(), [[3.0, 3.0], [3.0, 3.0]])

    def test_diag_vector_to_matrix(self):
        out = diag(blk([[2.0], [3.0]]))
        assert np.array_equal(out.to_array(), [[2.0, 0.0], [0.0, 3.0]])

    def test_diag_matrix_to_vector(self):
        out = diag(blk(A22))
        assert out.dims == (2, 1)
        assert np.array_equal(out.to_array().ravel(), [1.0, 4.0])

    def test_seq(self):
        assert np.array_equal(seq(1, 5).to_array().ravel(), [1.0, 2.0, 3.0, 4.0, 5.0])
        assert np.array_equal(seq(0, 1, 0.5).to_array().ravel(), [0.0, 0.5, 1.0])

    def test_rand_is_deterministic_in_seed(self):
        a = rand_block(10, 10, seed=42).to_array()
        b = rand_block(10, 10, seed=42).to_array()
        assert np.array_equal(a, b)

    def test_rand_sparsity_is_retention_probability(self):
        x = rand_block(400, 400, sparsity=0.1, seed=0)
        assert x.density() == pytest.approx(0.1, abs=0.01)


class TestAsMatrix:
    def test_mixed_numeric(self):
        d = DataTensorBlock.from_rows(
            [(1, 2.5), (3, 4.5)], [ValueType.INT64, ValueType.FP64])
        out = as_matrix(d)
        assert out.vtype is ValueType.FP64
        assert np.array_equal(out.to_array(), [[1.0, 2.5], [3.0, 4.5]])

    def test_boolean_cast(self):
        d = DataTensorBlock.from_rows([(True,), (False,)], [ValueType.BOOLEAN])
        assert np.array_equal(as_matrix(d).to_array().ravel(), [1.0, 0.0])

    def test_string_column_rejected(self):
        d = DataTensorBlock.from_rows(
            [(1.0, "x")], [ValueType.FP64, ValueType.STRING])
        with pytest.raises(ValueTypeError):
            as_matrix(d)
        out = as_matrix(d, (0, 1))  # excluding the string column is fine
        assert np.array_equal(out.to_array(), [[1.0]])


class TestThreading:
    def test_thread_count_invariance(self):
        rng = np.random.default_rng(23)
        a = rng.uniform(-1, 1, (3000, 40))
        old = kernels.get_num_threads()
        try:
            kernels.set_num_threads(1)
            g1 = tsmm(blk(a)).to_array()
            s1 = aggregate("sum", blk(a)).value
            kernels.set_num_threads(4)
            g4 = tsmm(blk(a)).to_array()
            s4 = aggregate("sum", blk(a)).value
        finally:
            kernels.set_num_threads(old)
        assert np.max(np.abs(g4 - g1)) <= 1e-12 * max(1.0, np.max(np.abs(g1)))
        assert s4 == pytest.approx(s1, rel=1e-12)
