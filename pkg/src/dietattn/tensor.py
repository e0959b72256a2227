"""Dense float64 matrices and the small linear algebra the library needs.

Everything is row-major, 64-bit, and validated at this boundary: public
operations check shapes and leave only finite values behind. Heavier
callers (the model hot path) talk to the kernel backend directly and
perform their own checks at the loss.
"""

from array import array

from .backend import K
from .errors import DimensionError, NumericError
from .rng import Rng

_SVD_MAX_SWEEPS = 60
_SVD_TOL = 1e-12


class Matrix:
    """A rows x cols matrix of float64 values in a flat row-major buffer."""

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows, cols, data=None):
        if rows < 0 or cols < 0:
            raise DimensionError(f"negative shape {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        if data is None:
            self.data = array("d", bytes(8 * rows * cols))
        else:
            if not isinstance(data, array) or data.typecode != "d":
                data = array("d", data)
            if len(data) != rows * cols:
                raise DimensionError(
                    f"data length {len(data)} != {rows}x{cols}")
            self.data = data

    @classmethod
    def from_rows(cls, rows_list):
        rows = len(rows_list)
        cols = len(rows_list[0]) if rows else 0
        flat = array("d")
        for r in rows_list:
            if len(r) != cols:
                raise DimensionError("ragged rows")
            flat.extend(r)
        return cls(rows, cols, flat)

    @classmethod
    def identity(cls, n):
        m = cls(n, n)
        for i in range(n):
            m.data[i * n + i] = 1.0
        return m

    @property
    def shape(self):
        return (self.rows, self.cols)

    def get(self, i, j):
        return self.data[i * self.cols + j]

    def set(self, i, j, v):
        self.data[i * self.cols + j] = v

    def __getitem__(self, ij):
        i, j = ij
        return self.data[i * self.cols + j]

    def row(self, i):
        c = self.cols
        return list(self.data[i * c:(i + 1) * c])

    def tolist(self):
        return [self.row(i) for i in range(self.rows)]

    def copy(self):
        return Matrix(self.rows, self.cols, array("d", self.data))

    def equals_bitwise(self, other):
        if self.shape != other.shape:
            return False
        return self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


def _check_finite(m, op):
    if not K.all_finite(m.data, m.rows * m.cols):
        raise NumericError(f"non-finite value produced by {op}")
    return m


def matmul(a, b):
    """Standard product a @ b."""
    if a.cols != b.rows:
        raise DimensionError(
            f"cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    out = Matrix(a.rows, b.cols)
    K.matmul(a.data, b.data, out.data, a.rows, a.cols, b.cols, 0)
    return _check_finite(out, "matmul")


def matmul_nt(a, b):
    """a @ b^T without materializing the transpose."""
    if a.cols != b.cols:
        raise DimensionError(
            f"cannot multiply {a.rows}x{a.cols} by transposed {b.rows}x{b.cols}")
    out = Matrix(a.rows, b.rows)
    K.matmul_nt(a.data, b.data, out.data, a.rows, a.cols, b.rows, 0)
    return _check_finite(out, "matmul_nt")


def matmul_tn(a, b):
    """a^T @ b without materializing the transpose."""
    if a.rows != b.rows:
        raise DimensionError(
            f"cannot multiply transposed {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    out = Matrix(a.cols, b.cols)
    K.matmul_tn(a.data, b.data, out.data, a.cols, a.rows, b.cols, 0)
    return _check_finite(out, "matmul_tn")


def transpose(a):
    out = Matrix(a.cols, a.rows)
    K.transpose(a.data, out.data, a.rows, a.cols)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(
            f"{op} needs equal shapes, got {a.rows}x{a.cols} and {b.rows}x{b.cols}")


def add(a, b):
    _same_shape(a, b, "add")
    out = Matrix(a.rows, a.cols)
    K.add(a.data, b.data, out.data, a.rows * a.cols)
    return _check_finite(out, "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    out = Matrix(a.rows, a.cols)
    K.sub(a.data, b.data, out.data, a.rows * a.cols)
    return _check_finite(out, "sub")


def hadamard(a, b):
    _same_shape(a, b, "hadamard")
    out = Matrix(a.rows, a.cols)
    K.hadamard(a.data, b.data, out.data, a.rows * a.cols)
    return _check_finite(out, "hadamard")


def scale_by(a, s):
    out = Matrix(a.rows, a.cols)
    K.scale(a.data, float(s), out.data, a.rows * a.cols)
    return _check_finite(out, "scale_by")


def softmax_rows(a, scale=1.0):
    """Row-wise softmax of a / scale, stabilized by row-max subtraction."""
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    src = a
    if scale != 1.0:
        src = scale_by(a, 1.0 / scale)
    out = Matrix(a.rows, a.cols)
    K.softmax_rows(src.data, out.data, a.rows, a.cols)
    return out


def frob(a):
    return K.frob_norm(a.data, a.rows * a.cols)


def max_abs_diff(a, b):
    _same_shape(a, b, "max_abs_diff")
    return K.max_abs_diff(a.data, b.data, a.rows * a.cols)


def randn_matrix(rows, cols, std, seed):
    """Deterministic N(0, std^2) matrix for a given seed."""
    if std < 0.0:
        raise ValueError(f"std must be nonnegative, got {std}")
    m = Matrix(rows, cols)
    if std > 0.0:
        Rng(seed, "randn").fill_normal(m.data, std)
    return m


def _jacobi(work, v, sigma, m, n):
    sweeps = K.jacobi_sweeps(work, v, sigma, m, n, _SVD_MAX_SWEEPS, _SVD_TOL)
    if sweeps < 0:
        raise NumericError(
            f"SVD did not converge within {_SVD_MAX_SWEEPS} sweeps")


def _svd_tall(mat):
    # rows >= cols here
    m, n = mat.rows, mat.cols
    work = array("d", mat.data)
    v = Matrix.identity(n)
    sigma = array("d", bytes(8 * n))
    _jacobi(work, v.data, sigma, m, n)
    order = sorted(range(n), key=lambda j: (-sigma[j], j))
    u = Matrix(m, n)
    vs = Matrix(n, n)
    svals = []
    for jn, jo in enumerate(order):
        s = sigma[jo]
        svals.append(s)
        if s > 0.0:
            inv = 1.0 / s
            for i in range(m):
                u.data[i * n + jn] = work[i * n + jo] * inv
        for i in range(n):
            vs.data[i * n + jn] = v.data[i * n + jo]
    return u, svals, vs


def svd(mat):
    """Thin SVD: returns (U, s, V) with mat ~= U @ diag(s) @ V^T.

    U is rows x r and V is cols x r for r = min(rows, cols); s is a list
    sorted in descending order. Raises NumericError if the Jacobi sweeps
    fail to converge.
    """
    if mat.rows >= mat.cols:
        return _svd_tall(mat)
    u_t, svals, v_t = _svd_tall(transpose(mat))
    return v_t, svals, u_t


def singular_values(mat):
    src = mat if mat.rows >= mat.cols else transpose(mat)
    m, n = src.rows, src.cols
    work = array("d", src.data)
    v = Matrix.identity(n)
    sigma = array("d", bytes(8 * n))
    _jacobi(work, v.data, sigma, m, n)
    return sorted(sigma, reverse=True)


def numerical_rank(mat, rel_tol=1e-8):
    """Count of singular values above rel_tol times the largest one."""
    if not (0.0 < rel_tol < 1.0):
        raise ValueError(f"rel_tol must be in (0, 1), got {rel_tol}")
    svals = singular_values(mat)
    if not svals or svals[0] == 0.0:
        return 0
    cut = rel_tol * svals[0]
    return sum(1 for s in svals if s > cut)
