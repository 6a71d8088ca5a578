# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct convolution kernels.

All arrays are C-contiguous and batched along the first axis. ``conv_full``
switches to a scatter loop for input planes that are mostly zero, which is
the common case for detail codes. Output buffers
are allocated by the caller and must be zero-filled; the kernels accumulate
into them. Loops run without the GIL so callers may split a batch across
threads.
"""

ctypedef fused real:
    float
    double


cdef inline void _axpy(real* dst, const real* src, real a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(n):
        dst[j] += a * src[j]


cdef inline double _dot(const real* a, const real* b, Py_ssize_t n) noexcept nogil:
    # four independent chains so the adds pipeline
    cdef Py_ssize_t j = 0
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    while j + 4 <= n:
        s0 += <double>a[j] * <double>b[j]
        s1 += <double>a[j + 1] * <double>b[j + 1]
        s2 += <double>a[j + 2] * <double>b[j + 2]
        s3 += <double>a[j + 3] * <double>b[j + 3]
        j += 4
    while j < n:
        s0 += <double>a[j] * <double>b[j]
        j += 1
    return (s0 + s1) + (s2 + s3)


def conv_full(const real[:, :, :, ::1] x, const real[:, :, :, ::1] filters,
              real[:, :, :, ::1] out):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t C = filters.shape[0], H = filters.shape[2], W = filters.shape[3]
    cdef Py_ssize_t n, r, c, p, q, i, j, nnz
    cdef real a, v
    with nogil:
        for n in range(N):
            for c in range(D):
                nnz = 0
                for i in range(h):
                    for j in range(w):
                        if x[n, c, i, j] != 0:
                            nnz += 1
                if nnz == 0:
                    continue
                if 8 * nnz < h * w:
                    # sparse plane: scatter one kernel copy per nonzero
                    for i in range(h):
                        for j in range(w):
                            v = x[n, c, i, j]
                            if v == 0:
                                continue
                            for r in range(C):
                                for p in range(H):
                                    _axpy(&out[n, r, i + p, j], &filters[r, c, p, 0], v, W)
                    continue
                for r in range(C):
                    for p in range(H):
                        for q in range(W):
                            a = filters[r, c, p, q]
                            for i in range(h):
                                _axpy(&out[n, r, i + p, q], &x[n, c, i, 0], a, w)


def corr_valid(const real[:, :, :, ::1] y, const real[:, :, :, ::1] filters,
               real[:, :, :, ::1] out):
    cdef Py_ssize_t N = y.shape[0], C = y.shape[1]
    cdef Py_ssize_t D = filters.shape[1], H = filters.shape[2], W = filters.shape[3]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t n, r, c, p, q, i
    cdef real a
    with nogil:
        for n in range(N):
            for c in range(D):
                for r in range(C):
                    for p in range(H):
                        for q in range(W):
                            a = filters[r, c, p, q]
                            for i in range(ho):
                                _axpy(&out[n, c, i, 0], &y[n, r, i + p, q], a, wo)


def filter_grad(const real[:, :, :, ::1] residual, const real[:, :, :, ::1] code,
                double[:, :, :, ::1] out):
    """Accumulate sum_n sum_ij residual[n, r, i+p, j+q] * code[n, c, i, j] into out."""
    cdef Py_ssize_t N = code.shape[0], D = code.shape[1], h = code.shape[2], w = code.shape[3]
    cdef Py_ssize_t C = out.shape[0], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t n, r, c, p, q, i, j, nnz
    cdef double acc, v
    with nogil:
        for n in range(N):
            for c in range(D):
                nnz = 0
                for i in range(h):
                    for j in range(w):
                        if code[n, c, i, j] != 0:
                            nnz += 1
                if 8 * nnz < h * w:
                    # sparse plane: visit only the nonzero code entries
                    for i in range(h):
                        for j in range(w):
                            v = code[n, c, i, j]
                            if v == 0:
                                continue
                            for r in range(C):
                                for p in range(H):
                                    for q in range(W):
                                        out[r, c, p, q] += v * residual[n, r, i + p, j + q]
                    continue
                for r in range(C):
                    for p in range(H):
                        for q in range(W):
                            acc = 0.0
                            for i in range(h):
                                acc += _dot(&residual[n, r, i + p, q], &code[n, c, i, 0], w)
                            out[r, c, p, q] += acc
