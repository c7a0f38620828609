# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled deformable aggregation (forward and backward).

Layouts: image [B, C, H, W]; weight/alpha/beta [B, K, H, W];
base_x/base_y [K] stencil displacements. Sampling is bilinear with
neighbour indices clamped to the border.
"""
from libc.math cimport floor

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _clamp(Py_ssize_t v, Py_ssize_t hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def forward(const real[:, :, :, ::1] img, const real[:, :, :, ::1] weight,
            const real[:, :, :, ::1] alpha, const real[:, :, :, ::1] beta,
            const double[::1] base_x, const double[::1] base_y,
            real[:, :, :, ::1] out):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t K = weight.shape[1]
    cdef Py_ssize_t b, k, y, x, c, x0, y0, x1, y1
    cdef double px, py, fx, fy, w, w00, w01, w10, w11
    with nogil:
        for b in range(B):
            for k in range(K):
                for y in range(H):
                    for x in range(W):
                        px = x + base_x[k] + alpha[b, k, y, x]
                        py = y + base_y[k] + beta[b, k, y, x]
                        fx = floor(px)
                        fy = floor(py)
                        x0 = <Py_ssize_t>fx
                        y0 = <Py_ssize_t>fy
                        fx = px - fx
                        fy = py - fy
                        x1 = _clamp(x0 + 1, W - 1)
                        y1 = _clamp(y0 + 1, H - 1)
                        x0 = _clamp(x0, W - 1)
                        y0 = _clamp(y0, H - 1)
                        w = weight[b, k, y, x]
                        w00 = w * (1 - fx) * (1 - fy)
                        w01 = w * fx * (1 - fy)
                        w10 = w * (1 - fx) * fy
                        w11 = w * fx * fy
                        for c in range(C):
                            out[b, c, y, x] += <real>(w00 * img[b, c, y0, x0] + w01 * img[b, c, y0, x1]
                                                      + w10 * img[b, c, y1, x0] + w11 * img[b, c, y1, x1])


def backward(const real[:, :, :, ::1] grad_out, const real[:, :, :, ::1] img, const real[:, :, :, ::1] weight,
             const real[:, :, :, ::1] alpha, const real[:, :, :, ::1] beta,
             const double[::1] base_x, const double[::1] base_y,
             real[:, :, :, ::1] grad_img, real[:, :, :, ::1] grad_weight,
             real[:, :, :, ::1] grad_alpha, real[:, :, :, ::1] grad_beta,
             bint need_img):
    """Accumulate gradients into the (zeroed) output buffers."""
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t K = weight.shape[1]
    cdef Py_ssize_t b, k, y, x, c, x0, y0, x1, y1
    cdef double px, py, fx, fy, w, g, v00, v01, v10, v11
    cdef double sw, sa, sb
    with nogil:
        for b in range(B):
            for k in range(K):
                for y in range(H):
                    for x in range(W):
                        px = x + base_x[k] + alpha[b, k, y, x]
                        py = y + base_y[k] + beta[b, k, y, x]
                        fx = floor(px)
                        fy = floor(py)
                        x0 = <Py_ssize_t>fx
                        y0 = <Py_ssize_t>fy
                        fx = px - fx
                        fy = py - fy
                        x1 = _clamp(x0 + 1, W - 1)
                        y1 = _clamp(y0 + 1, H - 1)
                        x0 = _clamp(x0, W - 1)
                        y0 = _clamp(y0, H - 1)
                        w = weight[b, k, y, x]
                        sw = 0
                        sa = 0
                        sb = 0
                        for c in range(C):
                            g = grad_out[b, c, y, x]
                            if g == 0:
                                continue
                            v00 = img[b, c, y0, x0]
                            v01 = img[b, c, y0, x1]
                            v10 = img[b, c, y1, x0]
                            v11 = img[b, c, y1, x1]
                            sw += g * ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01
                                       + (1 - fx) * fy * v10 + fx * fy * v11)
                            sa += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
                            sb += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
                            if need_img:
                                grad_img[b, c, y0, x0] += <real>(g * w * (1 - fx) * (1 - fy))
                                grad_img[b, c, y0, x1] += <real>(g * w * fx * (1 - fy))
                                grad_img[b, c, y1, x0] += <real>(g * w * (1 - fx) * fy)
                                grad_img[b, c, y1, x1] += <real>(g * w * fx * fy)
                        grad_weight[b, k, y, x] = <real>sw
                        grad_alpha[b, k, y, x] = <real>(w * sa)
                        grad_beta[b, k, y, x] = <real>(w * sb)
