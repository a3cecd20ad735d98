# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: direct 2-D convolution and bilinear sampling.

Semantics are defined by the NumPy reference in ``_kernels_np.py``; the two
backends must agree to float64 rounding noise.  All loops are single-threaded
so repeated runs are bit-deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef Py_ssize_t isize


cdef inline isize _lo(isize off, isize stride) nogil:
    # smallest o >= 0 with o*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline isize _hi(isize off, isize stride, isize limit, isize omax) nogil:
    # largest o <= omax with o*stride + off <= limit - 1; returns -1 if empty
    cdef isize h
    if limit - 1 - off < 0:
        return -1
    h = (limit - 1 - off) // stride
    if h > omax:
        h = omax
    return h


def conv2d_forward(object x_in, object w_in, int stride, int pad):
    cdef cnp.ndarray[f64, ndim=4] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=4] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef isize n = x.shape[0], ci = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef isize co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if ci != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {ci} vs kernel {w.shape[1]}")
    cdef isize ho = (h + 2 * pad - kh) // stride + 1
    cdef isize wo = (wid + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d output would be empty")
    cdef cnp.ndarray[f64, ndim=4] y = np.zeros((n, co, ho, wo), dtype=np.float64)
    cdef isize b, f, c, u, v, oy, ox, oy0, oy1, ox0, ox1, iy, ix
    cdef f64 wv
    with nogil:
        for b in range(n):
            for f in range(co):
                for c in range(ci):
                    for u in range(kh):
                        oy0 = _lo(u - pad, stride)
                        oy1 = _hi(u - pad, stride, h, ho - 1)
                        for v in range(kw):
                            wv = w[f, c, u, v]
                            if wv == 0.0:
                                continue
                            ox0 = _lo(v - pad, stride)
                            ox1 = _hi(v - pad, stride, wid, wo - 1)
                            for oy in range(oy0, oy1 + 1):
                                iy = oy * stride + u - pad
                                for ox in range(ox0, ox1 + 1):
                                    ix = ox * stride + v - pad
                                    y[b, f, oy, ox] += wv * x[b, c, iy, ix]
    return y


def conv2d_input_grad(object gy_in, object w_in, int stride, int pad, int h, int wid):
    cdef cnp.ndarray[f64, ndim=4] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=4] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef isize n = gy.shape[0], co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef isize ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef cnp.ndarray[f64, ndim=4] gx = np.zeros((n, ci, h, wid), dtype=np.float64)
    cdef isize b, f, c, u, v, oy, ox, oy0, oy1, ox0, ox1, iy, ix
    cdef f64 wv
    with nogil:
        for b in range(n):
            for f in range(co):
                for c in range(ci):
                    for u in range(kh):
                        oy0 = _lo(u - pad, stride)
                        oy1 = _hi(u - pad, stride, h, ho - 1)
                        for v in range(kw):
                            wv = w[f, c, u, v]
                            if wv == 0.0:
                                continue
                            ox0 = _lo(v - pad, stride)
                            ox1 = _hi(v - pad, stride, wid, wo - 1)
                            for oy in range(oy0, oy1 + 1):
                                iy = oy * stride + u - pad
                                for ox in range(ox0, ox1 + 1):
                                    ix = ox * stride + v - pad
                                    gx[b, c, iy, ix] += wv * gy[b, f, oy, ox]
    return gx


def conv2d_kernel_grad(object gy_in, object x_in, int stride, int pad, int kh, int kw):
    cdef cnp.ndarray[f64, ndim=4] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=4] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef isize n = x.shape[0], ci = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef isize co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef cnp.ndarray[f64, ndim=4] gw = np.zeros((co, ci, kh, kw), dtype=np.float64)
    cdef isize b, f, c, u, v, oy, ox, oy0, oy1, ox0, ox1, iy, ix
    cdef f64 acc
    with nogil:
        for f in range(co):
            for c in range(ci):
                for u in range(kh):
                    oy0 = _lo(u - pad, stride)
                    oy1 = _hi(u - pad, stride, h, ho - 1)
                    for v in range(kw):
                        ox0 = _lo(v - pad, stride)
                        ox1 = _hi(v - pad, stride, wid, wo - 1)
                        acc = 0.0
                        for b in range(n):
                            for oy in range(oy0, oy1 + 1):
                                iy = oy * stride + u - pad
                                for ox in range(ox0, ox1 + 1):
                                    ix = ox * stride + v - pad
                                    acc += gy[b, f, oy, ox] * x[b, c, iy, ix]
                        gw[f, c, u, v] = acc
    return gw


def bilinear_forward(object images_in, object grid_in):
    cdef cnp.ndarray[f64, ndim=4] images = np.ascontiguousarray(images_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=5] grid = np.ascontiguousarray(grid_in, dtype=np.float64)
    cdef isize nb = images.shape[0], c = images.shape[1], h = images.shape[2], w = images.shape[3]
    cdef isize g = grid.shape[1], gh = grid.shape[2], gw = grid.shape[3]
    cdef cnp.ndarray[f64, ndim=5] out = np.zeros((nb, g, c, gh, gw), dtype=np.float64)
    cdef isize b, k, oy, ox, ch, x0, x1, y0, y1
    cdef f64 px, py, fx, fy, w00, w01, w10, w11, v00, v01, v10, v11
    cdef bint vx0, vx1, vy0, vy1
    with nogil:
        for b in range(nb):
            for k in range(g):
                for oy in range(gh):
                    for ox in range(gw):
                        px = (grid[b, k, oy, ox, 0] + 1.0) * 0.5 * (w - 1)
                        py = (grid[b, k, oy, ox, 1] + 1.0) * 0.5 * (h - 1)
                        x0 = <isize>floor(px)
                        y0 = <isize>floor(py)
                        fx = px - x0
                        fy = py - y0
                        x1 = x0 + 1
                        y1 = y0 + 1
                        vx0 = 0 <= x0 < w
                        vx1 = 0 <= x1 < w
                        vy0 = 0 <= y0 < h
                        vy1 = 0 <= y1 < h
                        w00 = (1.0 - fx) * (1.0 - fy)
                        w01 = fx * (1.0 - fy)
                        w10 = (1.0 - fx) * fy
                        w11 = fx * fy
                        for ch in range(c):
                            v00 = images[b, ch, y0, x0] if (vy0 and vx0) else 0.0
                            v01 = images[b, ch, y0, x1] if (vy0 and vx1) else 0.0
                            v10 = images[b, ch, y1, x0] if (vy1 and vx0) else 0.0
                            v11 = images[b, ch, y1, x1] if (vy1 and vx1) else 0.0
                            out[b, k, ch, oy, ox] = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    return out


def bilinear_image_grad(object gy_in, object grid_in, int h, int w):
    cdef cnp.ndarray[f64, ndim=5] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=5] grid = np.ascontiguousarray(grid_in, dtype=np.float64)
    cdef isize nb = gy.shape[0], g = gy.shape[1], c = gy.shape[2], gh = gy.shape[3], gw = gy.shape[4]
    cdef cnp.ndarray[f64, ndim=4] gimg = np.zeros((nb, c, h, w), dtype=np.float64)
    cdef isize b, k, oy, ox, ch, x0, x1, y0, y1
    cdef f64 px, py, fx, fy, w00, w01, w10, w11, gv
    cdef bint vx0, vx1, vy0, vy1
    with nogil:
        for b in range(nb):
            for k in range(g):
                for oy in range(gh):
                    for ox in range(gw):
                        px = (grid[b, k, oy, ox, 0] + 1.0) * 0.5 * (w - 1)
                        py = (grid[b, k, oy, ox, 1] + 1.0) * 0.5 * (h - 1)
                        x0 = <isize>floor(px)
                        y0 = <isize>floor(py)
                        fx = px - x0
                        fy = py - y0
                        x1 = x0 + 1
                        y1 = y0 + 1
                        vx0 = 0 <= x0 < w
                        vx1 = 0 <= x1 < w
                        vy0 = 0 <= y0 < h
                        vy1 = 0 <= y1 < h
                        w00 = (1.0 - fx) * (1.0 - fy)
                        w01 = fx * (1.0 - fy)
                        w10 = (1.0 - fx) * fy
                        w11 = fx * fy
                        for ch in range(c):
                            gv = gy[b, k, ch, oy, ox]
                            if vy0 and vx0:
                                gimg[b, ch, y0, x0] += gv * w00
                            if vy0 and vx1:
                                gimg[b, ch, y0, x1] += gv * w01
                            if vy1 and vx0:
                                gimg[b, ch, y1, x0] += gv * w10
                            if vy1 and vx1:
                                gimg[b, ch, y1, x1] += gv * w11
    return gimg


def bilinear_grid_grad(object gy_in, object images_in, object grid_in):
    cdef cnp.ndarray[f64, ndim=5] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=4] images = np.ascontiguousarray(images_in, dtype=np.float64)
    cdef cnp.ndarray[f64, ndim=5] grid = np.ascontiguousarray(grid_in, dtype=np.float64)
    cdef isize nb = images.shape[0], c = images.shape[1], h = images.shape[2], w = images.shape[3]
    cdef isize g = grid.shape[1], gh = grid.shape[2], gw = grid.shape[3]
    cdef cnp.ndarray[f64, ndim=5] ggrid = np.zeros((nb, g, gh, gw, 2), dtype=np.float64)
    cdef isize b, k, oy, ox, ch, x0, x1, y0, y1
    cdef f64 px, py, fx, fy, v00, v01, v10, v11, gv, dpx, dpy
    cdef bint vx0, vx1, vy0, vy1
    with nogil:
        for b in range(nb):
            for k in range(g):
                for oy in range(gh):
                    for ox in range(gw):
                        px = (grid[b, k, oy, ox, 0] + 1.0) * 0.5 * (w - 1)
                        py = (grid[b, k, oy, ox, 1] + 1.0) * 0.5 * (h - 1)
                        x0 = <isize>floor(px)
                        y0 = <isize>floor(py)
                        fx = px - x0
                        fy = py - y0
                        x1 = x0 + 1
                        y1 = y0 + 1
                        vx0 = 0 <= x0 < w
                        vx1 = 0 <= x1 < w
                        vy0 = 0 <= y0 < h
                        vy1 = 0 <= y1 < h
                        dpx = 0.0
                        dpy = 0.0
                        for ch in range(c):
                            v00 = images[b, ch, y0, x0] if (vy0 and vx0) else 0.0
                            v01 = images[b, ch, y0, x1] if (vy0 and vx1) else 0.0
                            v10 = images[b, ch, y1, x0] if (vy1 and vx0) else 0.0
                            v11 = images[b, ch, y1, x1] if (vy1 and vx1) else 0.0
                            gv = gy[b, k, ch, oy, ox]
                            dpx += gv * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy)
                            dpy += gv * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx)
                        ggrid[b, k, oy, ox, 0] = dpx * 0.5 * (w - 1)
                        ggrid[b, k, oy, ox, 1] = dpy * 0.5 * (h - 1)
    return ggrid
