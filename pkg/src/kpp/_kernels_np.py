"""NumPy implementations of the hot kernels.

Fallback backend used when the compiled extension is unavailable (or forced
via ``KPP_BACKEND=numpy``).  Semantics must match ``_kernels.pyx`` exactly:
float64, zero padding, and the "corners map to +/-1" grid convention where a
normalized coordinate c maps to pixel (c + 1) / 2 * (size - 1).
"""

import numpy as np


def conv2d_forward(x, w, stride, pad):
    """Correlate x (N,Ci,H,W) with w (Co,Ci,kh,kw); zero padding, given stride."""
    n, ci, h, wid = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ValueError(f"conv2d channel mismatch: input {ci} vs kernel {ci2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} kernel {w.shape}")
    xp = x
    if pad:
        xp = np.zeros((n, ci, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + wid] = x
    y = np.zeros((n, co, ho, wo), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride]
            y += np.einsum("nchw,fc->nfhw", patch, w[:, :, u, v], optimize=True)
    return y


def conv2d_input_grad(gy, w, stride, pad, h, wid):
    """Gradient of conv2d_forward w.r.t. the input, for input size (h, wid)."""
    n, co, ho, wo = gy.shape
    co2, ci, kh, kw = w.shape
    gxp = np.zeros((n, ci, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            contrib = np.einsum("nfhw,fc->nchw", gy, w[:, :, u, v], optimize=True)
            gxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += contrib
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wid])
    return gxp


def conv2d_kernel_grad(gy, x, stride, pad, kh, kw):
    """Gradient of conv2d_forward w.r.t. the kernel (Co,Ci,kh,kw)."""
    n, ci, h, wid = x.shape
    _, co, ho, wo = gy.shape[0], gy.shape[1], gy.shape[2], gy.shape[3]
    xp = x
    if pad:
        xp = np.zeros((n, ci, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + wid] = x
    gw = np.zeros((co, ci, kh, kw), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride]
            gw[:, :, u, v] = np.einsum("nfhw,nchw->fc", gy, patch, optimize=True)
    return gw


def _grid_to_pixels(grid, h, w):
    px = (grid[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (grid[..., 1] + 1.0) * 0.5 * (h - 1)
    return px, py


def _corners(px, py, h, w):
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    vx0 = (x0 >= 0) & (x0 < w)
    vx1 = (x1 >= 0) & (x1 < w)
    vy0 = (y0 >= 0) & (y0 < h)
    vy1 = (y1 >= 0) & (y1 < h)
    cx0 = np.clip(x0, 0, w - 1)
    cx1 = np.clip(x1, 0, w - 1)
    cy0 = np.clip(y0, 0, h - 1)
    cy1 = np.clip(y1, 0, h - 1)
    return (cx0, cx1, cy0, cy1), (vx0, vx1, vy0, vy1), fx, fy


def bilinear_forward(images, grid):
    """Sample images (B,C,H,W) at grid (B,G,h,w,2) of normalized (x,y) coords.

    Returns (B,G,C,h,w).  Coordinates outside [-1, 1] read zeros.
    """
    b, c, h, w = images.shape
    bg, g, gh, gw, two = grid.shape
    px, py = _grid_to_pixels(grid, h, w)
    (cx0, cx1, cy0, cy1), (vx0, vx1, vy0, vy1), fx, fy = _corners(px, py, h, w)
    bidx = np.arange(b).reshape(b, 1, 1, 1)

    def gather(cy, cx, valid):
        vals = images[bidx, :, cy, cx]          # (B,G,h,w,C)
        return vals * valid[..., None]

    v00 = gather(cy0, cx0, vy0 & vx0)
    v01 = gather(cy0, cx1, vy0 & vx1)
    v10 = gather(cy1, cx0, vy1 & vx0)
    v11 = gather(cy1, cx1, vy1 & vx1)
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    return np.ascontiguousarray(np.moveaxis(out, -1, 2))


def bilinear_image_grad(gy, grid, h, w):
    """Gradient of bilinear_forward w.r.t. the images; gy is (B,G,C,h,w)."""
    b, g, c, gh, gw = gy.shape
    px, py = _grid_to_pixels(grid, h, w)
    (cx0, cx1, cy0, cy1), (vx0, vx1, vy0, vy1), fx, fy = _corners(px, py, h, w)
    gimg = np.zeros((b, c, h, w), dtype=np.float64)
    bidx = np.arange(b).reshape(b, 1, 1, 1, 1)
    cidx = np.arange(c).reshape(1, 1, c, 1, 1)
    for cy, cx, valid, wt in (
        (cy0, cx0, vy0 & vx0, (1 - fx) * (1 - fy)),
        (cy0, cx1, vy0 & vx1, fx * (1 - fy)),
        (cy1, cx0, vy1 & vx0, (1 - fx) * fy),
        (cy1, cx1, vy1 & vx1, fx * fy),
    ):
        contrib = gy * (wt * valid)[:, :, None]
        np.add.at(gimg, (bidx, cidx, cy[:, :, None], cx[:, :, None]), contrib)
    return gimg


def bilinear_grid_grad(gy, images, grid):
    """Gradient of bilinear_forward w.r.t. the normalized grid coordinates."""
    b, c, h, w = images.shape
    px, py = _grid_to_pixels(grid, h, w)
    (cx0, cx1, cy0, cy1), (vx0, vx1, vy0, vy1), fx, fy = _corners(px, py, h, w)
    bidx = np.arange(b).reshape(b, 1, 1, 1)

    def gather(cy, cx, valid):
        vals = images[bidx, :, cy, cx]
        return vals * valid[..., None]

    v00 = gather(cy0, cx0, vy0 & vx0)
    v01 = gather(cy0, cx1, vy0 & vx1)
    v10 = gather(cy1, cx0, vy1 & vx0)
    v11 = gather(cy1, cx1, vy1 & vx1)
    gyc = np.moveaxis(gy, 2, -1)                 # (B,G,h,w,C)
    # d out / d px and d out / d py, contracted with gy over channels
    dpx = np.einsum(
        "...c,...c->...",
        gyc,
        (v01 - v00) * (1 - fy)[..., None] + (v11 - v10) * fy[..., None],
        optimize=True,
    )
    dpy = np.einsum(
        "...c,...c->...",
        gyc,
        (v10 - v00) * (1 - fx)[..., None] + (v11 - v01) * fx[..., None],
        optimize=True,
    )
    ggrid = np.empty_like(grid)
    ggrid[..., 0] = dpx * 0.5 * (w - 1)
    ggrid[..., 1] = dpy * 0.5 * (h - 1)
    return ggrid
