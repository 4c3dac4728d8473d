"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``PDELATENT_NUMBA`` is not set to ``0``.  Both paths are always
importable (``NUMPY_KERNELS`` / ``NUMBA_KERNELS``) so they can be
benchmarked and cross-checked against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("PDELATENT_NUMBA", "1") != "0"


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------

def _im2col_np(xp, kh, kw, stride, ho, wo):
    # xp: (B, C, Hp, Wp) already padded -> (B, ho, wo, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    b, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho, wo, c * kh * kw)


def _col2im_np(cols, c, hp, wp, kh, kw, stride):
    # adjoint of _im2col_np
    b, ho, wo, _ = cols.shape
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _periodic_distance_np(mask):
    h, w = mask.shape
    obs = np.argwhere(mask > 0)
    if len(obs) == 0:
        return np.full((h, w), float(np.hypot(h, w)))
    ii = np.arange(h)[None, :, None]
    jj = np.arange(w)[None, None, :]
    di = np.abs(ii - obs[:, 0, None, None])
    dj = np.abs(jj - obs[:, 1, None, None])
    di = np.minimum(di, h - di)
    dj = np.minimum(dj, w - dj)
    return np.sqrt((di * di + dj * dj).min(axis=0).astype(float))


def _crps_np(members, truth):
    # members (S, d), truth (d,) -> pointwise CRPS (d,)
    s = members.shape[0]
    skill = np.abs(members - truth[None]).mean(axis=0)
    spread = np.abs(members[:, None, :] - members[None, :, :]).sum(axis=(0, 1))
    return skill - spread / (2.0 * s * (s - 1))


def _neumann_laplacian_np(x):
    # five-point stencil, reflecting ghost cells, unit spacing
    xp = np.pad(x, 1, mode="edge")
    return xp[:-2, 1:-1] + xp[2:, 1:-1] + xp[1:-1, :-2] + xp[1:-1, 2:] - 4.0 * x


def _box_smooth_np(x, passes):
    # 3x3 periodic moving average over the last two axes
    for _ in range(passes):
        acc = np.zeros_like(x)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                acc += np.roll(np.roll(x, di, axis=-2), dj, axis=-1)
        x = acc / 9.0
    return x


NUMPY_KERNELS = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "periodic_distance": _periodic_distance_np,
    "crps_pointwise": _crps_np,
    "neumann_laplacian": _neumann_laplacian_np,
    "box_smooth": _box_smooth_np,
}


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

def _build_numba_kernels():
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def im2col(xp, kh, kw, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        out = np.empty((b, ho, wo, c * kh * kw))
        for n in range(b):
            for oi in range(ho):
                for oj in range(wo):
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[n, oi, oj, col] = xp[n, ch, oi * stride + i, oj * stride + j]
                                col += 1
        return out

    @njit
    def col2im(cols, c, hp, wp, kh, kw, stride):
        b, ho, wo = cols.shape[0], cols.shape[1], cols.shape[2]
        out = np.zeros((b, c, hp, wp))
        for n in range(b):
            for oi in range(ho):
                for oj in range(wo):
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[n, ch, oi * stride + i, oj * stride + j] += cols[n, oi, oj, col]
                                col += 1
        return out

    @njit
    def periodic_distance(mask):
        h, w = mask.shape
        out = np.empty((h, w))
        nobs = 0
        for i in range(h):
            for j in range(w):
                if mask[i, j] > 0:
                    nobs += 1
        if nobs == 0:
            out[:, :] = np.sqrt(float(h * h + w * w))
            return out
        oi = np.empty(nobs, dtype=np.int64)
        oj = np.empty(nobs, dtype=np.int64)
        k = 0
        for i in range(h):
            for j in range(w):
                if mask[i, j] > 0:
                    oi[k] = i
                    oj[k] = j
                    k += 1
        for i in range(h):
            for j in range(w):
                best = np.inf
                for k in range(nobs):
                    di = abs(i - oi[k])
                    dj = abs(j - oj[k])
                    di = min(di, h - di)
                    dj = min(dj, w - dj)
                    d2 = di * di + dj * dj
                    if d2 < best:
                        best = d2
                out[i, j] = np.sqrt(best)
        return out

    @njit
    def crps_pointwise(members, truth):
        s, d = members.shape
        out = np.empty(d)
        for j in range(d):
            skill = 0.0
            for a in range(s):
                skill += abs(members[a, j] - truth[j])
            spread = 0.0
            for a in range(s):
                for b in range(a + 1, s):
                    spread += abs(members[a, j] - members[b, j])
            # each unordered pair appears twice in the s != t sum
            out[j] = skill / s - 2.0 * spread / (2.0 * s * (s - 1))
        return out

    @njit
    def neumann_laplacian(x):
        h, w = x.shape
        out = np.empty((h, w))
        for i in range(h):
            for j in range(w):
                c = x[i, j]
                up = x[i - 1, j] if i > 0 else c
                dn = x[i + 1, j] if i < h - 1 else c
                lf = x[i, j - 1] if j > 0 else c
                rt = x[i, j + 1] if j < w - 1 else c
                out[i, j] = up + dn + lf + rt - 4.0 * c
        return out

    @njit
    def _box_once(x):
        n, h, w = x.shape
        out = np.empty_like(x)
        for m in range(n):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            acc += x[m, (i + di) % h, (j + dj) % w]
                    out[m, i, j] = acc / 9.0
        return out

    def box_smooth(x, passes):
        shape = x.shape
        y = np.ascontiguousarray(x, dtype=np.float64).reshape((-1,) + shape[-2:])
        for _ in range(passes):
            y = _box_once(y)
        return y.reshape(shape)

    return {
        "im2col": im2col,
        "col2im": col2im,
        "periodic_distance": periodic_distance,
        "crps_pointwise": crps_pointwise,
        "neumann_laplacian": neumann_laplacian,
        "box_smooth": box_smooth,
    }


NUMBA_KERNELS = _build_numba_kernels() if numba is not None else dict(NUMPY_KERNELS)
KERNELS = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def im2col(xp, kh, kw, stride, ho, wo):
    return KERNELS["im2col"](np.ascontiguousarray(xp, dtype=np.float64), kh, kw, stride, ho, wo)


def col2im(cols, c, hp, wp, kh, kw, stride):
    return KERNELS["col2im"](np.ascontiguousarray(cols, dtype=np.float64), c, hp, wp, kh, kw, stride)


def periodic_distance(mask):
    return KERNELS["periodic_distance"](np.ascontiguousarray(mask, dtype=np.float64))


def crps_pointwise(members, truth):
    return KERNELS["crps_pointwise"](np.ascontiguousarray(members, dtype=np.float64),
                                     np.ascontiguousarray(truth, dtype=np.float64))


def neumann_laplacian(x):
    return KERNELS["neumann_laplacian"](np.ascontiguousarray(x, dtype=np.float64))


def box_smooth(x, passes):
    return KERNELS["box_smooth"](np.asarray(x, dtype=np.float64), int(passes))
