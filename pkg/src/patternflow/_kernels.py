"""Numba kernels for the per-pixel inner loops (flow accumulation and ZNCC search)."""

from __future__ import annotations

import numpy as np
from numba import njit

# --- Lucas-Kanade -------------------------------------------------------------


@njit(cache=True)
def _sample_row(row, x):
    w = row.shape[0]
    if x <= 0.0:
        return row[0]
    if x >= w - 1:
        return row[w - 1]
    i = int(x)
    f = x - i
    return row[i] * (1.0 - f) + row[i + 1] * f


@njit(cache=True)
def lk_block_terms(cur, prev, u_red, k, mask):
    """Per-block sums of Ix^2, Ix*(prev(x-u) - cur) and (prev(x-u) - cur)^2.

    ``u_red`` holds one flow value (full-res px) per k x k block; ``Ix`` is
    the central difference of the mean of ``cur`` and the warped ``prev``.
    Only pixels where ``mask`` is set contribute.
    """
    h, w = cur.shape
    hr, wr = u_red.shape
    e = np.zeros((hr, wr))
    n = np.zeros((hr, wr))
    r = np.zeros((hr, wr))
    warped = np.empty(w)
    avg = np.empty(w)
    for y in range(h):
        by = y // k
        prow = prev[y]
        crow = cur[y]
        urow = u_red[by]
        for bx in range(wr):
            x0 = bx * k
            s = urow[bx]
            i = int(np.floor(s))
            f = s - i
            # prev(x - s) = (1 - g) * prev[x - i - 1] + g * prev[x - i] with g = 1 - f
            if x0 - i - 1 >= 0 and x0 + k - i <= w:
                for x in range(x0, x0 + k):
                    warped[x] = prow[x - i - 1] * f + prow[x - i] * (1.0 - f)
            else:
                for x in range(x0, x0 + k):
                    warped[x] = _sample_row(prow, x - s)
        for x in range(w):
            avg[x] = 0.5 * (crow[x] + warped[x])
        mrow = mask[y]
        erow = e[by]
        nrow = n[by]
        rrow = r[by]
        for bx in range(wr):
            se = 0.0
            sn = 0.0
            sr = 0.0
            for x in range(bx * k, bx * k + k):
                if not mrow[x]:
                    continue
                if x == 0:
                    ix = avg[1] - avg[0]
                elif x == w - 1:
                    ix = avg[w - 1] - avg[w - 2]
                else:
                    ix = 0.5 * (avg[x + 1] - avg[x - 1])
                diff = warped[x] - crow[x]
                se += ix * ix
                sn += ix * diff
                sr += diff * diff
            erow[bx] += se
            nrow[bx] += sn
            rrow[bx] += sr
    return e, n, r


# --- ZNCC correlation search -------------------------------------------------------


@njit(cache=True)
def _zncc_at(fpad, fmean, fstd, ppad, pmean, pstd, y, x, d, half):
    """ZNCC of the frame patch at (x, y) against the pattern patch at (x - d, y).

    Padded arrays carry ``half`` extra rows/cols (frame) or rows (pattern);
    returns -2.0 when the pattern patch leaves the pattern horizontally.
    """
    xp = x - d
    wp = pstd.shape[1]
    if xp < half or xp > wp - 1 - half:
        return -2.0
    sf = fstd[y, x]
    sp = pstd[y, xp]
    if sf <= 1e-9 or sp <= 1e-9:
        return 0.0
    acc = 0.0
    for j in range(2 * half + 1):
        frow = fpad[y + j]
        prow = ppad[y + j]
        for i in range(2 * half + 1):
            acc += frow[x + i] * prow[xp - half + i]
    n = (2 * half + 1) ** 2
    return (acc / n - fmean[y, x] * pmean[y, xp]) / (sf * sp)


@njit(cache=True)
def zncc_scores_direct(fpad, fmean, fstd, ppad, pmean, pstd, ys, xs, dlist, half):
    """Scores for integer disparities ``dlist`` at the listed pixels (reference route)."""
    out = np.empty((ys.shape[0], dlist.shape[0]))
    for m in range(ys.shape[0]):
        for c in range(dlist.shape[0]):
            out[m, c] = _zncc_at(fpad, fmean, fstd, ppad, pmean, pstd, ys[m], xs[m], dlist[c], half)
    return out


_INACTIVE = -(1 << 40)


@njit(cache=True)
def _inverse(std):
    out = np.zeros_like(std)
    for i in range(std.shape[0]):
        for j in range(std.shape[1]):
            if std[i, j] > 1e-9:
                out[i, j] = 1.0 / std[i, j]
    return out


@njit(cache=True)
def _fill_tile(fpad, fmean, fisd, ppad, pmean, pisd, center, active, r, d_lo, d_hi, half, ty, tx, th, tw, prod, cen, buf):
    """Fill ``buf[y - ty, x - tx, o + r]`` with scores for one tile; untouched entries stay -2.

    ``fisd``/``pisd`` are inverse window standard deviations (0 where flat,
    which yields a score of 0).
    """
    nc = 2 * r + 1
    lo = 1 << 30
    hi = -(1 << 30)
    for yy in range(th):
        for xx in range(tw):
            for c in range(nc):
                buf[yy, xx, c] = -2.0
            if active[ty + yy, tx + xx]:
                c = center[ty + yy, tx + xx]
                cen[yy, xx] = c
                if c < lo:
                    lo = c
                if c > hi:
                    hi = c
            else:
                cen[yy, xx] = _INACTIVE
    if hi < lo:
        return False
    lo = max(lo - r, d_lo)
    hi = min(hi + r, d_hi)
    inv_n = 1.0 / (2 * half + 1) ** 2
    wp = pisd.shape[1]
    span = 2 * half + 1
    for d in range(lo, hi + 1):
        # integral image of frame * shifted pattern over the tile plus margin;
        # padded frame col xf pairs with pattern col xf - d - half
        xa = max(0, d + half - tx)
        xb = min(tw + 2 * half, wp + d + half - tx)
        for yy in range(th + 2 * half):
            frow = fpad[ty + yy]
            prow = ppad[ty + yy]
            above = prod[yy]
            here = prod[yy + 1]
            run = 0.0
            for xx in range(tw + 2 * half):
                if xx >= xa and xx < xb:
                    run += frow[tx + xx] * prow[tx + xx - d - half]
                here[xx + 1] = above[xx + 1] + run
        # pixels whose pattern patch stays inside the pattern
        x_first = max(tx, d + half)
        x_last = min(tx + tw, wp - half + d)
        for y in range(ty, ty + th):
            y0 = y - ty
            top = prod[y0]
            bottom = prod[y0 + span]
            fm = fmean[y]
            fi = fisd[y]
            pm = pmean[y]
            pi = pisd[y]
            for x in range(x_first, x_last):
                x0 = x - tx
                o = d - cen[y0, x0] + r
                if o < 0 or o >= nc:
                    continue
                xp = x - d
                acc = bottom[x0 + span] - top[x0 + span] - bottom[x0] + top[x0]
                buf[y0, x0, o] = (acc * inv_n - fm[x] * pm[xp]) * fi[x] * pi[xp]
    return True


@njit(cache=True)
def zncc_band_volume(fpad, fmean, fstd, ppad, pmean, pstd, center, active, r, d_lo, d_hi, half, tile):
    """Scores for ``d = center + o``, ``o = -r..r``, at every active pixel; -2 where undefined.

    Tile by tile, the cross term for each integer disparity needed inside the
    tile is box-summed from an integral image of the elementwise product, so
    a (pixel, disparity) pair costs O(1) instead of O(patch^2).
    """
    h, w = center.shape
    nc = 2 * r + 1
    scores = np.full((h, w, nc), -2.0)
    prod = np.zeros((tile + 2 * half + 1, tile + 2 * half + 1))
    cen = np.empty((tile, tile), np.int64)
    buf = np.empty((tile, tile, nc))
    fisd = _inverse(fstd)
    pisd = _inverse(pstd)
    for ty in range(0, h, tile):
        for tx in range(0, w, tile):
            th = min(tile, h - ty)
            tw = min(tile, w - tx)
            if _fill_tile(fpad, fmean, fisd, ppad, pmean, pisd, center, active, r, d_lo, d_hi,
                          half, ty, tx, th, tw, prod, cen, buf):
                scores[ty:ty + th, tx:tx + tw, :] = buf[:th, :tw, :]
    return scores


@njit(cache=True)
def reduce_scores(s, r):
    """Peak of one score vector: (index, peak, left, right, second).

    Ties go to the index closest to the center ``r``; ``second`` is the best
    score at least two steps away from the peak. Missing neighbors are -2,
    and a vector without any score reports the center.
    """
    nc = s.shape[0]
    best = -1
    peak = -2.0
    for c in range(nc):
        v = s[c]
        if v > peak or (v == peak and best >= 0 and abs(c - r) < abs(best - r)):
            peak = v
            best = c
    if best < 0:
        # nothing scored: report the center with empty neighbors
        return r, -2.0, -2.0, -2.0, -2.0
    left = s[best - 1] if best > 0 else -2.0
    right = s[best + 1] if best < nc - 1 else -2.0
    second = -2.0
    for c in range(nc):
        if abs(c - best) >= 2 and s[c] > second:
            second = s[c]
    return best, peak, left, right, second


@njit(cache=True)
def _uniform_tile(fpad, fmean, fisd, ppad, pmean, pisd, c, active, r, d_lo, d_hi, half,
                  ty, tx, th, tw, prod, plane, best, pk, lf, rt, sc,
                  off, peak, left, right, second):
    """Scores for a tile whose active pixels all share the center ``c``.

    Every pixel then needs the same disparities, so scores go to one plane
    per offset (``plane[o, yy, xx]``) in contiguous rows and the peak search
    runs along rows as well. Results are written straight into the outputs.
    """
    nc = 2 * r + 1
    span = 2 * half + 1
    inv_n = 1.0 / (span * span)
    wp = pisd.shape[1]
    for o in range(nc):
        d = c + o - r
        pl = plane[o]
        for yy in range(th):
            for xx in range(tw):
                pl[yy, xx] = -2.0
        if d < d_lo or d > d_hi:
            continue
        xa = max(0, d + half - tx)
        xb = min(tw + 2 * half, wp + d + half - tx)
        if xa >= xb:
            continue
        for yy in range(th + 2 * half):
            frow = fpad[ty + yy]
            prow = ppad[ty + yy]
            above = prod[yy]
            here = prod[yy + 1]
            run = 0.0
            for xx in range(xa):
                here[xx + 1] = above[xx + 1]
            for xx in range(xa, xb):
                run += frow[tx + xx] * prow[tx + xx - d - half]
                here[xx + 1] = above[xx + 1] + run
            for xx in range(xb, tw + 2 * half):
                here[xx + 1] = above[xx + 1] + run
        x0a = max(tx, d + half) - tx
        x0b = min(tx + tw, wp - half + d) - tx
        for yy in range(th):
            y = ty + yy
            top = prod[yy]
            bottom = prod[yy + span]
            fm = fmean[y]
            fi = fisd[y]
            pm = pmean[y]
            pi = pisd[y]
            prow_ = pl[yy]
            for x0 in range(x0a, x0b):
                x = tx + x0
                xp = x - d
                acc = bottom[x0 + span] - top[x0 + span] - bottom[x0] + top[x0]
                prow_[x0] = (acc * inv_n - fm[x] * pm[xp]) * fi[x] * pi[xp]
    # reduction, vectorized along rows; visiting o outward from the center
    # makes ties go to the index closest to r (left side first)
    for yy in range(th):
        for xx in range(tw):
            best[xx] = r
            pk[xx] = plane[r, yy, xx]
        for k in range(1, r + 1):
            for o in (r - k, r + k):
                pl = plane[o, yy]
                for xx in range(tw):
                    v = pl[xx]
                    if v > pk[xx]:
                        pk[xx] = v
                        best[xx] = o
        for xx in range(tw):
            b = best[xx]
            lf[xx] = plane[b - 1, yy, xx] if b > 0 else -2.0
            rt[xx] = plane[b + 1, yy, xx] if b < nc - 1 else -2.0
            sc[xx] = -2.0
        for o in range(nc):
            pl = plane[o, yy]
            for xx in range(tw):
                v = pl[xx]
                if (o - best[xx] >= 2 or best[xx] - o >= 2) and v > sc[xx]:
                    sc[xx] = v
        y = ty + yy
        for xx in range(tw):
            x = tx + xx
            if not active[y, x]:
                continue
            off[y, x] = best[xx] - r
            peak[y, x] = pk[xx]
            left[y, x] = lf[xx]
            right[y, x] = rt[xx]
            second[y, x] = sc[xx]


@njit(cache=True)
def zncc_band_search(fpad, fmean, fstd, ppad, pmean, pstd, center, active, r, d_lo, d_hi, half, tile):
    """Like :func:`zncc_band_volume` but only keeps the per-pixel peak summary.

    Returns ``(offset, peak, left, right, second)`` arrays; ``offset`` is the
    winning ``d - center`` (0 where inactive).
    """
    h, w = center.shape
    nc = 2 * r + 1
    off = np.zeros((h, w), np.int64)
    peak = np.full((h, w), -2.0)
    left = np.full((h, w), -2.0)
    right = np.full((h, w), -2.0)
    second = np.full((h, w), -2.0)
    prod = np.zeros((tile + 2 * half + 1, tile + 2 * half + 1))
    cen = np.empty((tile, tile), np.int64)
    buf = np.empty((tile, tile, nc))
    plane = np.empty((nc, tile, tile))
    best = np.empty(tile, np.int64)
    pk = np.empty(tile)
    lf = np.empty(tile)
    rt = np.empty(tile)
    sc = np.empty(tile)
    fisd = _inverse(fstd)
    pisd = _inverse(pstd)
    for ty in range(0, h, tile):
        for tx in range(0, w, tile):
            th = min(tile, h - ty)
            tw = min(tile, w - tx)
            c0 = 0
            uniform = True
            seen = False
            for yy in range(th):
                for xx in range(tw):
                    if active[ty + yy, tx + xx]:
                        c = center[ty + yy, tx + xx]
                        if not seen:
                            c0 = c
                            seen = True
                        elif c != c0:
                            uniform = False
            if not seen:
                continue
            if uniform:
                _uniform_tile(fpad, fmean, fisd, ppad, pmean, pisd, c0, active, r, d_lo, d_hi, half,
                              ty, tx, th, tw, prod, plane, best, pk, lf, rt, sc,
                              off, peak, left, right, second)
                continue
            _fill_tile(fpad, fmean, fisd, ppad, pmean, pisd, center, active, r, d_lo, d_hi,
                       half, ty, tx, th, tw, prod, cen, buf)
            for yy in range(th):
                for xx in range(tw):
                    y = ty + yy
                    x = tx + xx
                    if not active[y, x]:
                        continue
                    b, p_, l_, r_, s_ = reduce_scores(buf[yy, xx], r)
                    off[y, x] = b - r
                    peak[y, x] = p_
                    left[y, x] = l_
                    right[y, x] = r_
                    second[y, x] = s_
    return off, peak, left, right, second


@njit(cache=True)
def pick_block_candidates(fpad, fmean, fstd, ppad, pmean, pstd, dblk, vblk, k, half):
    """Per-pixel choice among the disparities of the 2 x 2 nearest block centers.

    Each full-resolution pixel scores the candidate disparities of the blocks
    around it and keeps the best; returns ``(d, score, block_y, block_x)``
    with score -2 where no neighbor is valid.
    """
    h, w = fmean.shape
    hr, wr = dblk.shape
    d = np.zeros((h, w), np.int64)
    score = np.full((h, w), -2.0)
    src_y = np.zeros((h, w), np.int64)
    src_x = np.zeros((h, w), np.int64)
    for y in range(h):
        # blocks whose centers bracket y
        by0 = (y - k // 2) // k if y >= k // 2 else -1
        for x in range(w):
            bx0 = (x - k // 2) // k if x >= k // 2 else -1
            for dy in range(2):
                cy = min(max(by0 + dy, 0), hr - 1)
                for dx in range(2):
                    cx = min(max(bx0 + dx, 0), wr - 1)
                    if not vblk[cy, cx]:
                        continue
                    cand = dblk[cy, cx]
                    s = _zncc_at(fpad, fmean, fstd, ppad, pmean, pstd, y, x, cand, half)
                    if s > score[y, x]:
                        score[y, x] = s
                        d[y, x] = cand
                        src_y[y, x] = cy
                        src_x[y, x] = cx
    return d, score, src_y, src_x


# --- flow upsampling and history warp -------------------------------------------------


@njit(cache=True)
def _axis_taps(n, k):
    """Bilinear taps for upsampling ``n`` block centers by ``k`` (edges clamp)."""
    m = n * k
    i0 = np.empty(m, np.int64)
    i1 = np.empty(m, np.int64)
    f = np.empty(m)
    for j in range(m):
        pos = (j + 0.5) / k - 0.5
        fl = np.floor(pos)
        a = int(fl)
        frac = pos - fl
        if pos < 0:
            a = 0
            frac = 0.0
        if a > n - 1:
            a = n - 1
        b = min(a + 1, n - 1)
        i0[j] = a
        i1[j] = b
        f[j] = frac
    return i0, i1, f


@njit(cache=True)
def upsample_flow(u_red, valid_red, k):
    """Normalized-convolution bilinear upsampling of a block flow field.

    Returns ``(u, valid)`` at full resolution; ``valid`` where at least half
    the interpolation weight comes from valid blocks.
    """
    hr, wr = u_red.shape
    y0, y1, fy = _axis_taps(hr, k)
    x0, x1, fx = _axis_taps(wr, k)
    h, w = hr * k, wr * k
    u = np.zeros((h, w))
    valid = np.zeros((h, w), np.bool_)
    for y in range(h):
        a, b, gy = y0[y], y1[y], fy[y]
        for x in range(w):
            c, d, gx = x0[x], x1[x], fx[x]
            wts = 0.0
            num = 0.0
            t = (1 - gy) * (1 - gx)
            if valid_red[a, c]:
                wts += t
                num += t * u_red[a, c]
            t = (1 - gy) * gx
            if valid_red[a, d]:
                wts += t
                num += t * u_red[a, d]
            t = gy * (1 - gx)
            if valid_red[b, c]:
                wts += t
                num += t * u_red[b, c]
            t = gy * gx
            if valid_red[b, d]:
                wts += t
                num += t * u_red[b, d]
            if wts > 0:
                u[y, x] = num / wts
            valid[y, x] = wts >= 0.5
    return u, valid


@njit(cache=True)
def warp_gather(d, valid, conf, u, fvalid, d_min, d_max, decay, edge_px):
    """``d(x - u) + u`` with confidence carried along; see ``warp_history``."""
    h, w = d.shape
    out_d = np.zeros((h, w))
    out_v = np.zeros((h, w), np.bool_)
    out_c = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if not fvalid[y, x]:
                continue
            src = x - u[y, x]
            if src < 0 or src > w - 1:
                continue
            x0 = min(int(src), w - 2)
            f = src - x0
            v0 = valid[y, x0]
            v1 = valid[y, x0 + 1]
            d0 = d[y, x0]
            d1 = d[y, x0 + 1]
            if v0 and v1 and abs(d1 - d0) <= edge_px:
                ds = d0 * (1 - f) + d1 * f
                cs = conf[y, x0] * (1 - f) + conf[y, x0 + 1] * f
            elif f >= 0.5:
                if not v1:
                    continue
                ds = d1
                cs = conf[y, x0 + 1]
            else:
                if not v0:
                    continue
                ds = d0
                cs = conf[y, x0]
            out_d[y, x] = min(max(ds + u[y, x], d_min), d_max)
            out_v[y, x] = True
            out_c[y, x] = decay * cs
    return out_d, out_v, out_c


# --- residual fusion -----------------------------------------------------------------


@njit(cache=True)
def fuse_residual(d_int, peak, left, right, second, active, prior_d, prior_conf,
                  ratio_floor, fuse_weight, agree_px, zncc_floor, d_min, d_max):
    """Per-pixel subpixel refinement and confidence blend with the prior.

    Same arithmetic as the array helpers in the estimator, fused into one pass.
    Returns ``(d, valid, conf)`` with zeros at invalid pixels.
    """
    h, w = peak.shape
    d_out = np.zeros((h, w))
    v_out = np.zeros((h, w), np.bool_)
    c_out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            pk = peak[y, x]
            if not active[y, x] or pk < zncc_floor:
                continue
            lf = left[y, x]
            rt = right[y, x]
            den = lf - 2.0 * pk + rt
            delta = 0.0
            if lf > -2 and rt > -2 and den < 0:
                delta = min(0.5, max(-0.5, 0.5 * (lf - rt) / den))
            d_new = d_int[y, x] + delta
            sc = second[y, x]
            if sc > 0:
                gate = min(1.0, max(0.0, (pk / sc - 1.0) / (ratio_floor - 1.0)))
            else:
                gate = 1.0
            c = min(1.0, max(0.0, pk)) * gate
            pc = prior_conf[y, x]
            pd = prior_d[y, x]
            z = (d_new - pd) / agree_px
            agree = np.exp(-0.5 * z * z)
            wp = fuse_weight * pc * agree
            den = c + wp
            d = (c * d_new + wp * pd) / den if den > 0 else d_new
            if d < d_min or d > d_max:
                continue
            conf = 1.0 - (1.0 - c) * (1.0 - wp)
            if pc > 0:
                conf *= agree
            d_out[y, x] = d
            v_out[y, x] = True
            c_out[y, x] = conf
    return d_out, v_out, c_out
