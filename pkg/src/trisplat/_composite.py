"""Per-tile alpha compositing kernels (forward and reverse pass).

Every pixel walks its tile's depth-sorted splat list front to back:

    a_i = min(ALPHA_MAX, o_i * exp(power_i))
    w_i = a_i * T_i,  T_{i+1} = T_i * (1 - a_i)

and stops before the splat that would push T below T_MIN. The reverse pass
walks the same list back to front, reconstructing T_i from the stored final
transmittance.

Splat/pixel pairs with power below POWER_CUTOFF (kernel < 1e-13) are skipped
identically in both passes.
"""

import numba as nb
import numpy as np

POWER_CUTOFF = -30.0


@nb.njit(cache=True)
def _tile_buffer(tile_start, tile_end):
    longest = 1
    for t in range(tile_start.shape[0]):
        longest = max(longest, tile_end[t] - tile_start[t])
    return np.empty((longest, 10))


@nb.njit(cache=True)
def _gather(buf, means2d, conic, opac, rgb, depth, gauss_ids, s, e):
    """Copy one tile's splats into a contiguous (m, 10) buffer; returns m."""
    for k in range(e - s):
        gi = gauss_ids[s + k]
        buf[k, 0] = means2d[gi, 0]
        buf[k, 1] = means2d[gi, 1]
        buf[k, 2] = conic[gi, 0]
        buf[k, 3] = conic[gi, 1]
        buf[k, 4] = conic[gi, 2]
        buf[k, 5] = opac[gi]
        buf[k, 6] = rgb[gi, 0]
        buf[k, 7] = rgb[gi, 1]
        buf[k, 8] = rgb[gi, 2]
        buf[k, 9] = depth[gi]
    return e - s


@nb.njit(cache=True, fastmath=True, error_model="numpy")
def composite_forward(
    means2d, conic, opac, rgb, depth, gauss_ids, tile_start, tile_end,
    width, height, tile, tiles_x, alpha_max, t_min,
):
    out_rgb = np.zeros((height, width, 3))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    n_tiles = tile_start.shape[0]
    buf = _tile_buffer(tile_start, tile_end)
    for t in range(n_tiles):
        s, e = tile_start[t], tile_end[t]
        if e <= s:
            continue
        m = _gather(buf, means2d, conic, opac, rgb, depth, gauss_ids, s, e)
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for ly in range(tile):
            y = ty * tile + ly
            if y >= height:
                break
            py = y + 0.5
            for lx in range(tile):
                x = tx * tile + lx
                if x >= width:
                    break
                px = x + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                acc_d = 0.0
                last = 0
                for k in range(m):
                    dx = px - buf[k, 0]
                    dy = py - buf[k, 1]
                    power = -0.5 * (buf[k, 2] * dx * dx + buf[k, 4] * dy * dy) - buf[k, 3] * dx * dy
                    if power < POWER_CUTOFF:
                        continue
                    if power > 0.0:
                        power = 0.0
                    a = buf[k, 5] * np.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    test_t = T * (1.0 - a)
                    if test_t < t_min:
                        break
                    w = a * T
                    r += w * buf[k, 6]
                    g += w * buf[k, 7]
                    b += w * buf[k, 8]
                    acc_d += w * buf[k, 9]
                    T = test_t
                    last = k + 1
                out_rgb[y, x, 0] = r
                out_rgb[y, x, 1] = g
                out_rgb[y, x, 2] = b
                out_alpha[y, x] = 1.0 - T
                out_depth[y, x] = acc_d
                final_t[y, x] = T
                n_contrib[y, x] = last
    return out_rgb, out_alpha, out_depth, final_t, n_contrib


@nb.njit(cache=True, fastmath=True, error_model="numpy")
def composite_backward(
    means2d, conic, opac, rgb, depth, gauss_ids, tile_start, tile_end,
    width, height, tile, tiles_x, alpha_max, final_t, n_contrib,
    g_rgb, g_alpha, g_depth,
):
    n = means2d.shape[0]
    d_means = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_rgb = np.zeros((n, 3))
    d_depth = np.zeros(n)
    n_tiles = tile_start.shape[0]
    buf = _tile_buffer(tile_start, tile_end)
    acc = np.empty_like(buf)
    for t in range(n_tiles):
        s, e = tile_start[t], tile_end[t]
        if e <= s:
            continue
        m = _gather(buf, means2d, conic, opac, rgb, depth, gauss_ids, s, e)
        acc[:m] = 0.0
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for ly in range(tile):
            y = ty * tile + ly
            if y >= height:
                break
            py = y + 0.5
            for lx in range(tile):
                x = tx * tile + lx
                if x >= width:
                    break
                px = x + 0.5
                gr = g_rgb[y, x, 0]
                gg = g_rgb[y, x, 1]
                gb = g_rgb[y, x, 2]
                ga = g_alpha[y, x]
                gd = g_depth[y, x]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0 and gd == 0.0:
                    continue
                T = final_t[y, x]
                suffix = 0.0
                for k in range(n_contrib[y, x] - 1, -1, -1):
                    dx = px - buf[k, 0]
                    dy = py - buf[k, 1]
                    c0 = buf[k, 2]
                    c1 = buf[k, 3]
                    c2 = buf[k, 4]
                    power = -0.5 * (c0 * dx * dx + c2 * dy * dy) - c1 * dx * dy
                    if power < POWER_CUTOFF:
                        continue
                    clamped_power = power > 0.0
                    if clamped_power:
                        power = 0.0
                    kern = np.exp(power)
                    a = buf[k, 5] * kern
                    clamped_alpha = a > alpha_max
                    if clamped_alpha:
                        a = alpha_max
                    T = T / (1.0 - a)
                    w = a * T
                    gf = gr * buf[k, 6] + gg * buf[k, 7] + gb * buf[k, 8] + ga + gd * buf[k, 9]
                    acc[k, 6] += w * gr
                    acc[k, 7] += w * gg
                    acc[k, 8] += w * gb
                    acc[k, 9] += w * gd
                    d_a = T * gf - suffix / (1.0 - a)
                    suffix += w * gf
                    if clamped_alpha:
                        continue
                    acc[k, 5] += d_a * kern
                    if clamped_power:
                        continue
                    d_power = d_a * a
                    acc[k, 2] += -0.5 * dx * dx * d_power
                    acc[k, 3] += -dx * dy * d_power
                    acc[k, 4] += -0.5 * dy * dy * d_power
                    acc[k, 0] += (c0 * dx + c1 * dy) * d_power
                    acc[k, 1] += (c2 * dy + c1 * dx) * d_power
        for k in range(m):
            gi = gauss_ids[s + k]
            d_means[gi, 0] += acc[k, 0]
            d_means[gi, 1] += acc[k, 1]
            d_conic[gi, 0] += acc[k, 2]
            d_conic[gi, 1] += acc[k, 3]
            d_conic[gi, 2] += acc[k, 4]
            d_opac[gi] += acc[k, 5]
            d_rgb[gi, 0] += acc[k, 6]
            d_rgb[gi, 1] += acc[k, 7]
            d_rgb[gi, 2] += acc[k, 8]
            d_depth[gi] += acc[k, 9]
    return d_means, d_conic, d_opac, d_rgb, d_depth
