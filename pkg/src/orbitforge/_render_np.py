"""Pure-NumPy ray-marching kernels (fallback backend).

Vectorized over rays and samples; mirrors the compiled kernel in
``_render_cy`` operation for operation.  Both backends are deterministic;
they are not required to agree bitwise with each other.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_C1 = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xBF58476D1CE4E5B9)
_C3 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


def hash01(pixel, sample, seed):
    """Deterministic stratification jitter in [0, 1) from integer keys."""
    pixel = np.asarray(pixel, dtype=np.uint64)
    sample = np.asarray(sample, dtype=np.uint64)
    h = pixel * _C1 + sample * _C2 + np.uint64(seed) * _C3
    h ^= h >> np.uint64(30)
    h *= _C2
    h ^= h >> np.uint64(27)
    h *= _C3
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * _INV53


def _interp(values, pos):
    """Trilinear interpolation at (m, 3) world positions, clamped."""
    n = values.shape[0]
    g = np.clip((pos + 0.5) * (n - 1), 0.0, n - 1 - 1e-9)
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    if values.ndim == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]
    out = 0.0
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dz, wz in ((0, 1 - fz), (1, fz)):
                out = out + values[x0 + dx, y0 + dy, z0 + dz] * (wx * wy * wz)
    return out


def _table_coords(ltable_shape, normals):
    nt, nph = ltable_shape
    nz = np.clip(normals[..., 2], -1.0, 1.0)
    theta = np.arccos(nz)
    phi = np.mod(np.arctan2(normals[..., 1], normals[..., 0]), 2.0 * np.pi)
    r = np.clip(theta / np.pi * nt - 0.5, 0.0, nt - 1.0)
    c = phi / (2.0 * np.pi) * nph - 0.5
    r0 = np.floor(r).astype(np.int64)
    r1 = np.minimum(r0 + 1, nt - 1)
    fr = r - r0
    cf = np.floor(c)
    c0 = np.mod(cf.astype(np.int64), nph)
    c1 = np.mod(c0 + 1, nph)
    fc = c - cf
    return r0, r1, fr, c0, c1, fc


def table_lookup(ltable, normals):
    """Bilinear lat-long lookup of irradiance for unit directions."""
    r0, r1, fr, c0, c1, fc = _table_coords(ltable.shape, normals)
    return (
        ltable[r0, c0] * (1 - fr) * (1 - fc)
        + ltable[r0, c1] * (1 - fr) * fc
        + ltable[r1, c0] * fr * (1 - fc)
        + ltable[r1, c1] * fr * fc
    )


def table_scatter(shape, normals, weights):
    """Adjoint of table_lookup: accumulate weights into the 4 bins."""
    nt, nph = shape
    r0, r1, fr, c0, c1, fc = _table_coords(shape, normals)
    out = np.zeros(nt * nph)
    w = np.asarray(weights, dtype=np.float64)
    for rr, cc, ww in (
        (r0, c0, (1 - fr) * (1 - fc)),
        (r0, c1, (1 - fr) * fc),
        (r1, c0, fr * (1 - fc)),
        (r1, c1, fr * fc),
    ):
        out += np.bincount(
            (rr * nph + cc).ravel(), weights=(w * ww).ravel(), minlength=nt * nph
        )
    return out.reshape(nt, nph)


def _sample_points(origin, dirs_flat, pix_flat, t0, t1, n_samples, jitter_seed):
    n_rays = dirs_flat.shape[0]
    dt = (t1 - t0) / n_samples
    j = np.arange(n_samples, dtype=np.uint64)[None, :]
    xi = hash01(pix_flat[:, None].astype(np.uint64), j, jitter_seed)
    t = t0[:, None] + (np.arange(n_samples)[None, :] + xi) * dt[:, None]
    pos = origin[None, None, :] + t[:, :, None] * dirs_flat[:, None, :]
    return t, dt, pos


def _sample_fields(grid_field, albedo, grad_nodes, kind, alpha, beta, grad_sign, pos):
    flat = pos.reshape(-1, 3)
    f = _interp(grid_field, flat)
    if kind == 1:
        dens = alpha * expit(-f / beta)
    else:
        dens = f
    alb = _interp(albedo, flat)
    gvec = _interp(grad_nodes, flat)
    norms = np.linalg.norm(gvec, axis=-1)
    safe = np.maximum(norms, 1e-20)
    normals = grad_sign * gvec / safe[:, None]
    degenerate = norms < 1e-12
    if np.any(degenerate):
        normals[degenerate] = (0.0, 0.0, 1.0)
    shape = pos.shape[:2]
    return (
        dens.reshape(shape),
        alb.reshape(shape + (3,)),
        normals.reshape(shape + (3,)),
    )


def forward(
    field,
    albedo,
    kind,
    alpha,
    beta,
    grad_nodes,
    grad_sign,
    origin,
    dirs,
    hit,
    t0,
    t1,
    n_samples,
    jitter_seed,
    background,
    ltable,
    normals_override=None,
    want_sample_normals=False,
):
    height, width = dirs.shape[:2]
    rgb = np.tile(np.asarray(background, dtype=np.float64), (height, width, 1))
    mask = np.zeros((height, width))
    depth_acc = np.zeros((height, width))
    illum_acc = np.zeros((height, width))
    sample_normals = (
        np.zeros((height, width, n_samples, 3)) if want_sample_normals else None
    )
    ridx = np.flatnonzero(hit.ravel())
    if ridx.size == 0:
        return rgb, mask, depth_acc, illum_acc, sample_normals
    dirs_flat = dirs.reshape(-1, 3)[ridx]
    t, dt, pos = _sample_points(
        origin, dirs_flat, ridx, t0.ravel()[ridx], t1.ravel()[ridx], n_samples, jitter_seed
    )
    dens, alb, normals = _sample_fields(
        field, albedo, grad_nodes, kind, alpha, beta, grad_sign, pos
    )
    if normals_override is not None:
        normals = normals_override.reshape(-1, n_samples, 3)[ridx]
    a = -np.expm1(-dens * dt[:, None])
    trans = np.cumprod(1.0 - a, axis=1)
    t_exc = np.concatenate([np.ones((a.shape[0], 1)), trans[:, :-1]], axis=1)
    w = t_exc * a
    light = table_lookup(ltable, normals)
    rgb_rays = np.einsum("rs,rsc->rc", w * light, alb)
    rgb_rays += trans[:, -1:] * np.asarray(background, dtype=np.float64)[None, :]
    rgb.reshape(-1, 3)[ridx] = rgb_rays
    mask.ravel()[ridx] = w.sum(axis=1)
    depth_acc.ravel()[ridx] = (w * t).sum(axis=1)
    illum_acc.ravel()[ridx] = (w * light).sum(axis=1)
    if want_sample_normals:
        sample_normals.reshape(-1, n_samples, 3)[ridx] = normals
    return rgb, mask, depth_acc, illum_acc, sample_normals


def backward(
    field,
    albedo,
    kind,
    alpha,
    beta,
    grad_nodes,
    grad_sign,
    origin,
    dirs,
    hit,
    t0,
    t1,
    n_samples,
    jitter_seed,
    background,
    ltable,
    normals_override,
    g_rgb,
    g_w_const,
    g_w_t,
    g_w_light,
):
    """Reverse-mode derivatives of the compositing chain.

    Per-sample upstream on the accumulation weight w_j is
    dot(g_rgb, albedo_j) * L_j + g_w_const + g_w_t * t_j + g_w_light * L_j;
    the final-transmittance background term is handled via the suffix sum.
    Shading normals are treated as constants (stop-gradient), so no
    derivative flows through ``grad_nodes``.
    """
    n = field.shape[0]
    nt, nph = ltable.shape
    g_field = np.zeros((n, n, n))
    g_albedo = np.zeros((n, n, n, 3))
    g_table = np.zeros((nt, nph))
    ridx = np.flatnonzero(hit.ravel())
    if ridx.size == 0:
        return g_field, g_albedo, g_table
    dirs_flat = dirs.reshape(-1, 3)[ridx]
    t, dt, pos = _sample_points(
        origin, dirs_flat, ridx, t0.ravel()[ridx], t1.ravel()[ridx], n_samples, jitter_seed
    )
    dens, alb, normals = _sample_fields(
        field, albedo, grad_nodes, kind, alpha, beta, grad_sign, pos
    )
    if normals_override is not None:
        normals = normals_override.reshape(-1, n_samples, 3)[ridx]
    a = -np.expm1(-dens * dt[:, None])
    trans = np.cumprod(1.0 - a, axis=1)
    t_exc = np.concatenate([np.ones((a.shape[0], 1)), trans[:, :-1]], axis=1)
    w = t_exc * a
    light = table_lookup(ltable, normals)

    grgb = g_rgb.reshape(-1, 3)[ridx]
    gwc = g_w_const.ravel()[ridx]
    gwt = g_w_t.ravel()[ridx]
    gwl = g_w_light.ravel()[ridx]
    bg = np.asarray(background, dtype=np.float64)

    grgb_dot_alb = np.einsum("rc,rsc->rs", grgb, alb)
    g_per_w = grgb_dot_alb * light + gwc[:, None] + gwt[:, None] * t + gwl[:, None] * light
    bgdot = grgb @ bg
    # Suffix sums: S_k = sum_{j>k} G_j w_j + bgdot * T_final.
    gw = g_per_w * w
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([suffix[:, 1:], np.zeros((gw.shape[0], 1))], axis=1)
    suffix += (bgdot * trans[:, -1])[:, None]
    d_dens = dt[:, None] * ((1.0 - a) * g_per_w * t_exc - suffix)
    if kind == 1:
        sig = dens / alpha
        d_field_val = d_dens * (-(alpha / beta) * sig * (1.0 - sig))
    else:
        d_field_val = d_dens

    flat_pos = pos.reshape(-1, 3)
    g = np.clip((flat_pos + 0.5) * (n - 1), 0.0, n - 1 - 1e-9)
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    d_field_flat = d_field_val.ravel()
    g_alb_samples = (w * light)[:, :, None] * grgb[:, None, :]
    g_alb_flat = g_alb_samples.reshape(-1, 3)
    gf = g_field.ravel()
    ga = g_albedo.reshape(-1, 3)
    nn = n * n * n
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dz, wz in ((0, 1 - fz), (1, fz)):
                idx = ((x0 + dx) * n + (y0 + dy)) * n + (z0 + dz)
                ww = wx * wy * wz
                gf += np.bincount(idx, weights=d_field_flat * ww, minlength=nn)
                for c in range(3):
                    ga[:, c] += np.bincount(
                        idx, weights=g_alb_flat[:, c] * ww, minlength=nn
                    )
    g_light_samples = w * (grgb_dot_alb + gwl[:, None])
    g_table += table_scatter((nt, nph), normals, g_light_samples)
    return g_field, g_albedo, g_table
