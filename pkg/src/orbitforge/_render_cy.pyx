# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-marching kernels; mirrors _render_np operation for operation."""

import numpy as np

cimport numpy as cnp
from libc.math cimport acos, atan2, exp, expm1, floor, fmod, sqrt

cnp.import_array()

ctypedef unsigned long long u64

cdef double M_PI = 3.141592653589793238462643383279502884

cdef inline double _hash01(u64 pixel, u64 sample, u64 seed) nogil:
    cdef u64 h = pixel * <u64>0x9E3779B97F4A7C15ULL + sample * <u64>0xBF58476D1CE4E5B9ULL + seed * <u64>0x94D049BB133111EBULL
    h ^= h >> 30
    h *= <u64>0xBF58476D1CE4E5B9ULL
    h ^= h >> 27
    h *= <u64>0x94D049BB133111EBULL
    h ^= h >> 31
    return <double>(h >> 11) * (1.0 / 9007199254740992.0)


cdef inline void _corner(double px, double py, double pz, int n,
                         long* x0, long* y0, long* z0,
                         double* fx, double* fy, double* fz) nogil:
    cdef double lim = n - 1 - 1e-9
    cdef double gx = (px + 0.5) * (n - 1)
    cdef double gy = (py + 0.5) * (n - 1)
    cdef double gz = (pz + 0.5) * (n - 1)
    if gx < 0.0: gx = 0.0
    if gx > lim: gx = lim
    if gy < 0.0: gy = 0.0
    if gy > lim: gy = lim
    if gz < 0.0: gz = 0.0
    if gz > lim: gz = lim
    x0[0] = <long>floor(gx)
    y0[0] = <long>floor(gy)
    z0[0] = <long>floor(gz)
    fx[0] = gx - x0[0]
    fy[0] = gy - y0[0]
    fz[0] = gz - z0[0]


cdef inline double _interp_scalar(double[:, :, ::1] v, double px, double py, double pz) nogil:
    cdef long x0, y0, z0
    cdef double fx, fy, fz
    _corner(px, py, pz, <int>v.shape[0], &x0, &y0, &z0, &fx, &fy, &fz)
    cdef double c00 = v[x0, y0, z0] * (1 - fz) + v[x0, y0, z0 + 1] * fz
    cdef double c01 = v[x0, y0 + 1, z0] * (1 - fz) + v[x0, y0 + 1, z0 + 1] * fz
    cdef double c10 = v[x0 + 1, y0, z0] * (1 - fz) + v[x0 + 1, y0, z0 + 1] * fz
    cdef double c11 = v[x0 + 1, y0 + 1, z0] * (1 - fz) + v[x0 + 1, y0 + 1, z0 + 1] * fz
    return (c00 * (1 - fy) + c01 * fy) * (1 - fx) + (c10 * (1 - fy) + c11 * fy) * fx


cdef inline void _interp_vec3(double[:, :, :, ::1] v, double px, double py, double pz, double* out) nogil:
    cdef long x0, y0, z0
    cdef double fx, fy, fz, w
    cdef int dx, dy, dz, c
    _corner(px, py, pz, <int>v.shape[0], &x0, &y0, &z0, &fx, &fy, &fz)
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                for c in range(3):
                    out[c] += v[x0 + dx, y0 + dy, z0 + dz, c] * w


cdef inline void _scatter_scalar(double[:, :, ::1] out, double px, double py, double pz, double g) nogil:
    cdef long x0, y0, z0
    cdef double fx, fy, fz, w
    cdef int dx, dy, dz
    _corner(px, py, pz, <int>out.shape[0], &x0, &y0, &z0, &fx, &fy, &fz)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                out[x0 + dx, y0 + dy, z0 + dz] += g * w


cdef inline void _scatter_vec3(double[:, :, :, ::1] out, double px, double py, double pz,
                               double g0, double g1, double g2) nogil:
    cdef long x0, y0, z0
    cdef double fx, fy, fz, w
    cdef int dx, dy, dz
    _corner(px, py, pz, <int>out.shape[0], &x0, &y0, &z0, &fx, &fy, &fz)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                out[x0 + dx, y0 + dy, z0 + dz, 0] += g0 * w
                out[x0 + dx, y0 + dy, z0 + dz, 1] += g1 * w
                out[x0 + dx, y0 + dy, z0 + dz, 2] += g2 * w


cdef inline void _table_coords(int nt, int nph, double nx, double ny, double nz,
                               long* r0, long* r1, double* fr,
                               long* c0, long* c1, double* fc) nogil:
    cdef double zz = nz
    if zz > 1.0: zz = 1.0
    if zz < -1.0: zz = -1.0
    cdef double theta = acos(zz)
    cdef double phi = fmod(atan2(ny, nx), 2.0 * M_PI)
    if phi < 0.0:
        phi += 2.0 * M_PI
    cdef double r = theta / M_PI * nt - 0.5
    if r < 0.0: r = 0.0
    if r > nt - 1.0: r = nt - 1.0
    cdef double c = phi / (2.0 * M_PI) * nph - 0.5
    r0[0] = <long>floor(r)
    r1[0] = r0[0] + 1
    if r1[0] > nt - 1: r1[0] = nt - 1
    fr[0] = r - r0[0]
    cdef double cf = floor(c)
    cdef long c0i = (<long>cf) % nph
    if c0i < 0: c0i += nph
    c0[0] = c0i
    c1[0] = (c0i + 1) % nph
    fc[0] = c - cf


cdef inline double _table_lookup(double[:, ::1] table, double nx, double ny, double nz) nogil:
    cdef long r0, r1, c0, c1
    cdef double fr, fc
    _table_coords(<int>table.shape[0], <int>table.shape[1], nx, ny, nz, &r0, &r1, &fr, &c0, &c1, &fc)
    return (table[r0, c0] * (1 - fr) * (1 - fc) + table[r0, c1] * (1 - fr) * fc
            + table[r1, c0] * fr * (1 - fc) + table[r1, c1] * fr * fc)


cdef inline void _table_scatter(double[:, ::1] out, double nx, double ny, double nz, double g) nogil:
    cdef long r0, r1, c0, c1
    cdef double fr, fc
    _table_coords(<int>out.shape[0], <int>out.shape[1], nx, ny, nz, &r0, &r1, &fr, &c0, &c1, &fc)
    out[r0, c0] += g * (1 - fr) * (1 - fc)
    out[r0, c1] += g * (1 - fr) * fc
    out[r1, c0] += g * fr * (1 - fc)
    out[r1, c1] += g * fr * fc


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def forward(field, albedo, kind, alpha, beta, grad_nodes, grad_sign, origin,
            dirs, hit, t0, t1, n_samples, jitter_seed, background, ltable,
            normals_override=None, want_sample_normals=False):
    cdef double[:, :, ::1] fv = field
    cdef double[:, :, :, ::1] av = albedo
    cdef double[:, :, :, ::1] gv = grad_nodes
    cdef double[:, ::1] lt = ltable
    cdef double[::1] og = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, :, ::1] dv = dirs
    cdef cnp.uint8_t[:, ::1] hv = hit.view(np.uint8)
    cdef double[:, ::1] t0v = t0
    cdef double[:, ::1] t1v = t1
    cdef double[::1] bg = np.ascontiguousarray(background, dtype=np.float64)

    cdef int height = dv.shape[0]
    cdef int width = dv.shape[1]
    cdef int S = n_samples
    cdef int kd = kind
    cdef double al = alpha
    cdef double be = beta
    cdef double gsign = grad_sign
    cdef u64 seed = <u64>jitter_seed

    rgb_arr = np.empty((height, width, 3))
    mask_arr = np.zeros((height, width))
    depth_arr = np.zeros((height, width))
    illum_arr = np.zeros((height, width))
    rgb_arr[:, :] = np.asarray(background, dtype=np.float64)
    cdef double[:, :, ::1] rgb = rgb_arr
    cdef double[:, ::1] mask = mask_arr
    cdef double[:, ::1] depth = depth_arr
    cdef double[:, ::1] illum = illum_arr

    cdef bint want_norm = bool(want_sample_normals)
    sn_arr = np.zeros((height, width, S, 3)) if want_norm else None
    cdef double[:, :, :, ::1] sn = sn_arr if want_norm else None
    cdef bint has_override = normals_override is not None
    cdef double[:, :, :, ::1] no = normals_override if has_override else None

    cdef int i, j, s
    cdef u64 pix
    cdef double tt0, dt, xi, ts, px, py, pz
    cdef double f, dens, a, T, w, L
    cdef double acc_r, acc_g, acc_b, acc_m, acc_d, acc_i
    cdef double gvec[3]
    cdef double nrm, gn
    cdef double nx, ny, nz

    for i in range(height):
        for j in range(width):
            if not hv[i, j]:
                continue
            pix = <u64>(i * width + j)
            tt0 = t0v[i, j]
            dt = (t1v[i, j] - tt0) / S
            T = 1.0
            acc_r = 0.0
            acc_g = 0.0
            acc_b = 0.0
            acc_m = 0.0
            acc_d = 0.0
            acc_i = 0.0
            for s in range(S):
                xi = _hash01(pix, <u64>s, seed)
                ts = tt0 + (s + xi) * dt
                px = og[0] + ts * dv[i, j, 0]
                py = og[1] + ts * dv[i, j, 1]
                pz = og[2] + ts * dv[i, j, 2]
                f = _interp_scalar(fv, px, py, pz)
                if kd == 1:
                    dens = al * _sigmoid(-f / be)
                else:
                    dens = f
                a = -expm1(-dens * dt)
                w = T * a
                if has_override:
                    nx = no[i, j, s, 0]
                    ny = no[i, j, s, 1]
                    nz = no[i, j, s, 2]
                else:
                    _interp_vec3(gv, px, py, pz, gvec)
                    nrm = sqrt(gvec[0] * gvec[0] + gvec[1] * gvec[1] + gvec[2] * gvec[2])
                    if nrm < 1e-12:
                        nx = 0.0
                        ny = 0.0
                        nz = 1.0
                    else:
                        gn = gsign / nrm
                        nx = gvec[0] * gn
                        ny = gvec[1] * gn
                        nz = gvec[2] * gn
                if want_norm:
                    sn[i, j, s, 0] = nx
                    sn[i, j, s, 1] = ny
                    sn[i, j, s, 2] = nz
                L = _table_lookup(lt, nx, ny, nz)
                _interp_vec3(av, px, py, pz, gvec)
                acc_r += w * L * gvec[0]
                acc_g += w * L * gvec[1]
                acc_b += w * L * gvec[2]
                acc_m += w
                acc_d += w * ts
                acc_i += w * L
                T *= 1.0 - a
            rgb[i, j, 0] = acc_r + T * bg[0]
            rgb[i, j, 1] = acc_g + T * bg[1]
            rgb[i, j, 2] = acc_b + T * bg[2]
            mask[i, j] = acc_m
            depth[i, j] = acc_d
            illum[i, j] = acc_i
    return rgb_arr, mask_arr, depth_arr, illum_arr, sn_arr


def backward(field, albedo, kind, alpha, beta, grad_nodes, grad_sign, origin,
             dirs, hit, t0, t1, n_samples, jitter_seed, background, ltable,
             normals_override, g_rgb, g_w_const, g_w_t, g_w_light):
    cdef double[:, :, ::1] fv = field
    cdef double[:, :, :, ::1] av = albedo
    cdef double[:, :, :, ::1] gvn = grad_nodes
    cdef double[:, ::1] lt = ltable
    cdef double[::1] og = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, :, ::1] dv = dirs
    cdef cnp.uint8_t[:, ::1] hv = hit.view(np.uint8)
    cdef double[:, ::1] t0v = t0
    cdef double[:, ::1] t1v = t1
    cdef double[::1] bg = np.ascontiguousarray(background, dtype=np.float64)
    cdef double[:, :, ::1] grv = g_rgb
    cdef double[:, ::1] gwcv = g_w_const
    cdef double[:, ::1] gwtv = g_w_t
    cdef double[:, ::1] gwlv = g_w_light

    cdef int n = fv.shape[0]
    cdef int nt = lt.shape[0]
    cdef int nph = lt.shape[1]
    cdef int height = dv.shape[0]
    cdef int width = dv.shape[1]
    cdef int S = n_samples
    cdef int kd = kind
    cdef double al = alpha
    cdef double be = beta
    cdef double gsign = grad_sign
    cdef u64 seed = <u64>jitter_seed

    g_field_arr = np.zeros((n, n, n))
    g_albedo_arr = np.zeros((n, n, n, 3))
    g_table_arr = np.zeros((nt, nph))
    cdef double[:, :, ::1] g_field = g_field_arr
    cdef double[:, :, :, ::1] g_albedo = g_albedo_arr
    cdef double[:, ::1] g_table = g_table_arr

    cdef bint has_override = normals_override is not None
    cdef double[:, :, :, ::1] no = normals_override if has_override else None

    # Per-ray scratch, reused across pixels.
    sa_arr = np.empty(S)
    st_arr = np.empty(S)
    stx_arr = np.empty(S)
    sl_arr = np.empty(S)
    sgd_arr = np.empty(S)
    sdn_arr = np.empty(S)
    snx_arr = np.empty(S)
    sny_arr = np.empty(S)
    snz_arr = np.empty(S)
    cdef double[::1] sa = sa_arr
    cdef double[::1] st = st_arr
    cdef double[::1] stx = stx_arr
    cdef double[::1] sl = sl_arr
    cdef double[::1] sgd = sgd_arr
    cdef double[::1] sdn = sdn_arr
    cdef double[::1] snx = snx_arr
    cdef double[::1] sny = sny_arr
    cdef double[::1] snz = snz_arr

    cdef int i, j, s
    cdef u64 pix
    cdef double tt0, dt, xi, ts, px, py, pz
    cdef double f, dens, a, T, w, L, nrm, gn
    cdef double gvec[3]
    cdef double nx, ny, nz
    cdef double gr0, gr1, gr2, gwc, gwt, gwl, bgdot
    cdef double G, dd, dfv, suffix, sig, gl

    for i in range(height):
        for j in range(width):
            if not hv[i, j]:
                continue
            pix = <u64>(i * width + j)
            tt0 = t0v[i, j]
            dt = (t1v[i, j] - tt0) / S
            gr0 = grv[i, j, 0]
            gr1 = grv[i, j, 1]
            gr2 = grv[i, j, 2]
            gwc = gwcv[i, j]
            gwt = gwtv[i, j]
            gwl = gwlv[i, j]
            bgdot = gr0 * bg[0] + gr1 * bg[1] + gr2 * bg[2]
            T = 1.0
            for s in range(S):
                xi = _hash01(pix, <u64>s, seed)
                ts = tt0 + (s + xi) * dt
                px = og[0] + ts * dv[i, j, 0]
                py = og[1] + ts * dv[i, j, 1]
                pz = og[2] + ts * dv[i, j, 2]
                f = _interp_scalar(fv, px, py, pz)
                if kd == 1:
                    dens = al * _sigmoid(-f / be)
                else:
                    dens = f
                a = -expm1(-dens * dt)
                if has_override:
                    nx = no[i, j, s, 0]
                    ny = no[i, j, s, 1]
                    nz = no[i, j, s, 2]
                else:
                    _interp_vec3(gvn, px, py, pz, gvec)
                    nrm = sqrt(gvec[0] * gvec[0] + gvec[1] * gvec[1] + gvec[2] * gvec[2])
                    if nrm < 1e-12:
                        nx = 0.0
                        ny = 0.0
                        nz = 1.0
                    else:
                        gn = gsign / nrm
                        nx = gvec[0] * gn
                        ny = gvec[1] * gn
                        nz = gvec[2] * gn
                L = _table_lookup(lt, nx, ny, nz)
                _interp_vec3(av, px, py, pz, gvec)
                sa[s] = a
                st[s] = ts
                stx[s] = T
                sl[s] = L
                sdn[s] = dens
                sgd[s] = gr0 * gvec[0] + gr1 * gvec[1] + gr2 * gvec[2]
                snx[s] = nx
                sny[s] = ny
                snz[s] = nz
                T *= 1.0 - a
            suffix = bgdot * T
            for s in range(S - 1, -1, -1):
                xi = _hash01(pix, <u64>s, seed)
                ts = tt0 + (s + xi) * dt
                px = og[0] + ts * dv[i, j, 0]
                py = og[1] + ts * dv[i, j, 1]
                pz = og[2] + ts * dv[i, j, 2]
                a = sa[s]
                w = stx[s] * a
                G = sgd[s] * sl[s] + gwc + gwt * st[s] + gwl * sl[s]
                dd = dt * ((1.0 - a) * G * stx[s] - suffix)
                if kd == 1:
                    sig = sdn[s] / al
                    dfv = dd * (-(al / be) * sig * (1.0 - sig))
                else:
                    dfv = dd
                _scatter_scalar(g_field, px, py, pz, dfv)
                gl = w * sl[s]
                _scatter_vec3(g_albedo, px, py, pz, gl * gr0, gl * gr1, gl * gr2)
                _table_scatter(g_table, snx[s], sny[s], snz[s], w * (sgd[s] + gwl))
                suffix += G * w
    return g_field_arr, g_albedo_arr, g_table_arr
