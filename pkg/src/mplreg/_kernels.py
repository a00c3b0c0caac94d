"""Numba kernels for the per-iteration hot paths.

Everything here mirrors a plain-numpy reference implementation elsewhere in
the package (interp.py, losses.py test oracles); the kernels exist purely for
speed on a single core. All loops are sequential and allocation-free, so
results are bit-reproducible run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sample_volumes_grad(vols, disp, vals, grads):
    """Trilinear-sample V volumes at x + disp(x), with exact point derivatives.

    vols: (V, n0, n1, n2); disp: (n0, n1, n2, 3);
    vals: (V, n0, n1, n2) out; grads: (V, n0, n1, n2, 3) out.
    Derivatives are the true slopes of the clamped trilinear interpolant
    (zero along any clamped axis), which is what finite differences of the
    sampled values converge to.
    """
    V = vols.shape[0]
    n0, n1, n2 = vols.shape[1], vols.shape[2], vols.shape[3]
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                x = i + disp[i, j, k, 0]
                y = j + disp[i, j, k, 1]
                z = k + disp[i, j, k, 2]
                inx = 0.0 < x < n0 - 1.0
                iny = 0.0 < y < n1 - 1.0
                inz = 0.0 < z < n2 - 1.0
                if x < 0.0:
                    x = 0.0
                elif x > n0 - 1.0:
                    x = n0 - 1.0
                if y < 0.0:
                    y = 0.0
                elif y > n1 - 1.0:
                    y = n1 - 1.0
                if z < 0.0:
                    z = 0.0
                elif z > n2 - 1.0:
                    z = n2 - 1.0
                i0 = int(x)
                j0 = int(y)
                k0 = int(z)
                if i0 > n0 - 2:
                    i0 = n0 - 2
                if j0 > n1 - 2:
                    j0 = n1 - 2
                if k0 > n2 - 2:
                    k0 = n2 - 2
                fx = x - i0
                fy = y - j0
                fz = z - k0
                for v in range(V):
                    c000 = vols[v, i0, j0, k0]
                    c001 = vols[v, i0, j0, k0 + 1]
                    c010 = vols[v, i0, j0 + 1, k0]
                    c011 = vols[v, i0, j0 + 1, k0 + 1]
                    c100 = vols[v, i0 + 1, j0, k0]
                    c101 = vols[v, i0 + 1, j0, k0 + 1]
                    c110 = vols[v, i0 + 1, j0 + 1, k0]
                    c111 = vols[v, i0 + 1, j0 + 1, k0 + 1]
                    gz_ = 1.0 - fz
                    c00 = gz_ * c000 + fz * c001
                    c01 = gz_ * c010 + fz * c011
                    c10 = gz_ * c100 + fz * c101
                    c11 = gz_ * c110 + fz * c111
                    gy_ = 1.0 - fy
                    c0 = gy_ * c00 + fy * c01
                    c1 = gy_ * c10 + fy * c11
                    vals[v, i, j, k] = (1.0 - fx) * c0 + fx * c1
                    grads[v, i, j, k, 0] = (c1 - c0) if inx else 0.0
                    grads[v, i, j, k, 1] = (
                        (c01 - c00) + fx * ((c11 - c10) - (c01 - c00)) if iny else 0.0
                    )
                    if inz:
                        d0 = (c001 - c000) + fy * ((c011 - c010) - (c001 - c000))
                        d1 = (c101 - c100) + fy * ((c111 - c110) - (c101 - c100))
                        grads[v, i, j, k, 2] = d0 + fx * (d1 - d0)
                    else:
                        grads[v, i, j, k, 2] = 0.0


@njit(cache=True)
def sample_volumes(vols, disp, vals):
    """Trilinear-sample V volumes at x + disp(x), values only."""
    V = vols.shape[0]
    n0, n1, n2 = vols.shape[1], vols.shape[2], vols.shape[3]
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                x = i + disp[i, j, k, 0]
                y = j + disp[i, j, k, 1]
                z = k + disp[i, j, k, 2]
                if x < 0.0:
                    x = 0.0
                elif x > n0 - 1.0:
                    x = n0 - 1.0
                if y < 0.0:
                    y = 0.0
                elif y > n1 - 1.0:
                    y = n1 - 1.0
                if z < 0.0:
                    z = 0.0
                elif z > n2 - 1.0:
                    z = n2 - 1.0
                i0 = int(x)
                j0 = int(y)
                k0 = int(z)
                if i0 > n0 - 2:
                    i0 = n0 - 2
                if j0 > n1 - 2:
                    j0 = n1 - 2
                if k0 > n2 - 2:
                    k0 = n2 - 2
                fx = x - i0
                fy = y - j0
                fz = z - k0
                gz_ = 1.0 - fz
                gy_ = 1.0 - fy
                for v in range(V):
                    c00 = gz_ * vols[v, i0, j0, k0] + fz * vols[v, i0, j0, k0 + 1]
                    c01 = gz_ * vols[v, i0, j0 + 1, k0] + fz * vols[v, i0, j0 + 1, k0 + 1]
                    c10 = gz_ * vols[v, i0 + 1, j0, k0] + fz * vols[v, i0 + 1, j0, k0 + 1]
                    c11 = gz_ * vols[v, i0 + 1, j0 + 1, k0] + fz * vols[v, i0 + 1, j0 + 1, k0 + 1]
                    c0 = gy_ * c00 + fy * c01
                    c1 = gy_ * c10 + fy * c11
                    vals[v, i, j, k] = (1.0 - fx) * c0 + fx * c1


@njit(cache=True)
def compose_with_jac(acc, inc, out, jac):
    """out(x) = inc(x) + acc(x + inc(x)); jac[x, j, i] = d acc_j / d p_i at x + inc(x).

    The full derivative of out_j wrt inc_i at the same voxel is then
    delta_ij + jac[j, i].
    """
    n0, n1, n2 = acc.shape[0], acc.shape[1], acc.shape[2]
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                x = i + inc[i, j, k, 0]
                y = j + inc[i, j, k, 1]
                z = k + inc[i, j, k, 2]
                inx = 0.0 < x < n0 - 1.0
                iny = 0.0 < y < n1 - 1.0
                inz = 0.0 < z < n2 - 1.0
                if x < 0.0:
                    x = 0.0
                elif x > n0 - 1.0:
                    x = n0 - 1.0
                if y < 0.0:
                    y = 0.0
                elif y > n1 - 1.0:
                    y = n1 - 1.0
                if z < 0.0:
                    z = 0.0
                elif z > n2 - 1.0:
                    z = n2 - 1.0
                i0 = int(x)
                j0 = int(y)
                k0 = int(z)
                if i0 > n0 - 2:
                    i0 = n0 - 2
                if j0 > n1 - 2:
                    j0 = n1 - 2
                if k0 > n2 - 2:
                    k0 = n2 - 2
                fx = x - i0
                fy = y - j0
                fz = z - k0
                for c in range(3):
                    c000 = acc[i0, j0, k0, c]
                    c001 = acc[i0, j0, k0 + 1, c]
                    c010 = acc[i0, j0 + 1, k0, c]
                    c011 = acc[i0, j0 + 1, k0 + 1, c]
                    c100 = acc[i0 + 1, j0, k0, c]
                    c101 = acc[i0 + 1, j0, k0 + 1, c]
                    c110 = acc[i0 + 1, j0 + 1, k0, c]
                    c111 = acc[i0 + 1, j0 + 1, k0 + 1, c]
                    gz_ = 1.0 - fz
                    c00 = gz_ * c000 + fz * c001
                    c01 = gz_ * c010 + fz * c011
                    c10 = gz_ * c100 + fz * c101
                    c11 = gz_ * c110 + fz * c111
                    gy_ = 1.0 - fy
                    c0 = gy_ * c00 + fy * c01
                    c1 = gy_ * c10 + fy * c11
                    out[i, j, k, c] = inc[i, j, k, c] + (1.0 - fx) * c0 + fx * c1
                    jac[i, j, k, c, 0] = (c1 - c0) if inx else 0.0
                    jac[i, j, k, c, 1] = (
                        (c01 - c00) + fx * ((c11 - c10) - (c01 - c00)) if iny else 0.0
                    )
                    if inz:
                        d0 = (c001 - c000) + fy * ((c011 - c010) - (c001 - c000))
                        d1 = (c101 - c100) + fy * ((c111 - c110) - (c101 - c100))
                        jac[i, j, k, c, 2] = d0 + fx * (d1 - d0)
                    else:
                        jac[i, j, k, c, 2] = 0.0


@njit(cache=True)
def chain_through_compose(dldout, jac, dldinc):
    """dldinc_i = dldout_i + sum_j dldout_j * jac[j, i] (voxelwise)."""
    n0, n1, n2 = dldout.shape[0], dldout.shape[1], dldout.shape[2]
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                g0 = dldout[i, j, k, 0]
                g1 = dldout[i, j, k, 1]
                g2 = dldout[i, j, k, 2]
                for c in range(3):
                    dldinc[i, j, k, c] = (
                        dldout[i, j, k, c]
                        + g0 * jac[i, j, k, 0, c]
                        + g1 * jac[i, j, k, 1, c]
                        + g2 * jac[i, j, k, 2, c]
                    )


@njit(cache=True)
def parzen_weights(c, bins, sigma, wrad, w, dw, base, want_deriv):
    """Gaussian Parzen weights of each sample against its window of bins.

    c: (N,) continuous bin coordinates (value * bins - 0.5). Window spans bin
    indices floor(c) - wrad .. floor(c) + wrad + 1; out-of-range bins get
    weight exactly 0. w: (N, 2*wrad+2); dw: same shape, d/dc of w (filled when
    want_deriv); base: (N,) int64, floor(c) - wrad.
    """
    N = c.shape[0]
    inv2 = 1.0 / (2.0 * sigma * sigma)
    inv1 = 1.0 / (sigma * sigma)
    ncols = 2 * wrad + 2
    for p in range(N):
        b0 = int(np.floor(c[p])) - wrad
        base[p] = b0
        for a in range(ncols):
            kbin = b0 + a
            if 0 <= kbin < bins:
                d = kbin - c[p]
                wv = np.exp(-d * d * inv2)
                w[p, a] = wv
                if want_deriv:
                    dw[p, a] = wv * d * inv1
            else:
                w[p, a] = 0.0
                if want_deriv:
                    dw[p, a] = 0.0


@njit(cache=True)
def parzen_hist(wm, wf, basem, basef, hist):
    """Accumulate sum_p wm[p,:] (outer) wf[p,:] into a padded histogram.

    ``basem``/``basef`` must already be shifted into the padded index space so
    every window index is in range; out-of-histogram bins carry weight 0, so
    whatever reaches the padding is zero. Branch-free inner loop on purpose.
    """
    N = wm.shape[0]
    ncols = wm.shape[1]
    for p in range(N):
        bm = basem[p]
        bf = basef[p]
        for a in range(ncols):
            wa = wm[p, a]
            if wa == 0.0:
                continue
            row = bm + a
            for b in range(ncols):
                hist[row, bf + b] += wa * wf[p, b]


@njit(cache=True)
def parzen_hist_grad(dwm, wf, basem, basef, dldh, out):
    """out[p] = sum_ab dwm[p,a] * wf[p,b] * dldh[bm+a, bf+b] (padded indices)."""
    N = dwm.shape[0]
    ncols = dwm.shape[1]
    for p in range(N):
        bm = basem[p]
        bf = basef[p]
        acc = 0.0
        for a in range(ncols):
            da = dwm[p, a]
            if da == 0.0:
                continue
            row = bm + a
            s = 0.0
            for b in range(ncols):
                s += dldh[row, bf + b] * wf[p, b]
            acc += da * s
        out[p] = acc


@njit(cache=True)
def bending_energy_grad(u, grad, norm, need_grad):
    """Mean squared second differences over interior voxels, fused with its adjoint.

    u: (n0,n1,n2,3); grad accumulated in place when need_grad; norm is the
    1/(3 * interior count) averaging factor. Returns the energy.
    """
    n0, n1, n2 = u.shape[0], u.shape[1], u.shape[2]
    energy = 0.0
    for i in range(1, n0 - 1):
        for j in range(1, n1 - 1):
            for k in range(1, n2 - 1):
                for c in range(3):
                    ccc = u[i, j, k, c]
                    dxx = u[i + 1, j, k, c] - 2.0 * ccc + u[i - 1, j, k, c]
                    dyy = u[i, j + 1, k, c] - 2.0 * ccc + u[i, j - 1, k, c]
                    dzz = u[i, j, k + 1, c] - 2.0 * ccc + u[i, j, k - 1, c]
                    dxy = 0.25 * (
                        u[i + 1, j + 1, k, c]
                        - u[i + 1, j - 1, k, c]
                        - u[i - 1, j + 1, k, c]
                        + u[i - 1, j - 1, k, c]
                    )
                    dxz = 0.25 * (
                        u[i + 1, j, k + 1, c]
                        - u[i + 1, j, k - 1, c]
                        - u[i - 1, j, k + 1, c]
                        + u[i - 1, j, k - 1, c]
                    )
                    dyz = 0.25 * (
                        u[i, j + 1, k + 1, c]
                        - u[i, j + 1, k - 1, c]
                        - u[i, j - 1, k + 1, c]
                        + u[i, j - 1, k - 1, c]
                    )
                    energy += (
                        dxx * dxx
                        + dyy * dyy
                        + dzz * dzz
                        + 2.0 * (dxy * dxy + dxz * dxz + dyz * dyz)
                    )
                    if need_grad:
                        t = 2.0 * norm * dxx
                        grad[i + 1, j, k, c] += t
                        grad[i, j, k, c] -= 2.0 * t
                        grad[i - 1, j, k, c] += t
                        t = 2.0 * norm * dyy
                        grad[i, j + 1, k, c] += t
                        grad[i, j, k, c] -= 2.0 * t
                        grad[i, j - 1, k, c] += t
                        t = 2.0 * norm * dzz
                        grad[i, j, k + 1, c] += t
                        grad[i, j, k, c] -= 2.0 * t
                        grad[i, j, k - 1, c] += t
                        t = norm * dxy  # 2 * term coefficient 2 * stencil weight 1/4
                        grad[i + 1, j + 1, k, c] += t
                        grad[i + 1, j - 1, k, c] -= t
                        grad[i - 1, j + 1, k, c] -= t
                        grad[i - 1, j - 1, k, c] += t
                        t = norm * dxz
                        grad[i + 1, j, k + 1, c] += t
                        grad[i + 1, j, k - 1, c] -= t
                        grad[i - 1, j, k + 1, c] -= t
                        grad[i - 1, j, k - 1, c] += t
                        t = norm * dyz
                        grad[i, j + 1, k + 1, c] += t
                        grad[i, j + 1, k - 1, c] -= t
                        grad[i, j - 1, k + 1, c] -= t
                        grad[i, j - 1, k - 1, c] += t
    return energy * norm
