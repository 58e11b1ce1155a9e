"""Pure-numpy batched kernel for network values, input derivatives, and VJPs.

Reference implementation: every step is a whole-array numpy operation. The
compiled kernel mirrors this module exactly; tests hold both to the same
expression-graph oracle.
"""

from __future__ import annotations

import numpy as np

from ._netkernel_common import (
    LAP_LEVEL,
    LAPLACIAN,
    PURE,
    input_stack,
    level_index,
    n_levels,
    sigma_tables,
    weight_views,
)

ENGINE = "reference"


class Run:
    """State of one forward pass, reusable for any number of reverse passes."""

    def __init__(self, layer_shapes, act_id, mean, inv_std, flat, X, order, mode,
                 tables=True, pool=None):
        # pool is accepted for interface parity with the compiled engine;
        # the reference implementation always allocates fresh arrays.
        self.layer_shapes = layer_shapes
        self.mode = mode
        self.order = order
        self.n = X.shape[0]
        self.nf = n_levels(order, mode)
        self.n_params = int(flat.shape[0])
        ws, bs = weight_views(flat, layer_shapes)
        self.ws = ws
        n, nf = self.n, self.nf
        n_layers = len(layer_shapes)
        # zs[l] is the input stack of layer l; a_stacks/d_tables per hidden layer.
        self.zs = [input_stack(X, mean, inv_std, nf, mode)]
        self.a_stacks = [] if tables else None
        self.d_tables = [] if tables else None
        # reverse needs one derivative order beyond the forward one
        n_d = min(5, (order if mode == PURE else 2) + 1)
        for l, (q, _) in enumerate(layer_shapes):
            zin = self.zs[l]
            a = (ws[l] @ zin.reshape(zin.shape[0], nf * n)).reshape(q, nf, n)
            a[:, 0, :] += bs[l][:, None]
            if l == n_layers - 1:
                self.fields = a[0] if q == 1 else a
                break
            value, ds = sigma_tables(act_id, a[:, 0, :], n_d if tables else 1)
            z = np.empty_like(a)
            z[:, 0, :] = value
            if tables:
                if mode == LAPLACIAN:
                    _act_forward_lap(a, z, ds)
                else:
                    _act_forward_pure(a, z, ds, order)
                self.a_stacks.append(a)
                self.d_tables.append(ds)
            elif order >= 1 or mode == LAPLACIAN:
                raise ValueError("derivative levels need tables=True")
            self.zs.append(z)

    def vjp(self, seeds: np.ndarray) -> np.ndarray:
        """Parameter gradient for seed weights on the output stack.

        seeds has shape (k, n) where k <= nf covers a prefix of the levels;
        levels beyond the prefix are treated as zero.
        """
        if self.a_stacks is None and len(self.layer_shapes) > 1:
            raise RuntimeError("forward pass was value-only; rerun with tables")
        seeds = np.asarray(seeds, dtype=np.float64)
        if seeds.ndim == 1:
            seeds = seeds[None, :]
        nf_s, n = seeds.shape
        if n != self.n or nf_s > self.nf:
            raise ValueError("seed shape does not match the forward pass")
        grad = np.zeros(self.n_params)
        a_bar = seeds[None, :, :].copy()  # (q_out=1, nf_s, n)
        pos = self.n_params
        for l in range(len(self.layer_shapes) - 1, -1, -1):
            q, fan_in = self.layer_shapes[l]
            pos -= q * fan_in + q
            z_in = self.zs[l][:, :nf_s, :]
            ab_flat = a_bar.reshape(q, nf_s * n)
            grad[pos : pos + q * fan_in] = (
                ab_flat @ z_in.reshape(fan_in, nf_s * n).T
            ).ravel()
            grad[pos + q * fan_in : pos + q * fan_in + q] = a_bar[:, 0, :].sum(axis=1)
            if l == 0:
                break
            z_bar = (self.ws[l].T @ ab_flat).reshape(fan_in, nf_s, n)
            a = self.a_stacks[l - 1][:, :nf_s, :]
            ds = self.d_tables[l - 1]
            if self.mode == LAPLACIAN:
                a_bar = _act_reverse_lap(a, z_bar, ds)
            else:
                a_bar = _act_reverse_pure(a, z_bar, ds, (nf_s - 1) // 2)
        return grad


def _act_forward_pure(a, z, ds, m):
    """Chain rule for pure derivatives through an elementwise activation.

    With t_j the j-th input derivative of the pre-activation along one axis:
      z1 = d1 t1
      z2 = d1 t2 + d2 t1^2
      z3 = d1 t3 + 3 d2 t1 t2 + d3 t1^3
      z4 = d1 t4 + d2 (4 t1 t3 + 3 t2^2) + 6 d3 t1^2 t2 + d4 t1^4
    """
    for axis in range(2):
        if m < 1:
            break
        L = [level_index(j, axis) for j in range(1, m + 1)]
        t1 = a[:, L[0], :]
        z[:, L[0], :] = ds[0] * t1
        if m >= 2:
            t2 = a[:, L[1], :]
            z[:, L[1], :] = ds[0] * t2 + ds[1] * t1 * t1
        if m >= 3:
            t3 = a[:, L[2], :]
            z[:, L[2], :] = ds[0] * t3 + 3.0 * ds[1] * t1 * t2 + ds[2] * t1**3
        if m >= 4:
            t4 = a[:, L[3], :]
            z[:, L[3], :] = (
                ds[0] * t4
                + ds[1] * (4.0 * t1 * t3 + 3.0 * t2 * t2)
                + 6.0 * ds[2] * t1 * t1 * t2
                + ds[3] * t1**4
            )


def _act_forward_lap(a, z, ds):
    """Laplacian-mode chain rule: the summed second derivative propagates as
    lap(z) = d2 (t1x^2 + t1y^2) + d1 lap(t)."""
    t1x = a[:, 1, :]
    t1y = a[:, 2, :]
    z[:, 1, :] = ds[0] * t1x
    z[:, 2, :] = ds[0] * t1y
    z[:, LAP_LEVEL, :] = ds[1] * (t1x * t1x + t1y * t1y) + ds[0] * a[:, LAP_LEVEL, :]


def _act_reverse_pure(a, z_bar, ds, m_s):
    """Adjoint of _act_forward_pure restricted to levels of order <= m_s."""
    a_bar = np.empty_like(z_bar)
    a0_bar = ds[0] * z_bar[:, 0, :]
    for axis in range(2):
        if m_s < 1:
            break
        L = [level_index(j, axis) for j in range(1, m_s + 1)]
        t1 = a[:, L[0], :]
        zb1 = z_bar[:, L[0], :]
        a_bar[:, L[0], :] = ds[0] * zb1
        a0_bar += ds[1] * t1 * zb1
        if m_s >= 2:
            t2 = a[:, L[1], :]
            zb2 = z_bar[:, L[1], :]
            a_bar[:, L[0], :] += 2.0 * ds[1] * t1 * zb2
            a_bar[:, L[1], :] = ds[0] * zb2
            a0_bar += (ds[1] * t2 + ds[2] * t1 * t1) * zb2
        if m_s >= 3:
            t3 = a[:, L[2], :]
            zb3 = z_bar[:, L[2], :]
            a_bar[:, L[0], :] += (3.0 * ds[1] * t2 + 3.0 * ds[2] * t1 * t1) * zb3
            a_bar[:, L[1], :] += 3.0 * ds[1] * t1 * zb3
            a_bar[:, L[2], :] = ds[0] * zb3
            a0_bar += (ds[1] * t3 + 3.0 * ds[2] * t1 * t2 + ds[3] * t1**3) * zb3
        if m_s >= 4:
            t4 = a[:, L[3], :]
            zb4 = z_bar[:, L[3], :]
            a_bar[:, L[0], :] += (
                4.0 * ds[1] * t3 + 12.0 * ds[2] * t1 * t2 + 4.0 * ds[3] * t1**3
            ) * zb4
            a_bar[:, L[1], :] += (6.0 * ds[1] * t2 + 6.0 * ds[2] * t1 * t1) * zb4
            a_bar[:, L[2], :] += 4.0 * ds[1] * t1 * zb4
            a_bar[:, L[3], :] = ds[0] * zb4
            a0_bar += (
                ds[1] * t4
                + 4.0 * ds[2] * t1 * t3
                + 3.0 * ds[2] * t2 * t2
                + 6.0 * ds[3] * t1 * t1 * t2
                + ds[4] * t1**4
            ) * zb4
    a_bar[:, 0, :] = a0_bar
    return a_bar


def _act_reverse_lap(a, z_bar, ds):
    """Adjoint of _act_forward_lap."""
    nf_s = z_bar.shape[1]
    a_bar = np.empty_like(z_bar)
    a0_bar = ds[0] * z_bar[:, 0, :]
    if nf_s > 1:
        t1x = a[:, 1, :]
        t1y = a[:, 2, :]
        a_bar[:, 1, :] = ds[0] * z_bar[:, 1, :]
        a_bar[:, 2, :] = ds[0] * z_bar[:, 2, :]
        a0_bar += ds[1] * (t1x * z_bar[:, 1, :] + t1y * z_bar[:, 2, :])
        if nf_s > LAP_LEVEL:
            zbl = z_bar[:, LAP_LEVEL, :]
            a_bar[:, 1, :] += 2.0 * ds[1] * t1x * zbl
            a_bar[:, 2, :] += 2.0 * ds[1] * t1y * zbl
            a_bar[:, LAP_LEVEL, :] = ds[0] * zbl
            a0_bar += (
                ds[2] * (t1x * t1x + t1y * t1y) + ds[1] * a[:, LAP_LEVEL, :]
            ) * zbl
    a_bar[:, 0, :] = a0_bar
    return a_bar
