"""Shared pieces of the batched network-derivative kernels.

Both kernel implementations propagate "stacks": for every scalar quantity in
the network they carry the value plus its pure input derivatives, stored as
column blocks in level order

    [value, d/dx, d/dy, d2/dx2, d2/dy2, ..., dm/dxm, dm/dym]

so a stack for derivative order m has 1 + 2m levels. Affine layers act on all
levels at once (one matrix product); activations combine levels through the
chain rule for higher derivatives. Keeping levels sorted by order means a
reverse pass that only needs orders <= k can work on a prefix of the stack.

The "laplacian" mode carries [value, d/dx, d/dy, lap] where lap is the sum of
both second derivatives propagated as a single level; it exists because
residual losses only ever need that sum.
"""

from __future__ import annotations

import numpy as np

PURE = "pure"
LAPLACIAN = "laplacian"

ACT_IDS = {"sin": 0, "tanh": 1, "elu": 2}

MAX_ORDER = 4  # the derivative chain rule below is written out through order 4


def n_levels(order: int, mode: str) -> int:
    if mode == LAPLACIAN:
        if order != 2:
            raise ValueError("laplacian mode carries exactly second derivatives")
        return 4
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"derivative order must be in [0, {MAX_ORDER}]")
    return 1 + 2 * order


def level_index(order_j: int, axis: int) -> int:
    """Column-block index of the pure derivative of order j along an axis."""
    return 1 + 2 * (order_j - 1) + axis


LAP_LEVEL = 3  # index of the summed-second-derivative level in laplacian mode


def input_stack(
    X: np.ndarray,
    mean: np.ndarray,
    inv_std: np.ndarray,
    nf: int,
    mode: str,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Stack of the normalized inputs: values plus constant first derivatives."""
    n = X.shape[0]
    in_dim = X.shape[1]
    if out is None:
        z = np.zeros((in_dim, nf, n))
    else:
        z = out
        z[...] = 0.0
    for i in range(in_dim):
        z[i, 0, :] = (X[:, i] - mean[i]) * inv_std[i]
        if nf > 1 + i:
            z[i, level_index(1, i), :] = inv_std[i]
    return z


def sigma_tables(act_id: int, a0: np.ndarray, n_d: int) -> tuple[np.ndarray, list]:
    """Activation value and its first n_d derivatives, evaluated elementwise.

    Returns (value, [d1, d2, ...]) where dk is the k-th derivative at a0.
    """
    if act_id == 0:  # sin
        s = np.sin(a0)
        c = np.cos(a0)
        cycle = [c, -s, -c, s, c]
        return s, cycle[:n_d]
    if act_id == 1:  # tanh
        t = np.tanh(a0)
        u = 1.0 - t * t
        t2 = t * t
        ds = [
            u,
            -2.0 * t * u,
            u * (6.0 * t2 - 2.0),
            u * (16.0 * t - 24.0 * t2 * t),
            u * (120.0 * t2 * t2 - 120.0 * t2 + 16.0),
        ]
        return t, ds[:n_d]
    if act_id == 2:  # elu; derivative at 0 taken from the x >= 0 branch
        mask = a0 >= 0.0
        e = np.exp(np.where(mask, 0.0, a0))
        value = np.where(mask, a0, e - 1.0)
        d1 = np.where(mask, 1.0, e)
        dk = np.where(mask, 0.0, e)
        return value, ([d1] + [dk] * (n_d - 1))[:n_d]
    raise ValueError(f"unknown activation id {act_id}")


def weight_views(flat: np.ndarray, layer_shapes) -> tuple[list, list]:
    """Zero-copy per-layer (weights, biases) views into a flat vector."""
    ws, bs = [], []
    pos = 0
    for o, i in layer_shapes:
        ws.append(flat[pos : pos + o * i].reshape(o, i))
        pos += o * i
        bs.append(flat[pos : pos + o])
        pos += o
    return ws, bs
