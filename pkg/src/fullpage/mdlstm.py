"""Four-direction two-dimensional LSTM layer.

Each direction scans the grid from one corner; a cell sees the hidden and cell
states of its already-visited vertical and horizontal neighbours (zero outside
the grid). Every direction has five gate units, each with I input weights,
H weights per predecessor and one bias:

    input gate, forget gate (x predecessor), forget gate (y predecessor),
    output gate, cell candidate

so a layer holds 4 * 5 * (I + 2H + 1) * H parameters. The layer output is the
sum of the four directional hidden states.

All four directions are computed at once by flipping the input so every scan
starts top-left, then sweeping anti-diagonals: cells on one anti-diagonal
depend only on the previous one.
"""
from __future__ import annotations

import numpy as np

from .numeric_core import DimensionError, glorot_uniform, make_rng, sigmoid

# direction d flips (height, width)
FLIPS = ((False, False), (False, True), (True, False), (True, True))
GATE_NAMES = ("input", "forget_x", "forget_y", "output", "candidate")


def mdlstm_param_count(n_in: int, n_hidden: int) -> int:
    return 4 * 5 * (n_in + 2 * n_hidden + 1) * n_hidden


def _flip(a, d):
    fh, fw = FLIPS[d]
    if fh:
        a = a[..., ::-1, :]
    if fw:
        a = a[..., ::-1]
    return a


def _skew_index(h, w):
    """Row i of an (h, w) grid lands at columns i..i+w-1 of an (h, h+w-1) grid."""
    rows = np.arange(h)[:, None]
    return rows, rows + np.arange(w)[None, :]


def _diagonal_rows(h, w):
    """(k, first row, end row) of anti-diagonal k; it is column k of the skewed grid."""
    for k in range(h + w - 1):
        yield k, max(0, k - w + 1), min(h - 1, k) + 1


class MDLSTM:
    def __init__(self, name, n_in, n_hidden, rng=None, dtype=np.float32):
        self.name = name
        self.n_in, self.n_hidden = n_in, n_hidden
        rng = rng or make_rng(0)
        g = 5 * n_hidden
        self.params = {
            # input weights, recurrent weights for [y-pred | x-pred], bias
            f"{name}.w": glorot_uniform(rng, (4, g, n_in), n_in, g, dtype),
            f"{name}.u": np.concatenate(
                [glorot_uniform(rng, (4, g, n_hidden), n_hidden, g, dtype),
                 glorot_uniform(rng, (4, g, n_hidden), n_hidden, g, dtype)], axis=2),
            f"{name}.b": np.zeros((4, g), dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def out_shape(self, h, w):
        return (self.n_hidden, h, w)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.n_in:
            raise DimensionError(
                f"{self.name}: expected (B, {self.n_in}, H, W) input, got {x.shape}")
        W = self.params[f"{self.name}.w"]
        U = self.params[f"{self.name}.u"]
        b = self.params[f"{self.name}.b"]
        nh = self.n_hidden
        B, _, hs, ws = x.shape
        # skewed spatial-first layout (hs, hs+ws-1, 4, B, features): anti-diagonal k
        # is column k, so every step works on plain slices; off-grid cells stay zero
        xd = np.stack([_flip(x, d) for d in range(4)]).transpose(3, 4, 0, 1, 2)
        rows, cols = _skew_index(hs, ws)
        K = hs + ws - 1
        z = np.zeros((hs, K, 4, B, 5 * nh), dtype=x.dtype)
        z[rows, cols] = np.matmul(xd, W.transpose(0, 2, 1)) + b[:, None, :]
        acts = np.zeros_like(z)
        # hp[i + 1, k + 1] holds the state of skewed cell (i, k)
        hp = np.zeros((hs + 1, K + 1, 4, B, nh), dtype=x.dtype)
        cp = np.zeros_like(hp)
        tc = np.zeros((hs, K, 4, B, nh), dtype=x.dtype)
        UT = U.transpose(0, 2, 1)  # (4, 2H, 5H)
        for k, lo, hi in _diagonal_rows(hs, ws):
            hcat = np.concatenate([hp[lo:hi, k], hp[lo + 1:hi + 1, k]], axis=-1)
            a = z[lo:hi, k] + hcat @ UT
            a[..., :4 * nh] = sigmoid(a[..., :4 * nh])
            a[..., 4 * nh:] = np.tanh(a[..., 4 * nh:])
            gi, fx, fy, go, gc = (a[..., j * nh:(j + 1) * nh] for j in range(5))
            c = gi * gc + fx * cp[lo + 1:hi + 1, k] + fy * cp[lo:hi, k]
            t = np.tanh(c)
            cp[lo + 1:hi + 1, k + 1] = c
            hp[lo + 1:hi + 1, k + 1] = go * t
            tc[lo:hi, k] = t
            acts[lo:hi, k] = a
        self._cache = (xd, acts, hp, cp, tc)
        h = hp[rows + 1, cols + 1].transpose(2, 3, 4, 0, 1)  # (4,B,H,hs,ws)
        return np.ascontiguousarray(sum(_flip(h[d], d) for d in range(4)))

    def backward(self, dy):
        xd, acts, hp, cp, tc = self._cache
        W = self.params[f"{self.name}.w"]
        U = self.params[f"{self.name}.u"]
        nh = self.n_hidden
        hs, ws = xd.shape[:2]
        rows, cols = _skew_index(hs, ws)
        dhp = np.zeros_like(hp)
        dcp = np.zeros_like(cp)
        dyd = np.stack([_flip(dy, d) for d in range(4)]).transpose(3, 4, 0, 1, 2)
        dhp[rows + 1, cols + 1] = dyd
        dz = np.zeros_like(acts)
        for k, lo, hi in reversed(list(_diagonal_rows(hs, ws))):
            a = acts[lo:hi, k]
            gi, fx, fy, go, gc = (a[..., j * nh:(j + 1) * nh] for j in range(5))
            t = tc[lo:hi, k]
            dh = dhp[lo + 1:hi + 1, k + 1]
            dc = dcp[lo + 1:hi + 1, k + 1] + dh * go * (1.0 - t * t)
            cx = cp[lo + 1:hi + 1, k]
            cy = cp[lo:hi, k]
            da = np.concatenate([
                dc * gc * gi * (1.0 - gi),
                dc * cx * fx * (1.0 - fx),
                dc * cy * fy * (1.0 - fy),
                dh * t * go * (1.0 - go),
                dc * gi * (1.0 - gc * gc),
            ], axis=-1)
            dz[lo:hi, k] = da
            dhcat = da @ U
            dhp[lo:hi, k] += dhcat[..., :nh]
            dhp[lo + 1:hi + 1, k] += dhcat[..., nh:]
            dcp[lo + 1:hi + 1, k] += dc * fx
            dcp[lo:hi, k] += dc * fy
        name = self.name
        g = 5 * nh
        # off-grid cells have zero dz, so the skewed grid can be summed as is;
        # direction-major copies turn the weight gradients into 4 plain GEMMs
        dzt = dz.transpose(2, 0, 1, 3, 4).reshape(4, -1, g)
        hcat_all = np.concatenate([hp[:-1, :-1], hp[1:, :-1]], axis=-1)
        ht = hcat_all.transpose(2, 0, 1, 3, 4).reshape(4, -1, 2 * nh)
        self.grads[f"{name}.u"] += dzt.transpose(0, 2, 1) @ ht
        self.grads[f"{name}.b"] += dz.sum(axis=(0, 1, 3))
        dz = dz[rows, cols]
        dzt = dz.transpose(2, 0, 1, 3, 4).reshape(4, -1, g)
        xt = xd.transpose(2, 0, 1, 3, 4).reshape(4, -1, self.n_in)
        self.grads[f"{name}.w"] += dzt.transpose(0, 2, 1) @ xt
        dxd = (dz @ W).transpose(2, 3, 4, 0, 1)  # (4,B,I,hs,ws)
        return np.ascontiguousarray(sum(_flip(dxd[d], d) for d in range(4)))
