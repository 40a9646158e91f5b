"""Temporal alignment metrics over frame-pair cost matrices.

The default metric is the boundary-relaxed monotonic-path dynamic
program (OTAM); the bidirectional mean-minimum metric (Bi-MHM) is the
drop-in alternative.  Both come with independent brute-force oracles,
and the DP has a log-sum-exp soft-min variant so gradients can flow
during training.

Path rules, shared verbatim by the DP and the exhaustive oracle: the
support axis is padded with a zero-cost column on each side.  Paths
start at the top-left pad cell and end at the bottom-right pad cell.
Within the first row the path may move right through any column;
elsewhere a cell may be entered diagonally or vertically, and
horizontally only inside the two padding columns.  The accumulated
cost of the best path is divided by the query length so values are
comparable across velocity scales.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError
from .numerics import Tensor, _accum, _node
from . import numerics as nm

_ORACLE_MAX_SIDE = 8


@dataclass
class CostMatrix:
    """Nonnegative frame-pair distances, queries on rows."""

    entries: Tensor
    metric_tag: str = "cosine"

    @property
    def shape(self):
        return self.entries.data.shape


def cosine_cost(q, s):
    """Pairwise cosine distance between the rows of q and s.

    Computed as half the squared distance of the normalized rows, which
    is algebraically 1 - cos and guarantees entries in [0, 2] with an
    exact 0.0 for bit-identical rows.
    """
    if q.data.ndim != 2 or s.data.ndim != 2 or q.data.shape[1] != s.data.shape[1]:
        raise DimensionError(
            f"cosine_cost widths differ: {tuple(q.data.shape)} vs {tuple(s.data.shape)}"
        )
    qn = np.sqrt((q.data**2).sum(axis=1))
    sn = np.sqrt((s.data**2).sum(axis=1))
    for name, norms in (("query", qn), ("support", sn)):
        bad = np.where(norms == 0.0)[0]
        if bad.size:
            raise DegenerateInputError(f"zero-norm {name} row {int(bad[0])}")
    u = q.data / qn[:, None]
    v = s.data / sn[:, None]
    diff = u[:, None, :] - v[None, :, :]
    cost = 0.5 * (diff * diff).sum(axis=-1)
    out = _node(cost, (q, s))
    if out.requires_grad:
        def _bw(g):
            dist_u = g.sum(axis=1, keepdims=True) * u - np.dot(g, v)
            gq = (dist_u - (dist_u * u).sum(axis=1, keepdims=True) * u) / qn[:, None]
            dist_v = g.sum(axis=0)[:, None] * v - np.dot(g.T, u)
            gs = (dist_v - (dist_v * v).sum(axis=1, keepdims=True) * v) / sn[:, None]
            _accum(q, gq)
            _accum(s, gs)

        out._backward = _bw
    return CostMatrix(out)


# --------------------------------------------------------------------------
# Dynamic program kernels.  Written as plain loop code and jit-compiled
# when numba is available; the math is identical either way.


def _otam_table_hard(cpad):
    tq, w = cpad.shape
    r = np.empty((tq, w), dtype=cpad.dtype)
    r[0, 0] = cpad[0, 0]
    for j in range(1, w):
        r[0, j] = cpad[0, j] + r[0, j - 1]
    for i in range(1, tq):
        r[i, 0] = cpad[i, 0] + r[i - 1, 0]
        for j in range(1, w - 1):
            m = r[i - 1, j - 1]
            if r[i - 1, j] < m:
                m = r[i - 1, j]
            r[i, j] = cpad[i, j] + m
        m = r[i - 1, w - 2]
        if r[i - 1, w - 1] < m:
            m = r[i - 1, w - 1]
        if r[i, w - 2] < m:
            m = r[i, w - 2]
        r[i, w - 1] = cpad[i, w - 1] + m
    return r[tq - 1, w - 1]


def _softmin2(a, b, gamma):
    m = a if a < b else b
    return m - gamma * math.log(math.exp((m - a) / gamma) + math.exp((m - b) / gamma))


def _softmin3(a, b, c, gamma):
    m = a if a < b else b
    if c < m:
        m = c
    return m - gamma * math.log(
        math.exp((m - a) / gamma)
        + math.exp((m - b) / gamma)
        + math.exp((m - c) / gamma)
    )


def _otam_table_soft(cpad, gamma):
    tq, w = cpad.shape
    r = np.empty((tq, w), dtype=cpad.dtype)
    r[0, 0] = cpad[0, 0]
    for j in range(1, w):
        r[0, j] = cpad[0, j] + r[0, j - 1]
    for i in range(1, tq):
        r[i, 0] = cpad[i, 0] + r[i - 1, 0]
        for j in range(1, w - 1):
            r[i, j] = cpad[i, j] + _softmin2(r[i - 1, j - 1], r[i - 1, j], gamma)
        r[i, w - 1] = cpad[i, w - 1] + _softmin3(
            r[i - 1, w - 2], r[i - 1, w - 1], r[i, w - 2], gamma
        )
    return r


def _otam_soft_adjoint(cpad, r, gamma):
    tq, w = cpad.shape
    e = np.zeros((tq, w), dtype=cpad.dtype)
    e[tq - 1, w - 1] = 1.0
    for i in range(tq - 1, -1, -1):
        for j in range(w - 1, -1, -1):
            val = e[i, j]
            if val == 0.0:
                continue
            if i == 0:
                if j > 0:
                    e[0, j - 1] += val
                continue
            if j == 0:
                e[i - 1, 0] += val
                continue
            m = r[i, j] - cpad[i, j]
            if j == w - 1:
                e[i - 1, j - 1] += val * math.exp((m - r[i - 1, j - 1]) / gamma)
                e[i - 1, j] += val * math.exp((m - r[i - 1, j]) / gamma)
                e[i, j - 1] += val * math.exp((m - r[i, j - 1]) / gamma)
            else:
                e[i - 1, j - 1] += val * math.exp((m - r[i - 1, j - 1]) / gamma)
                e[i - 1, j] += val * math.exp((m - r[i - 1, j]) / gamma)
    return e


try:
    from numba import njit as _njit

    _otam_table_hard = _njit(cache=True)(_otam_table_hard)
    _softmin2 = _njit(cache=True, inline="always")(_softmin2)
    _softmin3 = _njit(cache=True, inline="always")(_softmin3)
    _otam_table_soft = _njit(cache=True)(_otam_table_soft)
    _otam_soft_adjoint = _njit(cache=True)(_otam_soft_adjoint)
except ImportError:  # pragma: no cover
    pass


def _entries_of(c):
    return c.entries if isinstance(c, CostMatrix) else c


def _padded(entries):
    tq, ts = entries.shape
    cpad = np.zeros((tq, ts + 2), dtype=entries.dtype)
    cpad[:, 1:-1] = entries
    return cpad


def otam_distance(c):
    """Minimum normalized path cost of the boundary-relaxed DP (hard min)."""
    entries = _entries_of(c)
    data = entries.data
    if data.ndim != 2 or data.size == 0:
        raise ContractError(f"otam_distance needs a nonempty matrix, got {data.shape}")
    return float(_otam_table_hard(_padded(data))) / data.shape[0]


def soft_otam_distance(c, gamma=0.1):
    """Soft-min DP value as a differentiable scalar node."""
    entries = _entries_of(c)
    data = entries.data
    if data.ndim != 2 or data.size == 0:
        raise ContractError(f"soft otam needs a nonempty matrix, got {data.shape}")
    if gamma <= 0.0:
        raise ContractError(f"soft-min temperature must be positive, got {gamma}")
    tq = data.shape[0]
    cpad = _padded(data)
    r = _otam_table_soft(cpad, gamma)
    out = _node(np.asarray(r[-1, -1] / tq), (entries,))
    if out.requires_grad:
        def _bw(g):
            e = _otam_soft_adjoint(cpad, r, gamma)
            _accum(entries, e[:, 1:-1] * (g / tq))

        out._backward = _bw
    return out


def otam_bruteforce_oracle(c):
    """Exhaustive enumeration of every admissible path (ground truth).

    Uses the identical move rules and accumulation order as the DP, so
    agreement is exact. Guarded to small matrices.
    """
    entries = _entries_of(c)
    data = np.asarray(entries.data, dtype=np.float64)
    if data.ndim != 2 or data.size == 0:
        raise ContractError(f"oracle needs a nonempty matrix, got {data.shape}")
    tq, ts = data.shape
    if tq > _ORACLE_MAX_SIDE or ts > _ORACLE_MAX_SIDE:
        raise ContractError(
            f"oracle is exhaustive; sides must be <= {_ORACLE_MAX_SIDE}, got {tq}x{ts}"
        )
    cpad = _padded(data)
    w = ts + 2
    best = [math.inf]

    def walk(i, j, acc):
        acc = acc + cpad[i, j]
        if i == tq - 1 and j == w - 1:
            if acc < best[0]:
                best[0] = acc
            return
        if i + 1 < tq:
            if j + 1 < w:
                walk(i + 1, j + 1, acc)
            walk(i + 1, j, acc)
        if j + 1 < w and (i == 0 or j + 1 == w - 1):
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0] / tq


def bimhm_distance(c):
    """Bidirectional mean minimum distance (hard min)."""
    entries = _entries_of(c)
    data = entries.data
    if data.ndim != 2 or data.size == 0:
        raise ContractError(f"bimhm needs a nonempty matrix, got {data.shape}")
    acc_q = 0.0
    for m in data.min(axis=1):
        acc_q += float(m)
    acc_s = 0.0
    for m in data.min(axis=0):
        acc_s += float(m)
    return acc_q / data.shape[0] + acc_s / data.shape[1]


def bimhm_two_loop_oracle(c):
    """Literal two-loop definition of the bidirectional metric."""
    data = np.asarray(_entries_of(c).data, dtype=np.float64)
    tq, ts = data.shape
    acc_q = 0.0
    for i in range(tq):
        m = data[i, 0]
        for j in range(1, ts):
            if data[i, j] < m:
                m = data[i, j]
        acc_q += m
    acc_s = 0.0
    for j in range(ts):
        m = data[0, j]
        for i in range(1, tq):
            if data[i, j] < m:
                m = data[i, j]
        acc_s += m
    return acc_q / tq + acc_s / ts


def soft_bimhm_distance(c, gamma=0.1):
    """Soft-min variant of the bidirectional metric, on the tape."""
    entries = _entries_of(c)
    data = entries.data
    if data.ndim != 2 or data.size == 0:
        raise ContractError(f"bimhm needs a nonempty matrix, got {data.shape}")
    if gamma <= 0.0:
        raise ContractError(f"soft-min temperature must be positive, got {gamma}")
    tq, ts = data.shape

    def softmin(axis):
        m = data.min(axis=axis, keepdims=True)
        e = np.exp((m - data) / gamma)
        z = e.sum(axis=axis, keepdims=True)
        vals = m - gamma * np.log(z)
        return vals, e / z

    row_vals, row_w = softmin(1)
    col_vals, col_w = softmin(0)
    value = row_vals.sum() / tq + col_vals.sum() / ts
    out = _node(np.asarray(value), (entries,))
    if out.requires_grad:
        def _bw(g):
            _accum(entries, g * (row_w / tq + col_w / ts))

        out._backward = _bw
    return out


# --------------------------------------------------------------------------
# Multi-velocity fusion


def fuse_velocities(distances, alpha):
    """Weighted sum of per-scale distances.

    Accepts plain floats (evaluation) or scalar tensors (training);
    alpha may be a plain vector or a 1 x N tensor of learned weights.
    Accumulation is sequential in scale order.
    """
    n = len(distances)
    alpha_len = alpha.data.size if isinstance(alpha, Tensor) else len(alpha)
    if alpha_len != n:
        raise DimensionError(
            f"fusion weight count {alpha_len} != distance count {n}"
        )
    on_tape = isinstance(alpha, Tensor) or any(
        isinstance(d, Tensor) for d in distances
    )
    if not on_tape:
        acc = 0.0
        for a, d in zip(alpha, distances):
            acc += float(a) * float(d)
        return acc
    acc = None
    for i, d in enumerate(distances):
        dt = d if isinstance(d, Tensor) else Tensor(np.asarray(float(d)))
        if isinstance(alpha, Tensor):
            term = nm.mul(nm.pick(alpha, 0, i), dt)
        else:
            term = nm.scale(dt, float(alpha[i]))
        acc = term if acc is None else nm.add(acc, term)
    return acc


@dataclass
class DistanceProfile:
    """Per-scale distances plus the weighted fusion, as computed."""

    per_scale: list  # (scale index starting at 1, distance)
    alphas: object  # vector or 1 x N tensor actually used
    fused: object  # float or scalar tensor
    metric: str = "otam"

    def fused_value(self):
        return self.fused.item() if isinstance(self.fused, Tensor) else float(self.fused)

    def scale_values(self):
        return [
            d.item() if isinstance(d, Tensor) else float(d)
            for _, d in self.per_scale
        ]


_HARD_METRICS = {"otam": otam_distance, "bimhm": bimhm_distance}
_SOFT_METRICS = {"otam": soft_otam_distance, "bimhm": soft_bimhm_distance}


def distance_profile(support, query, alpha, metric="otam", soft=False, gamma=0.1):
    """Align two pyramids scale by scale and fuse the distances.

    ``soft=True`` keeps every step on the differentiation tape using the
    soft-min metric variant; the default hard path returns plain floats.
    """
    if metric not in _HARD_METRICS:
        raise ContractError(f"unknown metric {metric!r}; use 'otam' or 'bimhm'")
    if support.n_scales != query.n_scales:
        raise ContractError(
            f"pyramids have different depths: {support.n_scales} vs {query.n_scales}"
        )
    if support.token_counts() != query.token_counts():
        raise ContractError(
            f"pyramid token counts differ: {support.token_counts()} "
            f"vs {query.token_counts()}"
        )
    measure = _SOFT_METRICS[metric] if soft else _HARD_METRICS[metric]
    per_scale = []
    for n in range(support.n_scales):
        cm = cosine_cost(query.visual(n), support.visual(n))
        if soft:
            per_scale.append((n + 1, measure(cm, gamma)))
        else:
            per_scale.append((n + 1, measure(cm)))
    distances = [d for _, d in per_scale]
    fused = fuse_velocities(distances, alpha)
    return DistanceProfile(per_scale, alphas=alpha, fused=fused, metric=metric)
