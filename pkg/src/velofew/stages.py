"""Text-conditioned interaction stages and the multi-velocity token pyramid.

A stage runs attention over the visual tokens plus one text token
(temporal relation), then shifts every visual token by a text-aware
global vector (channel correction).  Between stages the token count is
halved by pooling, so stage n sees the sequence at half the temporal
resolution of stage n-1; the stack of per-stage outputs is the pyramid
the alignment metrics consume.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Param, Tensor, _accum, _node


@dataclass
class ModelConfig:
    """Hyperparameters shared by every stage.

    ffn_width defaults to 4*channels, mlp_width to channels//2.
    """

    channels: int
    heads: int = 2
    scales: int = 3
    ffn_width: int = 0
    mlp_width: int = 0
    learn_alpha: bool = False

    def __post_init__(self):
        if self.channels < 1 or self.scales < 1 or self.heads < 1:
            raise ConfigError(
                f"channels/heads/scales must be positive, got "
                f"{self.channels}/{self.heads}/{self.scales}"
            )
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must evenly split channels ({self.channels})"
            )
        if self.ffn_width <= 0:
            self.ffn_width = 4 * self.channels
        if self.mlp_width <= 0:
            self.mlp_width = max(1, self.channels // 2)

    @property
    def head_dim(self):
        return self.channels // self.heads


def validate_frame_plan(frames_per_video, scales):
    """Reject frame counts the halving pyramid cannot consume."""
    need = 2 ** (scales - 1)
    if frames_per_video < need or frames_per_video % need != 0:
        raise ConfigError(
            f"{frames_per_video} frames cannot be halved across {scales} scales "
            f"(need a multiple of {need})"
        )


@dataclass
class StageParams:
    """All learnable weights of one interaction stage."""

    wq: list  # per head, channels x head_dim
    wk: list
    wv: list
    wo: Param  # channels x channels
    ln1_gain: Param
    ln1_bias: Param
    ln2_gain: Param
    ln2_bias: Param
    ffn_w1: Param  # channels x ffn_width
    ffn_w2: Param  # ffn_width x channels
    mlp_w1: Param  # 2*channels x mlp_width
    mlp_w2: Param  # mlp_width x channels
    pool_w: Param  # 2 weights, softmax-normalized pair pooling
    merge_w: Param  # channels x channels, linear after the merge sum

    @classmethod
    def init(cls, config, rng, tag):
        c, d = config.channels, config.head_dim

        def uniform(name, rows, cols=None):
            bound = 1.0 / math.sqrt(rows)
            shape = (rows,) if cols is None else (rows, cols)
            return Param(f"{tag}.{name}", rng.uniform(-bound, bound, shape))

        return cls(
            wq=[uniform(f"head{h}.wq", c, d) for h in range(config.heads)],
            wk=[uniform(f"head{h}.wk", c, d) for h in range(config.heads)],
            wv=[uniform(f"head{h}.wv", c, d) for h in range(config.heads)],
            wo=uniform("wo", c, c),
            ln1_gain=Param(f"{tag}.ln1_gain", np.ones(c)),
            ln1_bias=Param(f"{tag}.ln1_bias", np.zeros(c)),
            ln2_gain=Param(f"{tag}.ln2_gain", np.ones(c)),
            ln2_bias=Param(f"{tag}.ln2_bias", np.zeros(c)),
            ffn_w1=uniform("ffn_w1", c, config.ffn_width),
            ffn_w2=uniform("ffn_w2", config.ffn_width, c),
            mlp_w1=uniform("mlp_w1", 2 * c, config.mlp_width),
            mlp_w2=uniform("mlp_w2", config.mlp_width, c),
            pool_w=uniform("pool_w", 2),
            merge_w=uniform("merge_w", c, c),
        )

    def params(self):
        out = list(self.wq) + list(self.wk) + list(self.wv)
        out += [
            self.wo,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.ffn_w1,
            self.ffn_w2,
            self.mlp_w1,
            self.mlp_w2,
            self.pool_w,
            self.merge_w,
        ]
        return out


@dataclass
class ModelParams:
    """One StageParams per velocity scale plus the shared extras."""

    config: ModelConfig
    stages: list
    query_token: Param  # stands in for the text token on the query branch
    alpha_raw: Param | None  # softmax-reparameterized fusion weights, if learned
    alpha_fixed: np.ndarray | None

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng((int(seed), 0x5EED))
        c, n = config.channels, config.scales
        stages = [
            StageParams.init(config, rng, f"stage{i + 1}") for i in range(n)
        ]
        bound = 1.0 / math.sqrt(c)
        query_token = Param("query_token", rng.uniform(-bound, bound, (1, c)))
        if config.learn_alpha:
            alpha_raw = Param("alpha", np.zeros((1, n)))
            alpha_fixed = None
        else:
            alpha_raw = None
            alpha_fixed = np.full(n, 1.0 / n)
        return cls(config, stages, query_token, alpha_raw, alpha_fixed)

    def all_params(self):
        out = []
        for s in self.stages:
            out.extend(s.params())
        out.append(self.query_token)
        if self.alpha_raw is not None:
            out.append(self.alpha_raw)
        return out

    def alpha_array(self):
        """Fusion weights as a plain vector (softmaxed when learned)."""
        if self.alpha_raw is None:
            return self.alpha_fixed.copy()
        z = self.alpha_raw.data[0] - self.alpha_raw.data[0].max()
        e = np.exp(z)
        return e / e.sum()

    def alpha_tensor(self):
        """Fusion weights as a 1 x N tape tensor, or None when fixed."""
        if self.alpha_raw is None:
            return None
        return nm.softmax_rows(self.alpha_raw.value)

    def __post_init__(self):
        if len(self.stages) != self.config.scales:
            raise ConfigError(
                f"expected {self.config.scales} stages, got {len(self.stages)}"
            )


@dataclass
class VelocityPyramid:
    """Per-scale (visual tokens, text token) pairs, coarsest scale last."""

    stages: list  # list of (Tensor tokens_n x channels, Tensor 1 x channels)

    @property
    def n_scales(self):
        return len(self.stages)

    def token_counts(self):
        return [x.data.shape[0] for x, _ in self.stages]

    def visual(self, n):
        return self.stages[n][0]

    def text(self, n):
        return self.stages[n][1]


# --------------------------------------------------------------------------
# Fused pair-pooling nodes.  Both operate on non-overlapping row pairs
# (2i, 2i+1); token counts are guaranteed even by the frame plan.


def _check_pairable(x):
    t = x.data.shape[0]
    if t < 2 or t % 2 != 0:
        raise ContractError(f"pair pooling needs an even row count >= 2, got {t}")


def _pair_mean(x):
    _check_pairable(x)
    out = _node((x.data[0::2] + x.data[1::2]) * 0.5, (x,))
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(x.data)
            full[0::2] = g * 0.5
            full[1::2] = g * 0.5
            _accum(x, full)

        out._backward = _bw
    return out


def _pair_weighted(x, w):
    """Convex combination of each row pair; the two logits in ``w`` are
    softmax-normalized and shared across positions and channels."""
    _check_pairable(x)
    z = w.data - w.data.max()
    e = np.exp(z)
    a = e / e.sum()
    out = _node(x.data[0::2] * a[0] + x.data[1::2] * a[1], (x, w))
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(x.data)
            full[0::2] = g * a[0]
            full[1::2] = g * a[1]
            _accum(x, full)
            da = np.array(
                [(g * x.data[0::2]).sum(), (g * x.data[1::2]).sum()]
            )
            _accum(w, a * (da - float(np.dot(a, da))))

        out._backward = _bw
    return out


# --------------------------------------------------------------------------
# Stage operations


def _check_width(x, config, what):
    if x.data.ndim != 2 or x.data.shape[1] != config.channels:
        raise DimensionError(
            f"{what} must be rows x {config.channels}, got {tuple(x.data.shape)}"
        )


def temporal_relation(x_in, q_in, p, config):
    """Attention + feed-forward over the visual tokens and one text token.

    The text token is row 0 of the extended sequence.  Returns the
    enhanced visual tokens (rows 1..T) and the enhanced text token.
    """
    _check_width(x_in, config, "visual tokens")
    _check_width(q_in, config, "text token")
    t = x_in.data.shape[0]

    xh = nm.concat_rows(q_in, x_in)
    ln = nm.layer_norm(xh, p.ln1_gain.value, p.ln1_bias.value)
    inv_sqrt_d = 1.0 / math.sqrt(config.head_dim)
    merged = None
    for h in range(config.heads):
        fq = nm.matmul(ln, p.wq[h].value)
        fk = nm.matmul(ln, p.wk[h].value)
        fv = nm.matmul(ln, p.wv[h].value)
        scores = nm.scale(nm.matmul(fq, nm.transpose(fk)), inv_sqrt_d)
        head = nm.matmul(nm.softmax_rows(scores), fv)
        merged = head if merged is None else nm.concat_cols(merged, head)
    xdot = nm.add(xh, nm.matmul(merged, p.wo.value))

    ln2 = nm.layer_norm(xdot, p.ln2_gain.value, p.ln2_bias.value)
    ffn = nm.matmul(nm.gelu(nm.matmul(ln2, p.ffn_w1.value)), p.ffn_w2.value)
    xbar = nm.add(xdot, ffn)
    return nm.slice_rows(xbar, 1, t + 1), nm.slice_rows(xbar, 0, 1)


def channel_correction(x_bar, q_bar, p, config):
    """Add a text-modulated global vector to every visual token."""
    _check_width(x_bar, config, "visual tokens")
    _check_width(q_bar, config, "text token")
    xg = nm.mean_rows(x_bar)
    joint = nm.concat_cols(xg, q_bar)
    hidden = nm.relu(nm.matmul(joint, p.mlp_w1.value))
    pg = nm.matmul(hidden, p.mlp_w2.value)
    return nm.add_rowvec(x_bar, pg)


def progressive_connect(x_out, x_in, p, config):
    """Halve the token count: mean-pool the stage output, weighted-pool the
    stage input, sum, then apply the linear merge projection."""
    _check_width(x_out, config, "stage output")
    _check_width(x_in, config, "stage input")
    if x_out.data.shape[0] != x_in.data.shape[0]:
        raise DimensionError(
            f"stage output/input row counts differ: "
            f"{x_out.data.shape[0]} vs {x_in.data.shape[0]}"
        )
    merged = nm.add(_pair_mean(x_out), _pair_weighted(x_in, p.pool_w.value))
    return nm.matmul(merged, p.merge_w.value)


def build_pyramid(frames, text, model):
    """Run every stage, collecting per-scale outputs.

    ``text`` is the class-name embedding on the support branch; pass
    None on the query branch to use the learned placeholder token.
    """
    config = model.config
    _check_width(frames, config, "frames")
    x = frames
    q = text if text is not None else model.query_token.value
    collected = []
    last = len(model.stages) - 1
    for n, sp in enumerate(model.stages):
        x_bar, q_bar = temporal_relation(x, q, sp, config)
        x_out = channel_correction(x_bar, q_bar, sp, config)
        collected.append((x_out, q_bar))
        if n != last:
            x = progressive_connect(x_out, x, sp, config)
            q = q_bar
    return VelocityPyramid(collected)
