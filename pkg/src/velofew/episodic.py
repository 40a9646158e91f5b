"""Episodic task sampling, prototype classification, training, evaluation.

An episode is one n-way k-shot task: support videos define the classes,
query videos are scored against per-class prototype pyramids by the
fused alignment distance.  Training minimizes cross-entropy over the
soft-min distances; evaluation uses the hard metric and nearest
prototype.  Everything is deterministic given (seed, config, bank).
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import alignment as al
from . import numerics as nm
from . import stages as st
from .errors import ConfigError, ContractError, DataError
from .ingest import check_pairing
from .numerics import Tensor


@dataclass
class Episode:
    """One sampled n-way k-shot task over bank video ids."""

    way_classes: list  # class ids, episode label = position in this list
    support: list  # per class position, list of k video ids
    query: list  # (video id, episode label) pairs


@dataclass
class TaskConfig:
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 1
    episodes: int = 200
    steps: int = 500
    lr: float = 1e-3
    tau: float = 0.1
    gamma: float = 0.1
    metric: str = "otam"
    seed: int = 0
    scale_mask: list | None = None  # 0/1 per scale; None = all enabled

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1 or self.q_per_class < 1:
            raise ConfigError(
                f"n_way/k_shot/q_per_class must be >= 1, got "
                f"{self.n_way}/{self.k_shot}/{self.q_per_class}"
            )
        if self.steps < 0 or self.episodes < 0:
            raise ConfigError("steps and episodes must be >= 0")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.tau <= 0 or self.gamma <= 0:
            raise ConfigError("tau and gamma must be positive")
        if self.metric not in ("otam", "bimhm"):
            raise ConfigError(f"metric must be otam or bimhm, got {self.metric!r}")


@dataclass
class EvalReport:
    episodes: int
    mean_accuracy: float
    seed: int
    config: dict = field(default_factory=dict)


def sample_episode(bank, n_way, k_shot, q_per_class, rng_seed):
    """Draw one episode: uniform classes, uniform videos, no replacement."""
    need = k_shot + q_per_class
    index = bank.class_index()
    eligible = sorted(c for c, vids in index.items() if len(vids) >= need)
    if len(eligible) < n_way:
        raise DataError(
            f"need {n_way} classes with >= {need} videos each; "
            f"only {len(eligible)} of {len(index)} classes qualify"
        )
    rng = np.random.default_rng(rng_seed)
    way = [int(c) for c in rng.choice(eligible, size=n_way, replace=False)]
    support, query = [], []
    for pos, cls in enumerate(way):
        picked = rng.choice(index[cls], size=need, replace=False)
        support.append([int(v) for v in picked[:k_shot]])
        query.extend((int(v), pos) for v in picked[k_shot:])
    return Episode(way, support, query)


def compute_prototypes(per_class_pyramids):
    """Element-wise mean of each class's support pyramids, on the tape."""
    protos = []
    for pyrs in per_class_pyramids:
        if not pyrs:
            raise ContractError("a class has no support pyramids")
        first = pyrs[0]
        for p in pyrs[1:]:
            if p.n_scales != first.n_scales or p.token_counts() != first.token_counts():
                raise ContractError(
                    f"ragged support pyramids: {p.token_counts()} "
                    f"vs {first.token_counts()}"
                )
        k = len(pyrs)
        merged = []
        for n in range(first.n_scales):
            acc_x = pyrs[0].visual(n)
            acc_q = pyrs[0].text(n)
            for p in pyrs[1:]:
                acc_x = nm.add(acc_x, p.visual(n))
                acc_q = nm.add(acc_q, p.text(n))
            merged.append((nm.scale(acc_x, 1.0 / k), nm.scale(acc_q, 1.0 / k)))
        protos.append(st.VelocityPyramid(merged))
    return protos


def effective_alpha(params, scale_mask, on_tape=False):
    """Fusion weights with disabled scales zeroed out."""
    mask = None
    if scale_mask is not None:
        mask = np.asarray(scale_mask, dtype=float)
        if mask.size != params.config.scales:
            raise ConfigError(
                f"scale mask length {mask.size} != scale count {params.config.scales}"
            )
        if not mask.any():
            raise ConfigError("scale mask disables every velocity scale")
    if on_tape and params.alpha_raw is not None:
        alpha = params.alpha_tensor()
        if mask is not None:
            alpha = nm.mul_array(alpha, mask[None, :])
        return alpha
    alpha = params.alpha_array()
    if mask is not None:
        alpha = alpha * mask
    return alpha


def classify(query_pyramid, prototypes, alpha, metric="otam", tau=0.1,
             soft=False, gamma=0.1):
    """Class probabilities for one query: softmax of -distance/tau.

    The predicted label is the argmax, equivalently the nearest
    prototype by fused distance (ties go to the lowest class index).
    """
    if not prototypes:
        raise ContractError("classify needs at least one prototype")
    fused = [
        al.distance_profile(proto, query_pyramid, alpha, metric=metric,
                            soft=soft, gamma=gamma).fused
        for proto in prototypes
    ]
    if soft:
        logits = nm.stack_row([nm.scale(d, -1.0 / tau) for d in fused])
    else:
        logits = Tensor(np.array([[-d / tau for d in fused]]))
    return nm.softmax_rows(logits)


def predicted_label(probs):
    return int(np.argmax(probs.data[0]))


def episode_loss(probabilities, labels):
    """Mean cross-entropy over queries, probabilities clamped at 1e-12."""
    rows = probabilities if isinstance(probabilities, list) else [
        nm.slice_rows(probabilities, i, i + 1)
        for i in range(probabilities.data.shape[0])
    ]
    if len(rows) != len(labels):
        raise ContractError(
            f"{len(rows)} probability rows for {len(labels)} labels"
        )
    acc = None
    for row, label in zip(rows, labels):
        if abs(float(row.data.sum()) - 1.0) > 1e-6:
            raise ContractError("probability row does not sum to 1")
        term = nm.neg(nm.log_clamped(nm.pick(row, 0, int(label)), 1e-12))
        acc = term if acc is None else nm.add(acc, term)
    return nm.scale(acc, 1.0 / len(rows))


def _support_text(table, class_id):
    return Tensor(table.embeddings[class_id])


def _episode_tensors(bank, episode):
    frames = {}
    for vids in episode.support:
        for v in vids:
            frames[v] = Tensor(bank.videos[v].frames)
    for v, _ in episode.query:
        frames[v] = Tensor(bank.videos[v].frames)
    return frames


def episode_step(bank, table, params, episode, config, soft):
    """Forward one episode end to end; returns (probability rows, labels)."""
    frames = _episode_tensors(bank, episode)
    support_pyrs = [
        [
            st.build_pyramid(frames[v], _support_text(table, cls), params)
            for v in vids
        ]
        for cls, vids in zip(episode.way_classes, episode.support)
    ]
    protos = compute_prototypes(support_pyrs)
    alpha = effective_alpha(params, config.scale_mask, on_tape=soft)
    rows, labels = [], []
    for vid, label in episode.query:
        qp = st.build_pyramid(frames[vid], None, params)
        rows.append(
            classify(qp, protos, alpha, metric=config.metric, tau=config.tau,
                     soft=soft, gamma=config.gamma)
        )
        labels.append(label)
    return rows, labels


class Adam:
    """First/second-moment adaptive optimizer with stepwise lr decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 total_steps=None, milestones=(0.6, 0.8), decay=0.1):
        self.params = list(params)
        self.base_lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay = decay
        self.t = 0
        self.boundaries = []
        if total_steps:
            self.boundaries = [int(f * total_steps) for f in milestones]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self):
        drops = sum(1 for b in self.boundaries if self.t > b)
        return self.base_lr * (self.decay ** drops)

    def step(self):
        self.t += 1
        lr = self.current_lr()
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1**self.t)
            vhat = v / (1.0 - self.b2**self.t)
            p.data[...] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def train(bank, table, config, model_config=None, params=None):
    """Episodic training loop; returns (params, [(step, loss), ...])."""
    check_pairing(bank, table)
    if model_config is None:
        model_config = st.ModelConfig(channels=bank.channels)
    if model_config.channels != bank.channels:
        raise ConfigError(
            f"model channels {model_config.channels} != bank channels {bank.channels}"
        )
    st.validate_frame_plan(bank.frames_per_video, model_config.scales)
    if params is None:
        params = st.ModelParams.init(model_config, seed=config.seed)
    opt = Adam(params.all_params(), lr=config.lr, total_steps=config.steps)
    trace = []
    for step in range(config.steps):
        episode = sample_episode(
            bank, config.n_way, config.k_shot, config.q_per_class,
            rng_seed=(config.seed, step),
        )
        rows, labels = episode_step(bank, table, params, episode, config, soft=True)
        loss = episode_loss(rows, labels)
        nm.zero_grads(params.all_params())
        loss.backward()
        opt.step()
        trace.append((step, loss.item()))
    return params, trace


def evaluate(bank, table, params, config):
    """Mean accuracy over independently seeded episodes (hard metric)."""
    check_pairing(bank, table)
    st.validate_frame_plan(bank.frames_per_video, params.config.scales)
    if params.config.channels != bank.channels:
        raise ConfigError(
            f"model channels {params.config.channels} != bank channels {bank.channels}"
        )
    accuracies = []
    with nm.no_grad():
        for i in range(config.episodes):
            episode = sample_episode(
                bank, config.n_way, config.k_shot, config.q_per_class,
                rng_seed=config.seed ^ i,
            )
            rows, labels = episode_step(
                bank, table, params, episode, config, soft=False
            )
            hits = [
                1.0 if predicted_label(r) == lbl else 0.0
                for r, lbl in zip(rows, labels)
            ]
            accuracies.append(sum(hits) / len(hits))
    mean_acc = sum(accuracies) / len(accuracies) if accuracies else 0.0
    return EvalReport(
        episodes=config.episodes,
        mean_accuracy=mean_acc,
        seed=config.seed,
        config=asdict(config),
    )
