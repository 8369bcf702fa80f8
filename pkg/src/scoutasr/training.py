"""Toy-scale training for the scout and the recognition network."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .ctc import ctc_log_likelihood, ctc_viterbi_align
from .decoding import decoder_log_probs
from .encoder import RecognizerModel, ctc_log_posteriors, encode_offline, encode_with_boundaries
from .metrics import boundary_edit_distance, merge_boundary_evals
from .scout import ScoutModel, raw_boundaries, scout_forward, scout_logits, scout_loss, threshold_decide
from .transformer import ModelDims

log = logging.getLogger(__name__)

BOUNDARY_MODES = ("sampled", "golden", "thresholded")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    offline_epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    gamma: float = 0.7
    boundary_mode: str = "golden"
    sigma: float = 0.5
    n_average: int = 5
    pos_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}")
        if self.lr <= 0 or self.batch_size < 1 or self.n_average < 1:
            raise ValueError("invalid optimiser settings")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        scale = self.lr * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            self.params[k] = self.params[k] - scale * self.m[k] / (np.sqrt(self.v[k]) + self.eps)
        if not nx.all_finite(self.params.values()):
            raise FloatingPointError("non-finite parameter after optimiser step")


def average_checkpoints(checkpoints: Sequence[dict]) -> dict:
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    return {k: np.mean([c[k] for c in checkpoints], axis=0) for k in checkpoints[0]}


def _run_epoch(params: dict, optimizer: Adam, items: list, loss_fn: Callable, batch_size: int, rng) -> float:
    order = rng.permutation(len(items))
    total = 0.0
    for start in range(0, len(order), batch_size):
        batch = order[start : start + batch_size]
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        for idx in batch:
            nodes = nx.make_parameters(params)
            loss = loss_fn(nodes, items[idx])
            for k, g in nx.gradient(loss, nodes).items():
                grads[k] += g
            total += float(loss.value)
        optimizer.step({k: g / len(batch) for k, g in grads.items()})
    return total / len(items)


# --------------------------------------------------------------------- scout


def scout_boundary_report(model: ScoutModel, utterances, sigma: float) -> dict:
    """Pooled edit-distance counts and F1 of thresholded boundaries against the alignments."""
    evals = [boundary_edit_distance(raw_boundaries(scout_forward(u.features, model), sigma), u.reference_boundaries()) for u in utterances]
    return merge_boundary_evals(evals)


def train_scout(utterances, dims: ModelDims, config: TrainConfig = TrainConfig(), heldout=None) -> tuple[ScoutModel, list]:
    if not utterances:
        raise ValueError("cannot train on an empty corpus")
    model = ScoutModel.initialize(dims, seed=config.seed)
    items = [(u.features, u.boundary_labels()) for u in utterances]

    def loss_fn(nodes, item):
        x, labels = item
        return scout_loss(nx.sigmoid(scout_logits(x, nodes, dims)), labels, config.pos_weight)

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.lr)
    history, snapshots = [], []
    for epoch in range(config.epochs):
        loss = _run_epoch(model.params, opt, items, loss_fn, config.batch_size, rng)
        model.params = opt.params
        record = {"epoch": epoch + 1, "loss": loss}
        if heldout:
            report = scout_boundary_report(model, heldout, config.sigma)
            record.update({k: report[k] for k in ("precision", "recall", "f1")})
        log.info("scout %s", record)
        history.append(record)
        snapshots.append({k: v.copy() for k, v in model.params.items()})
    model.params = average_checkpoints(snapshots[-config.n_average :])
    return model, history


# ----------------------------------------------------------------------- RN


def sample_boundaries(p, mode: str = "sampled", rng=None, labels=None, sigma: float = 0.5) -> np.ndarray:
    """Segmentation used while fine-tuning the recognizer.

    ``sampled`` draws each boundary from Bernoulli(p_i), ``golden`` takes the
    0/1 ``labels`` and ``thresholded`` applies ``sigma``.  The last frame is
    always a boundary.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if mode == "sampled":
        rng = np.random.default_rng(rng)
        chosen = rng.random(p.size) < p
    elif mode == "golden":
        if labels is None:
            raise ValueError("golden mode needs labels")
        chosen = np.asarray(labels).reshape(-1) == 1
    elif mode == "thresholded":
        return threshold_decide(p, sigma)
    else:
        raise ValueError(f"unknown boundary mode {mode!r}")
    g = np.flatnonzero(chosen) + 1
    if g.size == 0 or g[-1] != p.size:
        g = np.append(g, p.size)
    return g.astype(np.int64)


def attention_context(boundaries, triggers, n_frames: int) -> np.ndarray:
    """Encoder rows visible to each decoder position.

    Token k sees up to the end of the segment holding its trigger frame; the
    final end-token position sees the whole utterance.
    """
    ends = tf.segment_ends(boundaries, n_frames)
    per_token = [int(ends[t - 1]) for t in triggers]
    return np.array(per_token + [n_frames], dtype=np.int64)


def joint_loss_terms(features, tokens, boundaries, triggers, model: RecognizerModel, params) -> tuple[nx.Node, nx.Node]:
    """``(log P_s2s, log P_ctc)`` of ``tokens`` as graph nodes."""
    h = encode_with_boundaries(features, boundaries, model, params)
    n = h.value.shape[0]
    tokens = [int(t) for t in tokens]
    if len(triggers) != len(tokens):
        raise ValueError(f"{len(triggers)} trigger frames for {len(tokens)} tokens")
    ctc_ll = ctc_log_likelihood(ctc_log_posteriors(h, params), tokens, model.blank)
    if not np.isfinite(ctc_ll.value):
        raise ValueError(f"{len(tokens)} tokens do not fit in {n} frames")
    allowed = attention_context(boundaries, triggers, n)
    logp = decoder_log_probs(model, params, [model.sos] + tokens, h, allowed)
    targets = np.array(tokens + [model.eos])
    s2s_ll = nx.sum_(nx.take(logp, (np.arange(len(targets)), targets)))
    return s2s_ll, ctc_ll


def joint_loss(features, tokens, boundaries, triggers, model: RecognizerModel, gamma: float = 0.7, params=None) -> nx.Node:
    """``-gamma * log P_s2s - (1 - gamma) * log P_ctc``."""
    params = model.nodes() if params is None else params
    s2s_ll, ctc_ll = joint_loss_terms(features, tokens, boundaries, triggers, model, params)
    return -(s2s_ll * gamma + ctc_ll * (1.0 - gamma))


def viterbi_triggers(model: RecognizerModel, features, tokens) -> np.ndarray:
    """Trigger frames from the offline (unmasked) model's best CTC path."""
    params = model.nodes()
    post = ctc_log_posteriors(encode_offline(features, model, params), params).value
    triggers, _ = ctc_viterbi_align(post, tokens, model.blank)
    return triggers


def teacher_forced_accuracy(model: RecognizerModel, utterances, boundaries=None) -> float:
    """Fraction of decoder targets (tokens and end token) predicted by argmax."""
    params = model.nodes()
    right = total = 0
    for n, u in enumerate(utterances):
        g = [u.n_frames] if boundaries is None else boundaries[n]
        h = encode_with_boundaries(u.features, g, model, params)
        logp = decoder_log_probs(model, params, [model.sos] + list(u.tokens), h, h.value.shape[0]).value
        targets = np.array(list(u.tokens) + [model.eos])
        right += int((logp.argmax(axis=1) == targets).sum())
        total += len(targets)
    return right / total


def train_rn(
    utterances,
    dims: ModelDims,
    vocab_size: int,
    config: TrainConfig = TrainConfig(),
    scout: ScoutModel | None = None,
    n_decoder_layers: int = 2,
    init: RecognizerModel | None = None,
) -> tuple[RecognizerModel, list]:
    """Offline pre-training followed by streaming fine-tuning.

    Phase one trains with a single whole-utterance segment.  Trigger frames
    are then fixed from that model's Viterbi paths, and phase two trains with
    segmentations drawn per epoch according to ``config.boundary_mode``.  The
    returned parameters average the last ``n_average`` epoch checkpoints.
    """
    if not utterances:
        raise ValueError("cannot train on an empty corpus")
    if config.boundary_mode in ("sampled", "thresholded") and scout is None:
        raise ValueError(f"boundary mode {config.boundary_mode!r} needs a scout model")
    model = init or RecognizerModel.initialize(dims, vocab_size, n_decoder_layers, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.lr)
    history = []

    def loss_fn(nodes, item):
        x, tokens, g, triggers = item
        return joint_loss(x, tokens, g, triggers, model, config.gamma, nodes)

    offline = [(u.features, u.tokens, [u.n_frames], [u.n_frames] * len(u.tokens)) for u in utterances]
    for epoch in range(config.offline_epochs):
        loss = _run_epoch(model.params, opt, offline, loss_fn, config.batch_size, rng)
        model.params = opt.params
        history.append({"phase": "offline", "epoch": epoch + 1, "loss": loss})
        log.info("rn %s", history[-1])

    triggers = [viterbi_triggers(model, u.features, u.tokens) for u in utterances]
    probs = [scout_forward(u.features, scout) for u in utterances] if scout is not None else None
    snapshots = []
    for epoch in range(config.epochs):
        items = []
        for n, u in enumerate(utterances):
            p = probs[n] if probs is not None else np.zeros(u.n_frames)
            g = sample_boundaries(p, config.boundary_mode, rng, labels=u.boundary_labels(), sigma=config.sigma)
            items.append((u.features, u.tokens, g, triggers[n]))
        loss = _run_epoch(model.params, opt, items, loss_fn, config.batch_size, rng)
        model.params = opt.params
        history.append({"phase": "streaming", "epoch": epoch + 1, "loss": loss})
        log.info("rn %s", history[-1])
        snapshots.append({k: v.copy() for k, v in model.params.items()})
    if snapshots:
        model.params = average_checkpoints(snapshots[-config.n_average :])
    return model, history
