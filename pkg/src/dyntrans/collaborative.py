"""Training objectives and the optimisation loop.

Two modes share one code path:

* ``layer_dropout`` trains the teacher encoder alone, skipping layers drawn
  from a :class:`~dyntrans.emformer.DropoutPlan` on every step.
* ``collaborative`` trains every encoder jointly with the weighted
  objective ``alpha * CE + beta * KLD + sum_i transducer_i``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Utterance
from .emformer import DropoutPlan
from .lattice import transducer_loss
from .model import DetModel
from .rng import RngStream
from .tensor import Tensor, as_tensor, index, mul, tsum

log = logging.getLogger(__name__)

MODES = ("layer_dropout", "collaborative")


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    mode: str = "collaborative"
    plan: DropoutPlan | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup: int = 500
    steps: int = 1000
    batch: int = 16
    clip_norm: float | None = 5.0
    freq_masks: int = 1
    max_freq_width: int = 2
    time_masks: int = 0
    max_time_width: int = 2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class TrainState:
    """Adam moments and the warm-up learning-rate schedule."""
    base_lr: float = 1e-3
    warmup: int = 500
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        if self.warmup <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, step / self.warmup)

    @classmethod
    def from_config(cls, tc: TrainConfig) -> "TrainState":
        return cls(tc.lr, tc.warmup, 0, tuple(tc.adam_betas), tc.adam_eps)


def adam_update(model: DetModel, state: TrainState, clip_norm: float | None = None) -> float:
    """Apply one Adam step from the ``.grad`` buffers; returns the gradient norm."""
    params = list(model.named_parameters())
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params}
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    state.step += 1
    lr = state.lr()
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params:
        g = grads[k] * scale
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
    return norm


# -- objectives -----------------------------------------------------------------

def _per_frame_weights(shape_bt: tuple[int, int], frame_mask) -> np.ndarray:
    """Weights ``mask / T_b`` so that summing over frames gives a per-utterance mean."""
    if frame_mask is None:
        frame_mask = np.ones(shape_bt, dtype=bool)
    fm = np.asarray(frame_mask, dtype=np.float64)
    return fm / fm.sum(axis=-1, keepdims=True)


def aux_ce_loss(aux_logps: Sequence[Tensor], labels, frame_mask=None, num_classes: int | None = None) -> Tensor:
    """``-(1/T) sum_i sum_t log P^i(c_t)`` per utterance.

    ``aux_logps`` holds one ``[B, T, K]`` (or ``[T, K]``) log-probability
    tensor per encoder.
    """
    labels = np.asarray(labels, dtype=np.int64)
    unbatched = aux_logps[0].ndim == 2
    if unbatched:
        labels = labels[None]
        frame_mask = None if frame_mask is None else np.asarray(frame_mask)[None]
    K = aux_logps[0].shape[-1] if num_classes is None else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError("alignment label out of range")
    B, T = labels.shape
    w = _per_frame_weights((B, T), frame_mask)
    bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    total = None
    for lp in aux_logps:
        lp = as_tensor(lp)
        if unbatched:
            lp = lp.reshape((1,) + lp.shape)
        picked = index(lp, (bi, ti, labels))
        term = -tsum(mul(picked, w), axis=-1)
        total = term if total is None else total + term
    return total[0] if unbatched else total


def _check_normalised(lp: np.ndarray, what: str):
    s = np.exp(lp).sum(axis=-1)
    if not np.allclose(s, 1.0, atol=1e-6):
        raise ValueError(f"{what} rows are not normalised distributions")


def kld_loss(teacher_logp, student_logps: Sequence[Tensor], frame_mask=None) -> Tensor:
    """``(1/T) sum_{i>1} sum_t KL(P_teacher || P_i)`` per utterance.

    Only the teacher's values are read, so no gradient reaches it.
    """
    t_lp = np.asarray(teacher_logp.data if isinstance(teacher_logp, Tensor) else teacher_logp,
                      dtype=np.float64)
    _check_normalised(t_lp, "teacher")
    unbatched = t_lp.ndim == 2
    if unbatched:
        t_lp = t_lp[None]
        frame_mask = None if frame_mask is None else np.asarray(frame_mask)[None]
    B, T, _ = t_lp.shape
    w = _per_frame_weights((B, T), frame_mask)
    p = np.exp(t_lp)
    with np.errstate(invalid="ignore"):
        plogp = np.where(p > 0, p * t_lp, 0.0).sum(axis=-1)
    const = (plogp * w).sum(axis=-1)
    total = None
    for lp in student_logps:
        lp = as_tensor(lp)
        _check_normalised(lp.data, "student")
        if unbatched:
            lp = lp.reshape((1,) + lp.shape)
        cross = tsum(mul(tsum(mul(lp, p), axis=-1), w), axis=-1)
        term = const - cross
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros(B))
    return total[0] if unbatched else total


def combined_loss(tr_losses: Sequence[Tensor], ce, kld, alpha: float, beta: float) -> Tensor:
    """``alpha * CE + beta * KLD + sum_i L_tr_i``."""
    total = None
    for t in tr_losses:
        total = as_tensor(t) if total is None else total + t
    if alpha:
        total = total + as_tensor(ce) * alpha
    if beta:
        total = total + as_tensor(kld) * beta
    if not np.all(np.isfinite(total.data)):
        raise FloatingPointError("non-finite loss term")
    return total


def spec_augment(features: np.ndarray, n_freq_masks: int, max_freq: int, n_time_masks: int,
                 max_time: int, rng: RngStream) -> np.ndarray:
    """Zero random frequency bands and time spans (no time warping)."""
    out = np.array(features, copy=True)
    T, F = out.shape
    if max_freq > F:
        raise ValueError("frequency mask wider than the feature dim")
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_freq + 1))
        f0 = int(rng.integers(0, F - w + 1))
        out[:, f0:f0 + w] = 0
    for _ in range(n_time_masks):
        w = int(rng.integers(0, min(max_time, T) + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[t0:t0 + w, :] = 0
    return out


# -- batching -----------------------------------------------------------------------

@dataclass
class Batch:
    feats: np.ndarray
    lengths: np.ndarray
    tokens: list[list[int]]
    pred_inputs: np.ndarray
    labels: np.ndarray
    frame_mask: np.ndarray


def collate(feats: Sequence[np.ndarray], utts: Sequence[Utterance], blank: int) -> Batch:
    B = len(utts)
    lengths = np.array([f.shape[0] for f in feats])
    T = int(lengths.max())
    F = feats[0].shape[1]
    X = np.zeros((B, T, F))
    labels = np.zeros((B, T), dtype=np.int64)
    for b, (f, u) in enumerate(zip(feats, utts)):
        X[b, :f.shape[0]] = f
        labels[b, :f.shape[0]] = u.alignment
    Umax = max(len(u.tokens) for u in utts)
    pred_in = np.full((B, Umax + 1), blank, dtype=np.int64)
    for b, u in enumerate(utts):
        pred_in[b, 1:len(u.tokens) + 1] = u.tokens
    mask = np.arange(T)[None, :] < lengths[:, None]
    return Batch(X, lengths, [list(u.tokens) for u in utts], pred_in, labels, mask)


def forward_losses(model: DetModel, batch: Batch, loss_cfg: LossConfig, rng: RngStream | None,
                   training: bool, skip=frozenset()) -> dict:
    """Per-utterance loss terms for a collated batch."""
    n_enc = model.num_encoders if loss_cfg.mode == "collaborative" else 1
    outs = model.collab_forward(batch.feats, batch.lengths, rng, training, skip, n_enc)
    pred = model.predictor.forward_batch(batch.pred_inputs)
    tr = []
    for h in outs:
        logits = model.joiner(h.reshape(h.shape[:2] + (1, h.shape[2])),
                              pred.reshape((pred.shape[0], 1) + pred.shape[1:]))
        tr.append(transducer_loss(logits, batch.tokens, batch.lengths, model.blank))
    B = len(batch.tokens)
    ce = kld = Tensor(np.zeros(B))
    if loss_cfg.alpha > 0 or (loss_cfg.beta > 0 and n_enc > 1):
        logps = [model.aux_head.log_probs(h) for h in outs]
        if loss_cfg.alpha > 0:
            ce = aux_ce_loss(logps, batch.labels, batch.frame_mask)
        if loss_cfg.beta > 0 and n_enc > 1:
            kld = kld_loss(logps[0], logps[1:], batch.frame_mask)
    per_utt = combined_loss(tr, ce, kld, loss_cfg.alpha, loss_cfg.beta)
    return {"per_utt": per_utt, "tr": tr, "ce": ce, "kld": kld}


def train_step(batch_utts: Sequence[Utterance], model: DetModel, state: TrainState,
               loss_cfg: LossConfig, rng: RngStream, train_cfg: TrainConfig | None = None) -> dict:
    """One optimisation step; returns the loss breakdown (batch means)."""
    if not batch_utts:
        raise ValueError("empty batch")
    tc = train_cfg or TrainConfig()
    feats = []
    for u in batch_utts:
        f = np.asarray(u.features, dtype=np.float64)
        if tc.freq_masks or tc.time_masks:
            f = spec_augment(f, tc.freq_masks, tc.max_freq_width, tc.time_masks, tc.max_time_width, rng)
        feats.append(f)
    batch = collate(feats, batch_utts, model.blank)
    skip = frozenset()
    if loss_cfg.mode == "layer_dropout" and loss_cfg.plan is not None:
        skip = frozenset(i - 1 for i in loss_cfg.plan.sample(rng))
    terms = forward_losses(model, batch, loss_cfg, rng, True, skip)
    loss = terms["per_utt"].mean()
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    model.zero_grad()
    loss.backward()
    gnorm = adam_update(model, state, tc.clip_norm)
    return {
        "step": state.step,
        "loss": loss.item(),
        "tr": [float(t.data.mean()) for t in terms["tr"]],
        "ce": float(terms["ce"].data.mean()),
        "kld": float(terms["kld"].data.mean()),
        "lr": state.lr(),
        "grad_norm": gnorm,
        "dropped": sorted(i + 1 for i in skip),
    }


def batch_indices(seed: int, step: int, n: int, batch: int) -> list[int]:
    """Indices for 0-based ``step``: a window into a stream of per-epoch permutations."""
    out = []
    pos = step * batch
    root = RngStream(seed)
    cur_epoch, perm = -1, None
    for p in range(pos, pos + batch):
        epoch = p // n
        if epoch != cur_epoch:
            perm = root.fork(100_000 + epoch).permutation(n)
            cur_epoch = epoch
        out.append(int(perm[p % n]))
    return out


def train(model: DetModel, utts: Sequence[Utterance], train_cfg: TrainConfig, loss_cfg: LossConfig,
          state: TrainState, rng: RngStream, data_seed: int, steps: int | None = None,
          log_every: int = 100) -> list[dict]:
    """Run ``steps`` updates (default: up to ``train_cfg.steps`` total)."""
    target = train_cfg.steps if steps is None else state.step + steps
    history = []
    while state.step < target:
        idx = batch_indices(data_seed, state.step, len(utts), train_cfg.batch)
        info = train_step([utts[i] for i in idx], model, state, loss_cfg, rng, train_cfg)
        history.append(info)
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f tr %s lr %.2e", state.step, info["loss"],
                     ["%.3f" % t for t in info["tr"]], info["lr"])
    return history
