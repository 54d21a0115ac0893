"""Dataset assembly, Adam training, and the evaluation suite.

Samples are flow pairs taken every sample period along an episode; splits
are stratified at the episode level so no episode leaks across train,
validation, and test. Evaluation covers rank-based ROC-AUC, a
pointing-game localization score against duel ground truth, and
time-windowed AUC against a fixed Stable reference pool.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow, gradcam
from .config import Config
from .errors import TrainingError, ValidationError
from .model import Model, forward_with_cache, predict
from .simulate import UNSTABLE, Episode

log = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "val", "test")
POINTING_DILATE_PX = 32.0


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class EpisodeSamples:
    """All samples cut from one episode, with its provenance id."""

    episode_id: str
    label: int
    samples: list[flow.Sample]


def sample_times(episode_len: float, period: float,
                 frame_gap: float = flow.FRAME_GAP_S,
                 pair_gap: float = flow.PAIR_GAP_S) -> list[float]:
    """Start times of every flow pair that fits inside the episode."""
    if period <= 0:
        raise ValidationError(f"sample period must be positive, got {period}")
    times = []
    t = 0.0
    while t + pair_gap + frame_gap <= episode_len + 1e-9:
        times.append(t)
        t += period
    return times


def sample_at(ep: Episode, t: float, *, size: int = flow.SAMPLE_SIZE,
              alpha: float = flow.HS_ALPHA, iters: int = flow.HS_ITERS,
              frame_gap: float = flow.FRAME_GAP_S,
              pair_gap: float = flow.PAIR_GAP_S) -> flow.Sample:
    """Render the four frames at t, estimate both flows, pack one sample."""
    a1, b1, a2, b2 = flow.pair_frame_times(t, frame_gap, pair_gap)
    frames = {u: ep.frame(ep.frame_at(u)) for u in {a1, b1, a2, b2}}
    f1 = flow.downsample(flow.horn_schunck(frames[a1], frames[b1], alpha, iters), size)
    f2 = flow.downsample(flow.horn_schunck(frames[a2], frames[b2], alpha, iters), size)
    return flow.make_sample(f1, f2, ep.label, t)


def samples_from_episode(ep: Episode, episode_id: str, *,
                         period: float = 120.0, **flow_kw) -> EpisodeSamples:
    times = sample_times(ep.cfg.episode_len, period)
    samples = [sample_at(ep, t, **flow_kw) for t in times]
    return EpisodeSamples(episode_id, ep.label, samples)


@dataclass
class Dataset:
    """Parallel sample/provenance/split arrays; splits never share episodes."""

    samples: list[flow.Sample]
    episode_ids: list[str]
    split_tags: list[str]

    def __post_init__(self):
        if not len(self.samples) == len(self.episode_ids) == len(self.split_tags):
            raise ValidationError("samples, episode_ids, split_tags must align")
        episode_split: dict[str, str] = {}
        for eid, tag in zip(self.episode_ids, self.split_tags):
            if tag not in SPLIT_TAGS:
                raise ValidationError(f"unknown split tag {tag!r}")
            if episode_split.setdefault(eid, tag) != tag:
                raise ValidationError(f"episode {eid} spans two splits")

    def indices(self, tag: str) -> list[int]:
        return [i for i, t in enumerate(self.split_tags) if t == tag]

    def tensors(self, tag: str) -> list[np.ndarray]:
        return [self.samples[i].tensor for i in self.indices(tag)]

    def labels(self, tag: str) -> list[int]:
        return [self.samples[i].label for i in self.indices(tag)]


def split_dataset(groups: list[EpisodeSamples],
                  fracs: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> Dataset:
    """Episode-level stratified shuffle split, deterministic under seed."""
    if len(fracs) != 3 or any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValidationError(f"fracs must be three positive numbers summing to 1, got {fracs}")
    ids = [g.episode_id for g in groups]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate episode ids")
    by_label: dict[int, list[EpisodeSamples]] = {}
    for g in sorted(groups, key=lambda g: g.episode_id):
        by_label.setdefault(g.label, []).append(g)
    for label, gs in by_label.items():
        if len(gs) < 5:
            raise ValidationError(
                f"need at least 5 episodes per label, label {label} has {len(gs)}")

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in sorted(by_label):
        gs = by_label[label]
        order = rng.permutation(len(gs))
        n = len(gs)
        n_train = int(round(fracs[0] * n))
        n_val = int(round(fracs[1] * n))
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
        for rank, idx in enumerate(order):
            tag = ("train" if rank < n_train
                   else "val" if rank < n_train + n_val
                   else "test")
            assignment[gs[idx].episode_id] = tag

    samples, episode_ids, split_tags = [], [], []
    for g in sorted(groups, key=lambda g: g.episode_id):
        for s in g.samples:
            samples.append(s)
            episode_ids.append(g.episode_id)
            split_tags.append(assignment[g.episode_id])
    return Dataset(samples, episode_ids, split_tags)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 32
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValidationError("lr and eps must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError("adam betas must lie in (0, 1)")
        if self.batch < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("batch, max_epochs, patience must be >= 1")

    @classmethod
    def from_config(cls, cfg: Config, seed: int = 0) -> "Hyperparams":
        t = cfg.section("train")
        return cls(lr=float(t["lr"]), beta1=float(t["beta1"]),
                   beta2=float(t["beta2"]), eps=float(t["eps"]),
                   batch=int(t["batch"]), max_epochs=int(t["max_epochs"]),
                   patience=int(t["patience"]), seed=seed)


@dataclass
class TrainResult:
    model: Model
    curve: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int


def _mean_loss(model: Model, tensors: list[np.ndarray], labels: list[int]) -> float:
    total = 0.0
    for x, y in zip(tensors, labels):
        fp = forward_with_cache(model, x)
        total += ad.bce_loss(fp.prob, y).item()
    return total / len(tensors)


def loss_curve_csv(curve: list[tuple[int, float, float]]) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{tr!r},{va!r}" for e, tr, va in curve]
    return "\n".join(lines) + "\n"


def train(model: Model, dataset: Dataset, hp: Hyperparams) -> TrainResult:
    """Adam over seeded shuffled mini-batches, early stopping on val loss.

    Returns the parameters of the best validation epoch, not the last.
    """
    train_x = dataset.tensors("train")
    train_y = dataset.labels("train")
    val_x = dataset.tensors("val")
    val_y = dataset.labels("val")
    if not train_x or not val_x:
        raise ValidationError("dataset needs non-empty train and val splits")
    if hp.batch > len(train_x):
        raise ValidationError(f"batch {hp.batch} exceeds train size {len(train_x)}")

    model = model.copy()
    names = list(model.params)
    m1 = {k: np.zeros_like(model.params[k]) for k in names}
    m2 = {k: np.zeros_like(model.params[k]) for k in names}
    t_step = 0
    rng = np.random.default_rng(hp.seed)

    best = model.copy()
    best_val = np.inf
    best_epoch = 0
    since_best = 0
    curve: list[tuple[int, float, float]] = []

    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(len(train_x))
        epoch_loss = 0.0
        for start in range(0, len(order), hp.batch):
            batch = order[start:start + hp.batch]
            grad_sum = {k: np.zeros_like(model.params[k]) for k in names}
            for i in batch:
                fp = forward_with_cache(model, train_x[i])
                loss = ad.bce_loss(fp.prob, train_y[i])
                epoch_loss += loss.item()
                grads = ad.backward(loss)
                for k in names:
                    grad_sum[k] += grads.grad(fp.params[k])
            t_step += 1
            for k in names:
                g = grad_sum[k] / len(batch)
                m1[k] = hp.beta1 * m1[k] + (1.0 - hp.beta1) * g
                m2[k] = hp.beta2 * m2[k] + (1.0 - hp.beta2) * g * g
                m_hat = m1[k] / (1.0 - hp.beta1 ** t_step)
                v_hat = m2[k] / (1.0 - hp.beta2 ** t_step)
                model.params[k] -= hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)

        train_loss = epoch_loss / len(order)
        val_loss = _mean_loss(model, val_x, val_y)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        curve.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= hp.patience:
                break
    return TrainResult(model=best, curve=curve, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# evaluation


def auc_roc(scores, labels) -> float:
    """Mann-Whitney rank AUC: ordered pairs plus half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be equal-length vectors")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValidationError("labels must be 0 or 1")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("auc needs both classes present")
    greater = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (greater + 0.5 * ties) / (pos.size * neg.size)


def accuracy_at_half(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return float(((scores > 0.5).astype(int) == labels).mean())


@dataclass
class PointingSample:
    """One Unstable sample plus the duel boxes active in its flow window."""

    tensor: np.ndarray
    boxes: list[tuple[float, float, float, float]]
    arena: int


def pointing_sample(ep: Episode, t: float, *, frame_gap: float = flow.FRAME_GAP_S,
                    pair_gap: float = flow.PAIR_GAP_S, **flow_kw) -> PointingSample:
    """Build the pointing-game view of the sample taken at t."""
    s = sample_at(ep, t, frame_gap=frame_gap, pair_gap=pair_gap, **flow_kw)
    t_end = t + pair_gap + frame_gap
    frame_lo = ep.frame_at(t)
    frame_hi = ep.frame_at(t_end)
    boxes = []
    for e in ep.duels_active(t, t_end):
        for k in range(frame_lo, frame_hi + 1):
            if k in e.bbox_per_frame:
                boxes.append(e.bbox_per_frame[k])
    return PointingSample(s.tensor, boxes, ep.cfg.arena)


def duels_in_window(ep: Episode, t: float, frame_gap: float = flow.FRAME_GAP_S,
                    pair_gap: float = flow.PAIR_GAP_S) -> int:
    return len(ep.duels_active(t, t + pair_gap + frame_gap))


def boxes_in_window(events: list[dict], t: float, frame_dt: float,
                    frame_gap: float = flow.FRAME_GAP_S,
                    pair_gap: float = flow.PAIR_GAP_S) -> list[tuple[float, float, float, float]]:
    """Window duel boxes from parsed event records (the on-disk JSONL shape)."""
    t_end = t + pair_gap + frame_gap
    k_lo = int(round(t / frame_dt))
    k_hi = int(round(t_end / frame_dt))
    boxes = []
    for e in events:
        end = e["t_end"] if e["t_end"] is not None else np.inf
        if e["t_start"] <= t_end and end >= t:
            for k in range(k_lo, k_hi + 1):
                box = e["bbox"].get(str(k))
                if box is not None:
                    boxes.append(tuple(box))
    return boxes


def _dilated_union_area(boxes, arena: int, r: float) -> float:
    mask = np.zeros((arena, arena), dtype=bool)
    for x0, y0, x1, y1 in boxes:
        i0 = max(0, int(np.floor(y0 - r)))
        i1 = min(arena, int(np.ceil(y1 + r)))
        j0 = max(0, int(np.floor(x0 - r)))
        j1 = min(arena, int(np.ceil(x1 + r)))
        mask[i0:i1, j0:j1] = True
    return float(mask.sum())


def pointing_game(model: Model, samples: list[PointingSample],
                  dilate_r: float = POINTING_DILATE_PX,
                  top_frac: float = 0.05) -> tuple[float, float]:
    """Fraction of samples whose saliency argmax hits a dilated duel box.

    Also returns the chance level: mean dilated-box-union area over the
    arena area.
    """
    if not samples:
        raise ValidationError("pointing game needs at least one sample")
    hits = 0
    baseline = 0.0
    for ps in samples:
        if not ps.boxes:
            raise ValidationError("every pointing-game sample needs an active duel box")
        fp = forward_with_cache(model, ps.tensor)
        m = gradcam.importance_from_forward(fp, "unstable")
        gated = gradcam.gate_top_fraction(m, top_frac)
        up = gradcam.upsample_bicubic(gated, ps.arena, ps.arena)
        i, j = np.unravel_index(int(np.argmax(up.values)), up.values.shape)
        x, y = j + 0.5, i + 0.5
        if any(x0 - dilate_r <= x <= x1 + dilate_r and y0 - dilate_r <= y <= y1 + dilate_r
               for x0, y0, x1, y1 in ps.boxes):
            hits += 1
        baseline += _dilated_union_area(ps.boxes, ps.arena, dilate_r) / ps.arena ** 2
    return hits / len(samples), baseline / len(samples)


def windowed_auc(model: Model, timeline: list[flow.Sample],
                 reference: list[flow.Sample], window: int) -> list[float]:
    """AUC of each contiguous Unstable window against a fixed Stable pool."""
    if window < 4:
        raise ValidationError(f"window must be >= 4 samples, got {window}")
    if len(reference) < 4:
        raise ValidationError(f"reference pool must hold >= 4 samples, "
                              f"got {len(reference)}")
    if any(s.label != UNSTABLE for s in timeline):
        raise ValidationError("timeline must contain only Unstable samples")
    ref_scores = [predict(model, s.tensor) for s in reference]
    out = []
    for start in range(0, len(timeline), window):
        chunk = timeline[start:start + window]
        if len(chunk) < window:
            log.info("windowed_auc: skipping tail window of %d < %d samples",
                     len(chunk), window)
            break
        scores = [predict(model, s.tensor) for s in chunk] + ref_scores
        labels = [1] * len(chunk) + [0] * len(ref_scores)
        out.append(auc_roc(scores, labels))
    return out


@dataclass
class EvalReport:
    """Flat JSON-serializable evaluation summary."""

    auc: float | None = None
    accuracy: float | None = None
    pointing_accuracy: float | None = None
    random_baseline: float | None = None
    per_episode_auc: list[float] = field(default_factory=list)
    loss_curve: list[tuple[int, float, float]] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {"auc": self.auc,
                "accuracy": self.accuracy,
                "pointing_accuracy": self.pointing_accuracy,
                "random_baseline": self.random_baseline,
                "per_episode_auc": list(self.per_episode_auc),
                "loss_curve": [list(row) for row in self.loss_curve]}


def per_episode_auc(model: Model, dataset: Dataset, tag: str = "test") -> list[float]:
    """AUC of each episode's samples against all opposite-label samples in the split."""
    idx = dataset.indices(tag)
    scores = {i: predict(model, dataset.samples[i].tensor) for i in idx}
    episodes: dict[str, list[int]] = {}
    for i in idx:
        episodes.setdefault(dataset.episode_ids[i], []).append(i)
    out = []
    for eid in sorted(episodes):
        own = episodes[eid]
        label = dataset.samples[own[0]].label
        other = [i for i in idx if dataset.samples[i].label != label]
        if not other:
            log.info("per_episode_auc: no opposite-label samples for %s", eid)
            continue
        s = [scores[i] for i in own + other]
        y = [dataset.samples[i].label for i in own + other]
        out.append(auc_roc(s, y))
    return out


def evaluate(model: Model, dataset: Dataset, tag: str = "test") -> EvalReport:
    """Score a split: overall AUC, accuracy at 0.5, per-episode AUC."""
    tensors = dataset.tensors(tag)
    labels = dataset.labels(tag)
    if not tensors:
        raise ValidationError(f"split {tag!r} is empty")
    scores = [predict(model, x) for x in tensors]
    return EvalReport(auc=auc_roc(scores, labels),
                      accuracy=accuracy_at_half(scores, labels),
                      per_episode_auc=per_episode_auc(model, dataset, tag))
