"""Proposal generation and compatibility scoring.

From the detector's start/mid/end probability sequences this module
selects candidate snippets, pairs them into intervals, reads a learned
compatibility value phi for each interval, and ranks everything by the
product score

    score = p_start * p_end * phi

where p_start and p_end are the detector probabilities at the paired
snippets.  phi comes from a small fully connected network that looks at
the probability landscape around the interval and predicts how well it
matches a true instance, trained to regress the best IoU the interval
achieves against ground truth.  Greedy or soft non-maximum suppression
prunes the ranked list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import checkpoint
from .autodiff import (ComputeGraph, MomentumSgd, ParamTensor, Tensor,
                       fully_connected, relu, scale, sgd_step, sigmoid,
                       smooth_l1)
from .detector import (DetectorParams, ProbabilityTriple, TrainSchedule,
                       detector_forward)
from .errors import (CheckpointError, DataFormatError, NumericError,
                     ShapeError, TrainingDivergedError)
from .labeling import AnnotationSet, round_half_up
from .metrics import iou_1d


@dataclass(frozen=True)
class Proposal:
    """One scored interval on the snippet axis.

    ``score`` equals p_start * p_end * phi when the proposal comes out
    of :func:`bayesian_score`; soft NMS returns copies whose score has
    decayed below that product.
    """

    start: int
    end: int
    score: float
    p_start: float
    p_end: float
    phi: float
    class_id: Optional[int] = None

    def __post_init__(self):
        if not (self.start < self.end):
            raise ValueError("proposal start %r must precede end %r"
                             % (self.start, self.end))


def bayesian_score(p_start: float, p_end: float, phi: float) -> float:
    """Product of the boundary probabilities and the compatibility.

    All three factors live in (0, 1), so the score does too, and it is
    strictly increasing in each factor.
    """
    p_start, p_end, phi = float(p_start), float(p_end), float(phi)
    for name, v in (("p_start", p_start), ("p_end", p_end), ("phi", phi)):
        if not (0.0 < v < 1.0):
            raise ValueError("%s must lie in (0, 1), got %r" % (name, v))
    return p_start * p_end * phi


def make_proposal(start: int, end: int, p_start: float, p_end: float,
                  phi: float) -> Proposal:
    return Proposal(start=int(start), end=int(end),
                    score=bayesian_score(p_start, p_end, phi),
                    p_start=float(p_start), p_end=float(p_end),
                    phi=float(phi))


def select_candidates(probabilities: np.ndarray, threshold: float) -> list[int]:
    """Candidate snippet indices from one probability sequence.

    An index qualifies if its probability exceeds ``threshold`` or if it
    is a strict interior local maximum (greater than both neighbours).
    Returned sorted ascending.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("probabilities must be 1-D, got %r" % (p.shape,))
    picks = p > threshold
    if p.shape[0] >= 3:
        interior = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
        picks[1:-1] |= interior
    return [int(i) for i in np.nonzero(picks)[0]]


def duration_stats(annotations: Sequence[AnnotationSet]) -> tuple[float, float]:
    """(shortest, longest) instance duration across an annotation set."""
    durations = [inst.duration for ann in annotations for inst in ann.instances]
    if not durations:
        raise ValueError("no instances; cannot derive duration bounds")
    return float(min(durations)), float(max(durations))


def pair_candidates(starts: Sequence[int], ends: Sequence[int],
                    p_mid: np.ndarray, duration_min: float,
                    duration_max: float,
                    tau_mid: float = 0.5) -> list[tuple[int, int]]:
    """All (s, e) pairs passing the ordering, duration and mid gates.

    A pair survives when s < e, duration_min <= e - s <= duration_max,
    and the mid probability at the rounded centre snippet reaches
    ``tau_mid``.  Pairs come back sorted by (s, e).
    """
    if duration_min > duration_max:
        raise ValueError("duration_min %r exceeds duration_max %r"
                         % (duration_min, duration_max))
    p = np.asarray(p_mid, dtype=np.float64)
    out = []
    for s in sorted(set(int(v) for v in starts)):
        for e in sorted(set(int(v) for v in ends)):
            if s >= e:
                continue
            d = e - s
            if d < duration_min or d > duration_max:
                continue
            centre = round_half_up((s + e) / 2.0)
            if p[centre] >= tau_mid:
                out.append((s, e))
    return out


def phi_features(triple: ProbabilityTriple, start: int, end: int,
                 samples: int = 32, extension: float = 1.4) -> np.ndarray:
    """Probability-landscape descriptor of one candidate interval.

    The interval is extended symmetrically about its centre to
    ``extension`` times its length, then each of the three probability
    sequences is read at ``samples`` uniformly spaced positions across
    the extended span (endpoints included) with linear interpolation,
    clamping positions that fall outside the sequence to its edges.
    The reads concatenate in start, mid, end order.
    """
    t = triple.length
    if not (0 <= start < end <= t - 1):
        raise ShapeError("need 0 <= start < end <= T-1, got (%d, %d) for T=%d"
                         % (start, end, t))
    if samples < 2:
        raise ValueError("samples must be >= 2, got %d" % samples)
    if extension <= 0:
        raise ValueError("extension must be positive, got %r" % (extension,))
    centre = (start + end) / 2.0
    half = 0.5 * extension * (end - start)
    positions = np.linspace(centre - half, centre + half, samples)
    axis = np.arange(t, dtype=np.float64)
    return np.concatenate([np.interp(positions, axis, triple.start),
                           np.interp(positions, axis, triple.mid),
                           np.interp(positions, axis, triple.end)])


@dataclass(frozen=True)
class PhiConfig:
    """Architecture of the compatibility network: two hidden layers."""

    input_dim: int = 96
    hidden: tuple[int, int] = (96, 48)

    def __post_init__(self):
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("phi layer widths must be positive")
        if len(self.hidden) != 2:
            raise ValueError("phi uses exactly two hidden layers")

    def canonical(self) -> str:
        return "phi|input=%d|hidden=%s" % (
            self.input_dim, ",".join(str(h) for h in self.hidden))

    def digest(self) -> bytes:
        return checkpoint.config_digest(self.canonical())


class PhiParams:
    """Named parameters of the compatibility network."""

    LAYER_NAMES = ("fc1", "fc2", "fc3")

    def __init__(self, config: PhiConfig, tensors: dict[str, ParamTensor]):
        self.config = config
        self.tensors = tensors
        self.layers = [(tensors["phi.%s.weight" % n], tensors["phi.%s.bias" % n])
                       for n in self.LAYER_NAMES]

    def ordered(self) -> list[ParamTensor]:
        return list(self.tensors.values())


def init_phi_params(config: PhiConfig, seed: int) -> PhiParams:
    rng = np.random.default_rng(seed)
    dims = [config.input_dim, config.hidden[0], config.hidden[1], 1]
    tensors: dict[str, ParamTensor] = {}
    for name, n_in, n_out in zip(PhiParams.LAYER_NAMES, dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-a, a, size=(n_out, n_in))
        tensors["phi.%s.weight" % name] = ParamTensor(w, "phi.%s.weight" % name)
        tensors["phi.%s.bias" % name] = ParamTensor(np.zeros(n_out),
                                                    "phi.%s.bias" % name)
    return PhiParams(config, tensors)


def phi_apply(x: Tensor, params: PhiParams) -> Tensor:
    """Graph-recorded forward pass; x is (input_dim,) or (batch, input_dim)."""
    h = relu(fully_connected(x, *params.layers[0]))
    h = relu(fully_connected(h, *params.layers[1]))
    return sigmoid(fully_connected(h, *params.layers[2]))


def phi_forward(features: np.ndarray, params: PhiParams):
    """Inference: a (input_dim,) vector gives a float in (0, 1); a batch
    (n, input_dim) gives an (n,) array."""
    feats = np.asarray(features, dtype=np.float64)
    out = phi_apply(Tensor(feats), params)
    if feats.ndim == 1:
        return float(out.data[0])
    return out.data[:, 0].copy()


def train_phi(features: np.ndarray, targets: np.ndarray,
              schedule: TrainSchedule,
              config: Optional[PhiConfig] = None) -> tuple[PhiParams, list[float]]:
    """Fit phi to regress per-interval best IoU.

    ``features`` is (n, input_dim), ``targets`` is (n,) of values in
    [0, 1].  Minimises the batch mean of the smooth L1 penalty between
    phi and the target.  Returns the parameters and per-epoch mean
    per-sample losses.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError("features must be (n, d) with targets (n,), got %r, %r"
                         % (x.shape, y.shape))
    if x.shape[0] == 0:
        raise ValueError("phi training set is empty")
    if config is None:
        config = PhiConfig(input_dim=x.shape[1])
    elif config.input_dim != x.shape[1]:
        raise ShapeError("features width %d does not match config input_dim %d"
                         % (x.shape[1], config.input_dim))
    params = init_phi_params(config, seed=schedule.seed)
    optimiser = (MomentumSgd(params.ordered(), schedule.momentum)
                 if schedule.momentum > 0 else None)
    rng = np.random.default_rng([schedule.seed, 2])
    y2 = y[:, None]
    losses: list[float] = []
    for epoch in range(schedule.epochs):
        lr = schedule.learning_rate_for(epoch)
        order = rng.permutation(x.shape[0])
        epoch_total = 0.0
        for lo in range(0, len(order), schedule.batch_size):
            batch = order[lo:lo + schedule.batch_size]
            graph = ComputeGraph()
            try:
                with graph:
                    pred = phi_apply(Tensor(x[batch]), params)
                    total = smooth_l1(pred, y2[batch])
                    loss = scale(total, 1.0 / len(batch))
                graph.backward(loss)
            except NumericError as exc:
                raise TrainingDivergedError(
                    "phi training diverged at epoch %d: %s" % (epoch, exc)
                ) from exc
            epoch_total += float(total.data)
            if optimiser is not None:
                optimiser.step(lr)
            else:
                sgd_step(params.ordered(), lr)
        losses.append(epoch_total / x.shape[0])
    return params, losses


def best_iou(start: float, end: float, annotations: AnnotationSet) -> float:
    """Highest IoU the interval reaches against any instance (0 if none)."""
    best = 0.0
    for inst in annotations.instances:
        v = iou_1d(start, end, inst.start, inst.end)
        if v > best:
            best = v
    return best


@dataclass(frozen=True)
class ProposalConfig:
    """Knobs of the candidate-to-proposal pipeline."""

    threshold: float = 0.9        # candidate probability gate
    tau_mid: float = 0.5          # centre-probability gate for pairs
    duration_min: Optional[float] = None   # None: derived from training data
    duration_max: Optional[float] = None
    samples: int = 32             # phi descriptor reads per sequence
    extension: float = 1.4        # descriptor span relative to the interval
    nms: str = "greedy"           # "greedy" or "soft"
    nms_iou: float = 0.65         # greedy suppression threshold
    soft_sigma: float = 0.5       # gaussian decay width for soft NMS
    soft_floor: float = 1e-3      # soft NMS drops proposals below this
    top_k: int = 200              # proposals kept per video

    def __post_init__(self):
        if self.nms not in ("greedy", "soft"):
            raise ValueError("nms must be 'greedy' or 'soft', got %r"
                             % (self.nms,))
        if self.samples < 2 or self.extension <= 0:
            raise ValueError("invalid phi descriptor geometry")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not (0.0 < self.nms_iou <= 1.0) or self.soft_sigma <= 0:
            raise ValueError("invalid NMS parameters")


def _nms_order(p: Proposal) -> tuple:
    return (-p.score, p.start, p.end)


def greedy_nms(proposals: Sequence[Proposal],
               iou_threshold: float) -> list[Proposal]:
    """Keep proposals in score order, dropping any whose IoU with an
    already kept proposal reaches ``iou_threshold``.

    Ties in score break by earlier start, then earlier end.  The kept
    list is therefore an antichain: every pair overlaps strictly below
    the threshold.
    """
    kept: list[Proposal] = []
    for p in sorted(proposals, key=_nms_order):
        if all(iou_1d(p.start, p.end, q.start, q.end) < iou_threshold
               for q in kept):
            kept.append(p)
    return kept


def soft_nms(proposals: Sequence[Proposal], sigma: float = 0.5,
             floor: float = 1e-3) -> list[Proposal]:
    """Gaussian score decay instead of hard suppression.

    Repeatedly freeze the highest-scoring unprocessed proposal, then
    multiply every remaining score by exp(-iou^2 / sigma) against it.
    Proposals whose final score falls below ``floor`` are dropped.  The
    result is sorted by decayed score (ties: earlier start, then end).
    """
    live = [[p.score, p] for p in proposals]
    frozen: list[Proposal] = []
    while live:
        live.sort(key=lambda sp: (-sp[0], sp[1].start, sp[1].end))
        score, top = live.pop(0)
        frozen.append(replace(top, score=score))
        for sp in live:
            v = iou_1d(top.start, top.end, sp[1].start, sp[1].end)
            if v > 0.0:
                sp[0] *= math.exp(-(v * v) / sigma)
    out = [p for p in frozen if p.score >= floor]
    out.sort(key=_nms_order)
    return out


def propose_video(triple: ProbabilityTriple, phi_params: PhiParams,
                  cfg: ProposalConfig) -> list[Proposal]:
    """Full candidate-to-proposal pipeline for one video.

    Requires cfg.duration_min / duration_max to be resolved (training
    data stats or explicit overrides).  Returns at most cfg.top_k
    proposals sorted by descending score.
    """
    if cfg.duration_min is None or cfg.duration_max is None:
        raise ValueError("duration bounds are unresolved; derive them from "
                         "training annotations or set them explicitly")
    starts = select_candidates(triple.start, cfg.threshold)
    ends = select_candidates(triple.end, cfg.threshold)
    pairs = pair_candidates(starts, ends, triple.mid, cfg.duration_min,
                            cfg.duration_max, cfg.tau_mid)
    if not pairs:
        return []
    feats = np.stack([phi_features(triple, s, e, cfg.samples, cfg.extension)
                      for s, e in pairs])
    phis = phi_forward(feats, phi_params)
    scored = [make_proposal(s, e, triple.start[s], triple.end[e], phi)
              for (s, e), phi in zip(pairs, phis)]
    if cfg.nms == "greedy":
        pruned = greedy_nms(scored, cfg.nms_iou)
    else:
        pruned = soft_nms(scored, cfg.soft_sigma, cfg.soft_floor)
    return pruned[:cfg.top_k]


def phi_training_samples(videos: Sequence[tuple[str, np.ndarray]],
                         annotations: Mapping[str, AnnotationSet],
                         detector_params: DetectorParams,
                         cfg: ProposalConfig,
                         duration_min: float, duration_max: float,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Collect (descriptor, best IoU) pairs for phi training.

    Runs the detector on every video, forms candidate pairs exactly as
    inference does, and labels each with its best IoU against that
    video's instances.  Pairs that miss every instance vastly outnumber
    the rest, so they are subsampled to match the count of overlapping
    pairs (seeded, without replacement).
    """
    feats = []
    targets = []
    for video_id, arr in videos:
        ann = annotations.get(video_id)
        if ann is None:
            raise DataFormatError("video %r has no annotations" % video_id)
        triple = detector_forward(arr, detector_params)
        starts = select_candidates(triple.start, cfg.threshold)
        ends = select_candidates(triple.end, cfg.threshold)
        for s, e in pair_candidates(starts, ends, triple.mid, duration_min,
                                    duration_max, cfg.tau_mid):
            feats.append(phi_features(triple, s, e, cfg.samples,
                                      cfg.extension))
            targets.append(best_iou(s, e, ann))
    if not feats:
        raise ValueError("no candidate pairs survived the gates; the detector "
                         "may be undertrained or the gates too strict")
    x = np.stack(feats)
    y = np.asarray(targets)
    hit = y > 0.0
    n_hit = int(hit.sum())
    n_miss = int((~hit).sum())
    if 0 < n_hit < n_miss:
        rng = np.random.default_rng([seed, 3])
        miss_idx = np.nonzero(~hit)[0]
        keep = rng.choice(miss_idx, size=n_hit, replace=False)
        idx = np.sort(np.concatenate([np.nonzero(hit)[0], keep]))
        x = x[idx]
        y = y[idx]
    return x, y


AUX_DURATION_MIN = "aux.duration_min"
AUX_DURATION_MAX = "aux.duration_max"


def save_phi(path, params: PhiParams, duration_min: float,
             duration_max: float):
    """Checkpoint phi together with the duration gates it was built for,
    so inference does not need the training annotations."""
    tensors = {n: p.data for n, p in params.tensors.items()}
    tensors[AUX_DURATION_MIN] = np.array([duration_min])
    tensors[AUX_DURATION_MAX] = np.array([duration_max])
    checkpoint.save_tensors(path, params.config.digest(), tensors)


def load_phi(path, config: Optional[PhiConfig] = None
             ) -> tuple[PhiParams, float, float]:
    """Load phi parameters plus the stored duration gates."""
    if config is None:
        config = PhiConfig()
    digest, raw = checkpoint.load_tensors(path)
    checkpoint.check_digest(path, digest, config.digest())
    try:
        duration_min = float(raw.pop(AUX_DURATION_MIN)[0])
        duration_max = float(raw.pop(AUX_DURATION_MAX)[0])
    except KeyError as exc:
        raise CheckpointError("%s: missing duration metadata" % path) from exc
    params = init_phi_params(config, seed=0)
    if set(raw) != set(params.tensors):
        raise CheckpointError("%s: tensor names do not match a phi model"
                              % path)
    for name, p in params.tensors.items():
        if raw[name].shape != p.data.shape:
            raise CheckpointError("%s: tensor %r has shape %r, expected %r"
                                  % (path, name, raw[name].shape,
                                     p.data.shape))
        p.data = np.ascontiguousarray(raw[name])
        p.grad = np.zeros_like(p.data)
    return params, duration_min, duration_max


def write_proposals(path, proposals_by_video: Mapping[str, Sequence[Proposal]]):
    """Tab-separated proposal table.

    Columns: video_id, start, end, score, p_start, p_end, phi, and a
    trailing class column when every proposal carries one.  Videos are
    written in sorted id order, proposals in descending score.
    """
    rows = []
    has_class = None
    for vid in sorted(proposals_by_video):
        for p in sorted(proposals_by_video[vid], key=_nms_order):
            with_class = p.class_id is not None
            if has_class is None:
                has_class = with_class
            elif has_class != with_class:
                raise ValueError("either all proposals carry a class or none")
            row = [vid, str(int(p.start)), str(int(p.end)), repr(float(p.score)),
                   repr(float(p.p_start)), repr(float(p.p_end)),
                   repr(float(p.phi))]
            if with_class:
                row.append(str(p.class_id))
            rows.append("\t".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + ("\n" if rows else ""))


def read_proposals(path) -> dict[str, list[Proposal]]:
    """Parse the proposal table back into per-video lists."""
    out: dict[str, list[Proposal]] = {}
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (7, 8):
                raise DataFormatError(
                    "%s:%d: expected 7 or 8 tab-separated fields, got %d"
                    % (path, lineno, len(parts)))
            if width is None:
                width = len(parts)
            elif width != len(parts):
                raise DataFormatError(
                    "%s:%d: inconsistent column count" % (path, lineno))
            try:
                p = Proposal(
                    start=int(parts[1]), end=int(parts[2]),
                    score=float(parts[3]), p_start=float(parts[4]),
                    p_end=float(parts[5]), phi=float(parts[6]),
                    class_id=int(parts[7]) if len(parts) == 8 else None)
            except ValueError as exc:
                raise DataFormatError("%s:%d: %s" % (path, lineno, exc)) from exc
            out.setdefault(parts[0], []).append(p)
    return out
