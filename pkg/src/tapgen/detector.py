"""Multi-dilation temporal convolution detector.

The network reads a (D, T) feature sequence and emits three per-snippet
probability sequences: action start, action interior ("mid"), and
action end.  A small shared trunk feeds several parallel branches whose
stacked blocks mix three dilation rates each; branch outputs are
averaged and a head reduces them to the three logit rows.

One block computes

    out = relu(x + mean_j relu(conv_dj(x)))        j = 1..3

so the residual path keeps fine temporal detail while the dilated
convolutions grow the receptive field linearly with depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .autodiff import (ComputeGraph, MomentumSgd, ParamTensor, Tensor2D,
                       average, add, binary_cross_entropy, conv1d_dilated,
                       relu, sgd_step, sigmoid)
from .errors import (CheckpointError, NumericError, ShapeError,
                     TrainingDivergedError)
from .labeling import LabelTriple


@dataclass(frozen=True)
class BranchSpec:
    """One branch: ``depth`` stacked blocks sharing a dilation triple."""

    dilations: tuple[int, int, int]
    depth: int = 2

    def __post_init__(self):
        d = self.dilations
        if len(d) != 3 or not (1 <= d[0] < d[1] < d[2]):
            raise ValueError(
                "dilations must be three increasing integers >= 1, got %r"
                % (d,))
        if self.depth < 1:
            raise ValueError("depth must be >= 1, got %d" % self.depth)


@dataclass(frozen=True)
class DetectorConfig:
    input_dim: int = 16
    shared_channels: tuple[int, ...] = (48, 48)
    branches: tuple[BranchSpec, ...] = (
        BranchSpec((1, 2, 3)), BranchSpec((1, 3, 5)), BranchSpec((1, 5, 7)))
    head_channels: int = 48
    kernel_size: int = 3

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if len(self.shared_channels) < 1 or any(
                c < 1 for c in self.shared_channels):
            raise ValueError("shared_channels must be non-empty positive ints")
        if len(self.branches) < 1:
            raise ValueError("at least one branch is required")
        if self.head_channels < 1:
            raise ValueError("head_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1, got %d"
                             % self.kernel_size)

    @property
    def width(self) -> int:
        """Channel count inside the branches (output of the trunk)."""
        return self.shared_channels[-1]

    def canonical(self) -> str:
        """Stable text form used for the checkpoint config digest."""
        branches = ";".join(
            "%d,%d,%d x%d" % (b.dilations + (b.depth,)) for b in self.branches)
        return "input_dim=%d|shared=%s|branches=%s|head=%d|kernel=%d" % (
            self.input_dim,
            ",".join(str(c) for c in self.shared_channels),
            branches, self.head_channels, self.kernel_size)

    def digest(self) -> bytes:
        return checkpoint.config_digest(self.canonical())


def receptive_field(branch: BranchSpec, kernel_size: int = 3) -> int:
    """Temporal receptive field of one branch's block stack.

    Each block reaches (kernel_size - 1) * max(dilations) snippets past
    its input's extent through the largest-dilation convolution, and the
    residual path never shrinks it, so depth blocks see

        1 + depth * (kernel_size - 1) * max(dilations)

    snippets.
    """
    return 1 + branch.depth * (kernel_size - 1) * max(branch.dilations)


@dataclass(frozen=True)
class ProbabilityTriple:
    """Start/mid/end probability sequences, every value in (0, 1)."""

    start: np.ndarray
    mid: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        n = self.start.shape
        if self.mid.shape != n or self.end.shape != n or len(n) != 1:
            raise ShapeError("probability sequences must be 1-D, equal length")
        for name, arr in (("start", self.start), ("mid", self.mid),
                          ("end", self.end)):
            if not np.all(np.isfinite(arr)):
                raise NumericError("%s probabilities contain non-finite values"
                                   % name)
            if np.any(arr <= 0.0) or np.any(arr >= 1.0):
                raise NumericError("%s probabilities must lie in (0, 1)" % name)

    @property
    def length(self) -> int:
        return self.start.shape[0]


class DetectorParams:
    """Named parameter tensors for one DetectorConfig.

    ``tensors`` maps checkpoint names to ParamTensor in a fixed order:
    trunk, branches, head.  The structured views (shared / branches /
    head lists of (weight, bias) pairs) alias the same objects.
    """

    def __init__(self, config: DetectorConfig,
                 tensors: dict[str, ParamTensor]):
        self.config = config
        self.tensors = tensors
        self.shared = []
        for i in range(len(config.shared_channels)):
            self.shared.append((tensors["shared.%d.weight" % i],
                                tensors["shared.%d.bias" % i]))
        self.branches = []
        for b, spec in enumerate(config.branches):
            blocks = []
            for j in range(spec.depth):
                convs = [(tensors["branch%d.block%d.conv%d.weight" % (b, j, r)],
                          tensors["branch%d.block%d.conv%d.bias" % (b, j, r)])
                         for r in range(3)]
                blocks.append(convs)
            self.branches.append(blocks)
        self.head = [(tensors["head.hidden.weight"], tensors["head.hidden.bias"]),
                     (tensors["head.out.weight"], tensors["head.out.bias"])]

    def ordered(self) -> list[ParamTensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(p.data.size for p in self.tensors.values())


def _xavier(rng: np.random.Generator, shape: tuple[int, ...],
            fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_detector_params(config: DetectorConfig, seed: int) -> DetectorParams:
    """Xavier-uniform weights, zero biases, fixed draw order."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    tensors: dict[str, ParamTensor] = {}

    def conv_pair(name: str, c_in: int, c_out: int, ksize: int):
        w = _xavier(rng, (c_out, c_in, ksize), c_in * ksize, c_out * ksize)
        tensors[name + ".weight"] = ParamTensor(w, name + ".weight")
        tensors[name + ".bias"] = ParamTensor(np.zeros(c_out), name + ".bias")

    prev = config.input_dim
    for i, ch in enumerate(config.shared_channels):
        conv_pair("shared.%d" % i, prev, ch, k)
        prev = ch
    width = config.width
    for b, spec in enumerate(config.branches):
        for j in range(spec.depth):
            for r in range(3):
                conv_pair("branch%d.block%d.conv%d" % (b, j, r), width, width, k)
    conv_pair("head.hidden", width, config.head_channels, k)
    conv_pair("head.out", config.head_channels, 3, 1)
    return DetectorParams(config, tensors)


def mdc_block(x: Tensor2D, convs, dilations: tuple[int, int, int]) -> Tensor2D:
    """relu(x + mean of relu'd dilated convolutions of x)."""
    mixed = [relu(conv1d_dilated(x, w, b, d))
             for (w, b), d in zip(convs, dilations)]
    return relu(add(x, average(mixed)))


def detector_apply(x: Tensor2D, params: DetectorParams) -> Tensor2D:
    """Full forward pass to the (3, T) probability rows.

    Records onto the active ComputeGraph if there is one; inference
    callers simply run it with no graph.
    """
    cfg = params.config
    h = x
    for w, b in params.shared:
        h = relu(conv1d_dilated(h, w, b, 1))
    branch_outs = []
    for spec, blocks in zip(cfg.branches, params.branches):
        hb = h
        for convs in blocks:
            hb = mdc_block(hb, convs, spec.dilations)
        branch_outs.append(hb)
    h = average(branch_outs)
    w, b = params.head[0]
    h = relu(conv1d_dilated(h, w, b, 1))
    w, b = params.head[1]
    return sigmoid(conv1d_dilated(h, w, b, 1))


def detector_forward(features: np.ndarray, params: DetectorParams,
                     config: Optional[DetectorConfig] = None) -> ProbabilityTriple:
    """Inference entry point: (D, T) features to a ProbabilityTriple."""
    if config is not None and config != params.config:
        raise ShapeError("config does not match the loaded parameters")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError("features must be (D, T), got %r" % (feats.shape,))
    if feats.shape[0] != params.config.input_dim:
        raise ShapeError("feature dim %d does not match config input_dim %d"
                         % (feats.shape[0], params.config.input_dim))
    probs = detector_apply(Tensor2D(feats), params)
    return ProbabilityTriple(start=probs.data[0].copy(),
                             mid=probs.data[1].copy(),
                             end=probs.data[2].copy())


@dataclass(frozen=True)
class TrainSchedule:
    """Shared optimisation schedule for both trainable models.

    The learning rate is ``learning_rate`` for epochs before
    ``switch_epoch`` and ``learning_rate_late`` from then on.  ``window``
    is the temporal crop length used when batching detector sequences.
    """

    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    learning_rate_late: float = 1e-4
    switch_epoch: int = 10
    momentum: float = 0.9
    window: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.window < 1:
            raise ValueError("epochs, batch_size and window must be >= 1")
        if self.learning_rate <= 0 or self.learning_rate_late <= 0:
            raise ValueError("learning rates must be positive")
        if self.switch_epoch < 0:
            raise ValueError("switch_epoch must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")

    def learning_rate_for(self, epoch: int) -> float:
        return (self.learning_rate if epoch < self.switch_epoch
                else self.learning_rate_late)


def _crop_or_pad(feats: np.ndarray, labels: np.ndarray, window: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = feats.shape[1]
    if t == window:
        return feats, labels
    if t > window:
        off = int(rng.integers(0, t - window + 1))
        return feats[:, off:off + window], labels[:, off:off + window]
    fpad = np.zeros((feats.shape[0], window))
    fpad[:, :t] = feats
    lpad = np.zeros((labels.shape[0], window))
    lpad[:, :t] = labels
    return fpad, lpad


def train_detector(dataset: Sequence[tuple[np.ndarray, LabelTriple]],
                   config: DetectorConfig,
                   schedule: TrainSchedule) -> tuple[DetectorParams, list[float]]:
    """Fit the detector with minibatch SGD.

    ``dataset`` holds (features, LabelTriple) pairs.  The loss per item
    is the binary cross entropy summed over all positions of the three
    sequences; a batch averages its items.  The sum reduction matters:
    per-position gradients are small once the probabilities settle near
    the label base rate, and averaging them over T as well would starve
    the feature pathway at the default learning rates.  Gradient
    accumulation runs in fixed index order and every random draw comes
    from one seeded generator, so training is bitwise reproducible.

    Returns the trained parameters and the list of per-epoch mean item
    losses (per-position, for readability across window sizes).
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    items = []
    for feats, labels in dataset:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != config.input_dim:
            raise ShapeError(
                "features must be (%d, T), got %r"
                % (config.input_dim, feats.shape))
        stacked = labels.stacked()
        if stacked.shape[1] != feats.shape[1]:
            raise ShapeError("labels length %d does not match features %d"
                             % (stacked.shape[1], feats.shape[1]))
        items.append((feats, stacked))

    params = init_detector_params(config, seed=schedule.seed)
    optimiser = (MomentumSgd(params.ordered(), schedule.momentum)
                 if schedule.momentum > 0 else None)
    rng = np.random.default_rng([schedule.seed, 1])
    losses: list[float] = []
    for epoch in range(schedule.epochs):
        lr = schedule.learning_rate_for(epoch)
        order = rng.permutation(len(items))
        epoch_total = 0.0
        epoch_positions = 0
        for lo in range(0, len(order), schedule.batch_size):
            batch = order[lo:lo + schedule.batch_size]
            graph = ComputeGraph()
            try:
                with graph:
                    item_losses = []
                    positions = 0
                    for idx in batch:
                        feats, stacked = items[idx]
                        feats, stacked = _crop_or_pad(
                            feats, stacked, schedule.window, rng)
                        probs = detector_apply(Tensor2D(feats), params)
                        item_losses.append(
                            binary_cross_entropy(probs, stacked))
                        positions += stacked.size
                    batch_loss = average(item_losses)
                graph.backward(batch_loss)
            except NumericError as exc:
                raise TrainingDivergedError(
                    "detector training diverged at epoch %d: %s"
                    % (epoch, exc)) from exc
            epoch_total += float(sum(l.data for l in item_losses))
            epoch_positions += positions
            if optimiser is not None:
                optimiser.step(lr)
            else:
                sgd_step(params.ordered(), lr)
        losses.append(epoch_total / epoch_positions)
    return params, losses


def save_detector(path, params: DetectorParams):
    checkpoint.save_tensors(path, params.config.digest(),
                            {n: p.data for n, p in params.tensors.items()})


def load_detector(path, config: DetectorConfig) -> DetectorParams:
    """Load parameters for ``config``, verifying digest, names, shapes."""
    digest, raw = checkpoint.load_tensors(path)
    checkpoint.check_digest(path, digest, config.digest())
    params = init_detector_params(config, seed=0)
    expected = set(params.tensors)
    found = set(raw)
    if expected != found:
        missing = sorted(expected - found)[:3]
        extra = sorted(found - expected)[:3]
        raise CheckpointError(
            "%s: tensor names do not match the config (missing %r, "
            "unexpected %r)" % (path, missing, extra))
    for name, p in params.tensors.items():
        if raw[name].shape != p.data.shape:
            raise CheckpointError(
                "%s: tensor %r has shape %r, expected %r"
                % (path, name, raw[name].shape, p.data.shape))
        p.data = np.ascontiguousarray(raw[name])
        p.grad = np.zeros_like(p.data)
    return params
