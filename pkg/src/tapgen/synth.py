"""Synthetic labelled videos for end-to-end pipeline checks.

Each video is a (D, T) float feature array: gaussian noise plus, for
every planted instance, a class-specific unit pattern modulated by a
plateau envelope with short linear onset/offset ramps.  Instances never
overlap (at least one clear snippet between them), durations are
log-uniform within a configured fraction of T, and every video draws
from its own seeded generator so any subset regenerates identically.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataFormatError, PackingError
from .labeling import AnnotationSet, Instance


@dataclass(frozen=True)
class SynthConfig:
    train_videos: int = 200
    val_videos: int = 50
    length: int = 256          # snippets per video (T)
    feature_dim: int = 16      # feature channels (D)
    classes: int = 4
    instances_min: int = 1
    instances_max: int = 4
    duration_min: float = 0.04   # fraction of length
    duration_max: float = 0.40
    signal_strength: float = 3.0
    noise_std: float = 0.5
    stride: int = 8            # frames per snippet, metadata only
    seed: int = 0

    def __post_init__(self):
        if self.train_videos < 0 or self.val_videos < 0:
            raise ValueError("video counts must be >= 0")
        if self.length < 4 or self.feature_dim < 1 or self.classes < 1:
            raise ValueError("invalid video geometry")
        if not (1 <= self.instances_min <= self.instances_max):
            raise ValueError("need 1 <= instances_min <= instances_max")
        if not (0.0 < self.duration_min <= self.duration_max < 1.0):
            raise ValueError("duration fractions must satisfy "
                             "0 < min <= max < 1")
        if self.duration_min * self.length < 1.0:
            raise ValueError("duration_min is under one snippet")
        if self.noise_std < 0 or self.signal_strength < 0:
            raise ValueError("noise_std and signal_strength must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(eq=False)
class FeatureSequence:
    """One video's feature array plus its identity and snippet stride."""

    video_id: str
    stride: int
    features: np.ndarray   # (D, T) float64

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be (D, T), got %r"
                             % (self.features.shape,))

    @property
    def length(self) -> int:
        return self.features.shape[1]


def class_patterns(cfg: SynthConfig) -> np.ndarray:
    """(classes, D) unit vectors, fixed by the dataset seed alone."""
    rng = np.random.default_rng([cfg.seed])
    v = rng.normal(size=(cfg.classes, cfg.feature_dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_duration(rng: np.random.Generator, cfg: SynthConfig) -> int:
    """One instance duration in snippets, log-uniform over the range.

    The continuous draw is rounded to the nearest integer and clamped
    back into [ceil(min), floor(max)] so rounding never leaves the
    configured range.
    """
    lo = cfg.duration_min * cfg.length
    hi = cfg.duration_max * cfg.length
    d = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    return int(min(max(round(d), math.ceil(lo)), math.floor(hi)))


def _envelope(n: int, duration: int) -> np.ndarray:
    # Plateau with linear ramps covering 5% of the duration (at least one
    # snippet) on each side.
    w = max(1, round(0.05 * duration))
    j = np.arange(n, dtype=np.float64)
    return np.minimum(1.0, np.minimum((j + 1) / (w + 1), (n - j) / (w + 1)))


def _plan_video(rng: np.random.Generator,
                cfg: SynthConfig) -> list[tuple[int, int, int]]:
    """Draw and place one video's instances; (start, end, class) tuples.

    Starts are rejection sampled: up to 100 uniform draws per instance,
    longest first, requiring at least one free snippet between any two
    instances.  Raises PackingError when an instance cannot be placed.
    """
    n_inst = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
    durations = sorted((sample_duration(rng, cfg) for _ in range(n_inst)),
                       reverse=True)
    classes = [int(rng.integers(0, cfg.classes)) for _ in range(n_inst)]
    placed: list[tuple[int, int, int]] = []
    for dur, cls in zip(durations, classes):
        if dur >= cfg.length:
            raise PackingError("duration %d does not fit in length %d"
                               % (dur, cfg.length))
        ok = None
        for _ in range(100):
            s = int(rng.integers(0, cfg.length - dur))
            e = s + dur
            if all(s > pe + 1 or e < ps - 1 for ps, pe, _ in placed):
                ok = (s, e, cls)
                break
        if ok is None:
            raise PackingError(
                "could not place a %d-snippet instance after 100 attempts"
                % dur)
        placed.append(ok)
    placed.sort()
    return placed


def generate_video(cfg: SynthConfig, index: int,
                   patterns: np.ndarray) -> tuple[FeatureSequence, AnnotationSet]:
    """Build video ``index`` of the dataset.

    Generation is rejection sampled at the video level too: a drawn
    instance plan that cannot be packed is thrown away and redrawn from
    a fresh derived stream (up to 50 redraws), so dense configurations
    stay reproducible without failing outright.  A configuration that
    can never fit still raises PackingError.
    """
    last_error = None
    for retry in range(50):
        rng = np.random.default_rng([cfg.seed, index, retry])
        try:
            plan = _plan_video(rng, cfg)
        except PackingError as exc:
            last_error = exc
            continue
        feats = rng.normal(0.0, cfg.noise_std,
                           (cfg.feature_dim, cfg.length))
        for s, e, cls in plan:
            env = _envelope(e - s + 1, e - s)
            feats[:, s:e + 1] += cfg.signal_strength * np.outer(patterns[cls],
                                                                env)
        video_id = "v%04d" % index
        ann = AnnotationSet(
            video_id=video_id, length=cfg.length, stride=cfg.stride,
            instances=tuple(Instance(float(s), float(e), cls)
                            for s, e, cls in plan))
        return FeatureSequence(video_id, cfg.stride, feats), ann
    raise PackingError("video %d: %s (50 redraws exhausted; the configured "
                       "instance counts and durations likely cannot fit)"
                       % (index, last_error))


def generate_videos(cfg: SynthConfig, start_index: int,
                    count: int) -> list[tuple[FeatureSequence, AnnotationSet]]:
    patterns = class_patterns(cfg)
    return [generate_video(cfg, i, patterns)
            for i in range(start_index, start_index + count)]


FEATURE_MAGIC = b"TSAF"
FEATURE_VERSION = 1


def write_features(path, sequences: Sequence[FeatureSequence]):
    """Binary feature container.

    Layout (little endian): magic "TSAF", version u16, count u32, then
    per video: id_len u16 + utf-8 id, T u32, D u32, stride u32, and
    D*T float64 values in row-major (channel, time) order.
    """
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HI", FEATURE_VERSION, len(sequences)))
        for seq in sequences:
            encoded = seq.video_id.encode("utf-8")
            arr = np.ascontiguousarray(seq.features, dtype=np.float64)
            d, t = arr.shape
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<III", t, d, seq.stride))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError("%s: truncated while reading %s" % (path, what))
    return buf


def read_features(path) -> list[FeatureSequence]:
    out: list[FeatureSequence] = []
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path, "magic") != FEATURE_MAGIC:
            raise DataFormatError("%s: not a feature file" % path)
        version, count = struct.unpack("<HI",
                                       _read_exact(fh, 6, path, "header"))
        if version != FEATURE_VERSION:
            raise DataFormatError("%s: unsupported version %d"
                                  % (path, version))
        seen = set()
        for _ in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, path,
                                                        "id length"))
            video_id = _read_exact(fh, id_len, path, "video id").decode("utf-8")
            if video_id in seen:
                raise DataFormatError("%s: duplicate video id %r"
                                      % (path, video_id))
            seen.add(video_id)
            t, d, stride = struct.unpack(
                "<III", _read_exact(fh, 12, path, "dimensions"))
            if t < 1 or d < 1 or stride < 1:
                raise DataFormatError("%s: invalid dimensions for %r"
                                      % (path, video_id))
            raw = _read_exact(fh, 8 * d * t, path, "feature data")
            feats = np.frombuffer(raw, dtype="<f8").reshape(d, t).copy()
            out.append(FeatureSequence(video_id, stride, feats))
        if fh.read(1):
            raise DataFormatError("%s: trailing bytes after last video" % path)
    return out
