"""Ground-truth instances and the critical-point label construction.

An annotated video is a set of temporal instances (start, end, class)
over a snippet axis of length T.  Training targets for the detector are
three binary sequences marking starts, midpoints and ends.  Because a
single snippet is too strict a target, each critical point is inflated
into a small region whose radius scales with the instance duration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataFormatError


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from minus infinity.

    Python's round() rounds halves to even, which would map midpoint 5.5
    to 6 but 4.5 to 4; snippet indexing wants the consistent upward rule.
    """
    return int(math.floor(x + 0.5))


def midpoint(start: float, end: float) -> float:
    return (start + end) / 2.0


@dataclass(frozen=True)
class Instance:
    """One temporal instance on the snippet axis, start < end < T."""

    start: float
    end: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.start < self.end):
            raise ValueError("instance start %r must precede end %r"
                             % (self.start, self.end))
        if self.start < 0:
            raise ValueError("instance start %r must be >= 0" % (self.start,))
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0, got %d" % self.class_id)

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class AnnotationSet:
    """All instances of one video plus the snippet-axis geometry.

    ``length`` is the number of snippets T; ``stride`` records how many
    original frames one snippet covers and is carried through the file
    formats unchanged.
    """

    video_id: str
    length: int
    stride: int
    instances: tuple[Instance, ...]

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be >= 1, got %d" % self.length)
        if self.stride < 1:
            raise ValueError("stride must be >= 1, got %d" % self.stride)
        if not self.video_id or any(c.isspace() for c in self.video_id):
            raise ValueError("video_id must be non-empty and contain no "
                             "whitespace, got %r" % (self.video_id,))
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if inst.end >= self.length:
                raise ValueError(
                    "instance (%r, %r) exceeds video length %d"
                    % (inst.start, inst.end, self.length))


@dataclass(eq=False)
class LabelTriple:
    """Binary start/mid/end target sequences for one video."""

    start: np.ndarray
    mid: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        n = self.start.shape
        if self.mid.shape != n or self.end.shape != n or len(n) != 1:
            raise ValueError("label sequences must be 1-D and equally long")

    @property
    def length(self) -> int:
        return self.start.shape[0]

    def stacked(self) -> np.ndarray:
        """(3, T) array in start, mid, end order."""
        return np.stack([self.start, self.mid, self.end])


def _mark_region(out: np.ndarray, point: float, duration: float, delta: float):
    # The point is rounded to its snippet first; the region then extends
    # ceil(delta * duration) snippets to each side (outward rounding) and
    # clips to the sequence.  delta == 0 marks exactly the rounded snippet.
    centre = round_half_up(point)
    radius = int(math.ceil(delta * duration))
    lo = max(0, centre - radius)
    hi = min(out.shape[0] - 1, centre + radius)
    if lo <= hi:
        out[lo:hi + 1] = 1.0


def inflate_labels(annotations: AnnotationSet, delta: float = 0.1) -> LabelTriple:
    """Build start/mid/end targets with duration-scaled inflation.

    Each instance (s, e) marks three regions centred on the rounded
    snippet of s, of midpoint(s, e), and of e, each of radius
    ceil(delta * (e - s)).  Regions from different instances union.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0, got %r" % (delta,))
    t = annotations.length
    start = np.zeros(t)
    mid = np.zeros(t)
    end = np.zeros(t)
    for inst in annotations.instances:
        _mark_region(start, inst.start, inst.duration, delta)
        _mark_region(mid, midpoint(inst.start, inst.end), inst.duration, delta)
        _mark_region(end, inst.end, inst.duration, delta)
    return LabelTriple(start=start, mid=mid, end=end)


def _format_number(x: float) -> str:
    if float(x) == int(x):
        return str(int(x))
    return repr(float(x))


def write_annotations(path, annotations: Sequence[AnnotationSet]):
    """Write the plain-text annotation format.

    One video per line: ``video_id length stride`` followed by zero or
    more ``start end class_id`` triples, whitespace separated.  Lines
    beginning with '#' and blank lines are ignored on read.
    """
    lines = ["# video_id length stride [start end class_id ...]"]
    for ann in annotations:
        parts = [ann.video_id, str(ann.length), str(ann.stride)]
        for inst in ann.instances:
            parts.extend([_format_number(inst.start), _format_number(inst.end),
                          str(inst.class_id)])
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_annotations(path) -> list[AnnotationSet]:
    """Parse the annotation text format written by write_annotations."""
    out: list[AnnotationSet] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 3:
                raise DataFormatError(
                    "%s:%d: expected 'video_id length stride', got %r"
                    % (path, lineno, line))
            video_id = tokens[0]
            if video_id in seen:
                raise DataFormatError("%s:%d: duplicate video id %r"
                                      % (path, lineno, video_id))
            seen.add(video_id)
            rest = tokens[3:]
            if len(rest) % 3 != 0:
                raise DataFormatError(
                    "%s:%d: instance fields must come in (start, end, class) "
                    "triples, got %d values" % (path, lineno, len(rest)))
            try:
                length = int(tokens[1])
                stride = int(tokens[2])
                instances = tuple(
                    Instance(start=float(rest[i]), end=float(rest[i + 1]),
                             class_id=int(rest[i + 2]))
                    for i in range(0, len(rest), 3))
                out.append(AnnotationSet(video_id=video_id, length=length,
                                         stride=stride, instances=instances))
            except ValueError as exc:
                raise DataFormatError("%s:%d: %s" % (path, lineno, exc)) from exc
    return out
