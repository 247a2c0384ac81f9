"""Label inflation and annotation file round-trips."""

import math

import numpy as np
import pytest

from tapgen.errors import DataFormatError
from tapgen.labeling import (
    AnnotationSet,
    Instance,
    LabelTriple,
    inflate_labels,
    midpoint,
    read_annotations,
    round_half_up,
    write_annotations,
)


def naive_inflate(ann, delta):
    """Independent re-derivation: mark centre +- radius per point, union."""
    start = np.zeros(ann.length)
    mid = np.zeros(ann.length)
    end = np.zeros(ann.length)
    for inst in ann.instances:
        duration = inst.end - inst.start
        radius = math.ceil(delta * duration)
        for point, seq in (
            (inst.start, start),
            ((inst.start + inst.end) / 2.0, mid),
            (inst.end, end),
        ):
            centre = math.floor(point + 0.5)
            lo = max(0, centre - radius)
            hi = min(ann.length - 1, centre + radius)
            seq[lo : hi + 1] = 1.0
    return start, mid, end


def test_round_half_up_halves_go_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(-0.5) == 0
    assert round_half_up(2.4999) == 2


def test_inflation_reference_window():
    # A 100-long instance at delta=0.1 inflates each critical point by
    # ceil(10) = 10 snippets on both sides.
    labels = inflate_labels(AnnotationSet("v", 256, 8, [Instance(100, 200)]), 0.1)
    on = np.flatnonzero(labels.start)
    assert on[0] == 90 and on[-1] == 110 and on.size == 21
    on_end = np.flatnonzero(labels.end)
    assert on_end[0] == 190 and on_end[-1] == 210
    on_mid = np.flatnonzero(labels.mid)
    assert on_mid[0] == 140 and on_mid[-1] == 160


def test_inflation_zero_delta_single_positive():
    labels = inflate_labels(AnnotationSet("v", 64, 8, [Instance(7, 19)]), 0.0)
    assert np.flatnonzero(labels.start).tolist() == [7]
    assert np.flatnonzero(labels.end).tolist() == [19]
    assert np.flatnonzero(labels.mid).tolist() == [13]


def test_midpoint_is_plain_average():
    # Rounding happens at marking time, not here.
    assert midpoint(0, 5) == 2.5
    assert midpoint(0, 4) == 2.0
    assert round_half_up(midpoint(0, 5)) == 3


def test_inflation_clips_at_sequence_edges():
    labels = inflate_labels(AnnotationSet("v", 40, 8, [Instance(1, 11)]), 0.3)
    # radius ceil(3.0) = 3; start centre 1 clips to [0, 4]
    assert np.flatnonzero(labels.start).tolist() == [0, 1, 2, 3, 4]
    labels = inflate_labels(AnnotationSet("v", 40, 8, [Instance(28, 38)]), 0.3)
    assert np.flatnonzero(labels.end).tolist() == [35, 36, 37, 38, 39]


def test_inflation_union_of_overlapping_instances():
    labels = inflate_labels(
        AnnotationSet("v", 64, 8, [Instance(10, 20), Instance(12, 22)]), 0.1)
    # start centres 10 and 12, radius 1 each: union {9,10,11} | {11,12,13}
    assert np.flatnonzero(labels.start).tolist() == [9, 10, 11, 12, 13]


def test_inflation_property_sweep():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        length = int(rng.integers(16, 400))
        s = int(rng.integers(0, length - 2))
        e = int(rng.integers(s + 1, length))
        delta = float(rng.uniform(0.0, 0.5))
        ann = AnnotationSet("v", length, 8, [Instance(s, e)])
        got = inflate_labels(ann, delta)
        want = naive_inflate(ann, delta)
        for a, b in zip((got.start, got.mid, got.end), want):
            assert np.array_equal(a, b)
        # Regions are contiguous runs: one flip up, one flip down at most.
        for seq in (got.start, got.mid, got.end):
            flips = np.abs(np.diff(seq)).sum()
            assert flips <= 2
            assert seq.sum() >= 1


def test_label_triple_stacks_in_order():
    labels = inflate_labels(AnnotationSet("v", 16, 8, [Instance(3, 9)]), 0.0)
    stacked = labels.stacked()
    assert stacked.shape == (3, 16)
    assert np.array_equal(stacked[0], labels.start)
    assert np.array_equal(stacked[1], labels.mid)
    assert np.array_equal(stacked[2], labels.end)


def test_instance_validation():
    with pytest.raises(ValueError):
        Instance(5, 5)
    with pytest.raises(ValueError):
        Instance(-1, 5)
    with pytest.raises(ValueError):
        Instance(2, 8, class_id=-3)


def test_annotation_set_validation():
    with pytest.raises(ValueError):
        AnnotationSet("has space", 64, 8, [])
    with pytest.raises(ValueError):
        AnnotationSet("v", 64, 8, [Instance(60, 64)])  # end == length


def test_annotation_file_round_trip(tmp_path):
    sets = [
        AnnotationSet("vid_000", 256, 8, [Instance(10, 50, 2), Instance(100, 130, 0)]),
        AnnotationSet("vid_001", 128, 8, []),
    ]
    path = tmp_path / "ann.txt"
    write_annotations(path, sets)
    back = read_annotations(path)
    assert len(back) == 2
    assert back[0].video_id == "vid_000"
    assert back[0].length == 256 and back[0].stride == 8
    assert [(i.start, i.end, i.class_id) for i in back[0].instances] == [
        (10, 50, 2),
        (100, 130, 0),
    ]
    assert back[1].instances == ()


def test_annotation_reader_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "ann.txt"
    path.write_text("# header\n\nv0 64 8 3 9 1\n")
    back = read_annotations(path)
    assert len(back) == 1
    assert back[0].instances[0].end == 9


def test_annotation_reader_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("v0 64 8 3 9 1\nv1 64 8 3 nine 1\n")
    with pytest.raises(DataFormatError) as err:
        read_annotations(path)
    assert "2" in str(err.value)


def test_annotation_reader_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "dup.txtx"
    path.write_text("v0 64 8\nv0 32 8\n")
    with pytest.raises(DataFormatError):
        read_annotations(path)


def test_annotation_reader_rejects_ragged_fields(tmp_path):
    path = tmp_path / "ragged.txt"
    path.write_text("v0 64 8 3 9\n")
    with pytest.raises(DataFormatError):
        read_annotations(path)
