"""Detector architecture, gradients, checkpointing, and training."""

import numpy as np
import pytest

from conftest import fd_check
from tapgen.autodiff import Tensor2D, binary_cross_entropy
from tapgen.detector import (
    BranchSpec,
    DetectorConfig,
    DetectorParams,
    ProbabilityTriple,
    TrainSchedule,
    detector_apply,
    detector_forward,
    init_detector_params,
    load_detector,
    receptive_field,
    save_detector,
    train_detector,
)
from tapgen.errors import CheckpointError, NumericError, ShapeError
from tapgen.labeling import AnnotationSet, Instance, inflate_labels

TINY = DetectorConfig(
    input_dim=3,
    shared_channels=(4,),
    branches=(BranchSpec((1, 2, 3), depth=1), BranchSpec((1, 3, 5), depth=1)),
    head_channels=4,
)


def tiny_dataset(n, t=32, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n):
        feats = rng.normal(0.0, 1.0, (3, t))
        s = int(rng.integers(2, t // 2))
        e = int(rng.integers(s + 4, t - 1))
        feats[:, s : e + 1] += 1.5
        ann = AnnotationSet("v%03d" % i, t, 8, [Instance(s, e)])
        data.append((feats, inflate_labels(ann, 0.1)))
    return data


def test_receptive_field_reference_values():
    assert receptive_field(BranchSpec((1, 2, 3), depth=2)) == 13
    assert receptive_field(BranchSpec((1, 5, 7), depth=2)) == 29
    assert receptive_field(BranchSpec((1, 3, 5), depth=2)) == 21
    assert receptive_field(BranchSpec((1, 2, 3), depth=1)) == 7
    assert receptive_field(BranchSpec((1, 2, 3), depth=2), kernel_size=5) == 25


def test_branch_spec_validation():
    with pytest.raises(ValueError):
        BranchSpec((1, 1, 3))
    with pytest.raises(ValueError):
        BranchSpec((3, 2, 1))
    with pytest.raises(ValueError):
        BranchSpec((1, 2, 3), depth=0)
    with pytest.raises(ValueError):
        BranchSpec((1, 2))


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(kernel_size=4)
    with pytest.raises(ValueError):
        DetectorConfig(shared_channels=())
    with pytest.raises(ValueError):
        DetectorConfig(branches=())


def test_zero_parameters_give_exactly_half():
    params = init_detector_params(TINY, seed=0)
    for p in params.ordered():
        p.data[...] = 0.0
    x = np.random.default_rng(1).normal(0.0, 1.0, (3, 10))
    probs = detector_apply(Tensor2D(x), params)
    assert probs.data.shape == (3, 10)
    assert np.all(probs.data == 0.5)


def test_forward_shapes_and_range():
    params = init_detector_params(TINY, seed=3)
    x = np.random.default_rng(4).normal(0.0, 2.0, (3, 25))
    triple = detector_forward(x, params)
    assert triple.length == 25
    for row in (triple.start, triple.mid, triple.end):
        assert row.shape == (25,)
        assert np.all((row > 0.0) & (row < 1.0))


def test_forward_rejects_bad_shapes():
    params = init_detector_params(TINY, seed=0)
    with pytest.raises(ShapeError):
        detector_forward(np.zeros((4, 10)), params)
    with pytest.raises(ShapeError):
        detector_forward(np.zeros(10), params)
    with pytest.raises(ShapeError):
        detector_forward(np.zeros((3, 10)), params, config=DetectorConfig())


def test_probability_triple_validation():
    ok = np.full(5, 0.5)
    with pytest.raises(ShapeError):
        ProbabilityTriple(ok, ok, np.full(4, 0.5))
    with pytest.raises(NumericError):
        ProbabilityTriple(ok, np.array([0.5, 0.5, 1.0, 0.5, 0.5]), ok)
    with pytest.raises(NumericError):
        ProbabilityTriple(np.array([0.0, 0.5, 0.5, 0.5, 0.5]), ok, ok)


def test_xavier_bounds_and_zero_biases():
    params = init_detector_params(TINY, seed=7)
    w = params.tensors["shared.0.weight"].data
    a = np.sqrt(6.0 / (3 * 3 + 4 * 3))
    assert np.all(np.abs(w) <= a)
    assert w.std() > 0
    for name, p in params.tensors.items():
        if name.endswith(".bias"):
            assert np.all(p.data == 0.0)


def test_init_is_deterministic_per_seed():
    a = init_detector_params(TINY, seed=5)
    b = init_detector_params(TINY, seed=5)
    c = init_detector_params(TINY, seed=6)
    assert all(
        a.tensors[n].data.tobytes() == b.tensors[n].data.tobytes()
        for n in a.tensors
    )
    assert any(
        a.tensors[n].data.tobytes() != c.tensors[n].data.tobytes()
        for n in a.tensors
    )


def test_full_detector_gradients():
    params = init_detector_params(TINY, seed=11)
    rng = np.random.default_rng(12)
    x = rng.normal(0.0, 1.0, (3, 12))
    y = (rng.uniform(size=(3, 12)) < 0.3).astype(float)

    def make_loss():
        probs = detector_apply(Tensor2D(x), params)
        return binary_cross_entropy(probs, y)

    worst = fd_check(make_loss, params.ordered(), h=1e-5)
    assert worst < 1e-4


def test_parameter_count_and_names():
    params = init_detector_params(TINY, seed=0)
    # trunk 3->4, two depth-1 branches of three 4->4 convs, head 4->4->3
    want = (4 * 3 * 3 + 4) + 2 * 3 * (4 * 4 * 3 + 4) + (4 * 4 * 3 + 4) + (3 * 4 + 3)
    assert params.count() == want
    assert list(params.tensors) == sorted(
        params.tensors, key=list(params.tensors).index
    )
    assert "branch1.block0.conv2.weight" in params.tensors


def test_checkpoint_round_trip(tmp_path):
    params = init_detector_params(TINY, seed=9)
    path = tmp_path / "det.ckpt"
    save_detector(path, params)
    back = load_detector(path, TINY)
    for n, p in params.tensors.items():
        assert back.tensors[n].data.tobytes() == p.data.tobytes()
    x = np.random.default_rng(2).normal(size=(3, 14))
    a = detector_forward(x, params)
    b = detector_forward(x, back)
    assert a.start.tobytes() == b.start.tobytes()
    assert a.mid.tobytes() == b.mid.tobytes()
    assert a.end.tobytes() == b.end.tobytes()


def test_checkpoint_rejects_config_mismatch(tmp_path):
    params = init_detector_params(TINY, seed=9)
    path = tmp_path / "det.ckpt"
    save_detector(path, params)
    other = DetectorConfig(
        input_dim=3,
        shared_channels=(4,),
        branches=(BranchSpec((1, 2, 3), depth=1),),
        head_channels=4,
    )
    with pytest.raises(CheckpointError):
        load_detector(path, other)


def test_schedule_validation_and_switch():
    s = TrainSchedule(epochs=4, switch_epoch=2, learning_rate=0.1,
                      learning_rate_late=0.01)
    assert s.learning_rate_for(0) == 0.1
    assert s.learning_rate_for(1) == 0.1
    assert s.learning_rate_for(2) == 0.01
    assert s.learning_rate_for(3) == 0.01
    # switch past the end means the late rate never engages
    late_never = TrainSchedule(epochs=4, switch_epoch=4)
    assert late_never.learning_rate_for(3) == late_never.learning_rate
    with pytest.raises(ValueError):
        TrainSchedule(epochs=0)
    with pytest.raises(ValueError):
        TrainSchedule(momentum=1.0)
    with pytest.raises(ValueError):
        TrainSchedule(learning_rate=0.0)


def test_training_reduces_loss_and_is_deterministic():
    data = tiny_dataset(8, t=32)
    sched = TrainSchedule(epochs=4, batch_size=4, learning_rate=1e-3,
                          learning_rate_late=1e-4, switch_epoch=3,
                          momentum=0.9, window=32, seed=0)
    p1, losses1 = train_detector(data, TINY, sched)
    p2, losses2 = train_detector(data, TINY, sched)
    assert losses1 == losses2
    assert all(
        p1.tensors[n].data.tobytes() == p2.tensors[n].data.tobytes()
        for n in p1.tensors
    )
    assert losses1[-1] < losses1[0]


def test_training_window_crop_and_pad():
    # Sequences longer and shorter than the window both train.
    data = tiny_dataset(4, t=48) + [
        (np.zeros((3, 10)), inflate_labels(
            AnnotationSet("pad", 10, 8, [Instance(2, 7)]), 0.1))
    ]
    sched = TrainSchedule(epochs=1, batch_size=2, window=24, seed=1)
    params, losses = train_detector(data, TINY, sched)
    assert len(losses) == 1 and np.isfinite(losses[0])


def test_training_rejects_bad_shapes():
    good = tiny_dataset(2)
    bad = [(np.zeros((5, 32)), good[0][1])]
    with pytest.raises(ShapeError):
        train_detector(bad, TINY, TrainSchedule(epochs=1))
    with pytest.raises(ValueError):
        train_detector([], TINY, TrainSchedule(epochs=1))
    mismatched = [(good[0][0], inflate_labels(
        AnnotationSet("v", 16, 8, [Instance(2, 9)]), 0.1))]
    with pytest.raises(ShapeError):
        train_detector(mismatched, TINY,
                       TrainSchedule(epochs=1, window=32))
