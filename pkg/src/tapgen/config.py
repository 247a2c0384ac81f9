"""Run configuration: defaults, file parsing, and canonical printing.

Config files are INI-style ``key = value`` lines under ``[section]``
headers; ``#`` and ``;`` start comments.  Every key has a default, so an
empty (or absent) file is a valid configuration.  Unknown sections or
keys are rejected rather than ignored, and ``print-config`` emits the
merged configuration in a form that parses back to the same values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Mapping, Optional

from .detector import BranchSpec, DetectorConfig, TrainSchedule
from .errors import ConfigError
from .metrics import grid_range
from .proposals import ProposalConfig
from .synth import SynthConfig


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation grids and proposal budgets."""

    iou_start: float = 0.5
    iou_step: float = 0.05
    iou_stop: float = 1.0
    an_values: tuple[int, ...] = (10, 20, 50, 100)
    an_max: int = 100
    map_start: float = 0.3
    map_step: float = 0.1
    map_stop: float = 0.7

    def __post_init__(self):
        grid_range(self.iou_start, self.iou_step, self.iou_stop)
        grid_range(self.map_start, self.map_step, self.map_stop)
        if self.an_max < 1 or any(v < 1 for v in self.an_values):
            raise ValueError("proposal budgets must be >= 1")

    def iou_grid(self) -> tuple[float, ...]:
        return grid_range(self.iou_start, self.iou_step, self.iou_stop)

    def map_grid(self) -> tuple[float, ...]:
        return grid_range(self.map_start, self.map_step, self.map_stop)


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = SynthConfig()
    labeling_delta: float = 0.1
    detector: DetectorConfig = DetectorConfig()
    detector_train: TrainSchedule = TrainSchedule()
    phi_train: TrainSchedule = TrainSchedule()
    proposals: ProposalConfig = ProposalConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.labeling_delta < 0:
            raise ValueError("labeling delta must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ValueError("expected a comma separated list of integers")
    return tuple(int(v) for v in items)


def _parse_branches(text: str) -> tuple[BranchSpec, ...]:
    # "1,2,3x2;1,3,5x2" -> two branches of depth 2.
    specs = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "x" in part:
            dil_text, depth_text = part.rsplit("x", 1)
            depth = int(depth_text)
        else:
            dil_text, depth = part, 2
        dils = tuple(int(v.strip()) for v in dil_text.split(","))
        if len(dils) != 3:
            raise ValueError("branch %r needs exactly three dilations" % part)
        specs.append(BranchSpec(dilations=dils, depth=depth))
    if not specs:
        raise ValueError("expected at least one branch spec")
    return tuple(specs)


def _format_branches(branches: tuple[BranchSpec, ...]) -> str:
    return ";".join("%d,%d,%dx%d" % (b.dilations + (b.depth,))
                    for b in branches)


def _parse_duration_bound(text: str) -> Optional[float]:
    if text.strip().lower() == "auto":
        return None
    return float(text)


def _format_float(v: float) -> str:
    return repr(float(v))


def _format_plain(v) -> str:
    return str(v)


def _format_int_tuple(v: tuple[int, ...]) -> str:
    return ",".join(str(x) for x in v)


def _format_duration_bound(v: Optional[float]) -> str:
    return "auto" if v is None else repr(float(v))


# (section, key) -> (parse, format, getter). Getter pulls the current
# value out of a RunConfig so printing and round-tripping share one table.
_SCHEMA = {
    ("synth", "train_videos"): (_parse_int, _format_plain,
                                lambda c: c.synth.train_videos),
    ("synth", "val_videos"): (_parse_int, _format_plain,
                              lambda c: c.synth.val_videos),
    ("synth", "length"): (_parse_int, _format_plain, lambda c: c.synth.length),
    ("synth", "feature_dim"): (_parse_int, _format_plain,
                               lambda c: c.synth.feature_dim),
    ("synth", "classes"): (_parse_int, _format_plain,
                           lambda c: c.synth.classes),
    ("synth", "instances_min"): (_parse_int, _format_plain,
                                 lambda c: c.synth.instances_min),
    ("synth", "instances_max"): (_parse_int, _format_plain,
                                 lambda c: c.synth.instances_max),
    ("synth", "duration_min"): (_parse_float, _format_float,
                                lambda c: c.synth.duration_min),
    ("synth", "duration_max"): (_parse_float, _format_float,
                                lambda c: c.synth.duration_max),
    ("synth", "signal_strength"): (_parse_float, _format_float,
                                   lambda c: c.synth.signal_strength),
    ("synth", "noise_std"): (_parse_float, _format_float,
                             lambda c: c.synth.noise_std),
    ("synth", "stride"): (_parse_int, _format_plain, lambda c: c.synth.stride),
    ("labeling", "delta"): (_parse_float, _format_float,
                            lambda c: c.labeling_delta),
    ("detector", "input_dim"): (_parse_int, _format_plain,
                                lambda c: c.detector.input_dim),
    ("detector", "shared_channels"): (_parse_int_tuple, _format_int_tuple,
                                      lambda c: c.detector.shared_channels),
    ("detector", "branches"): (_parse_branches, _format_branches,
                               lambda c: c.detector.branches),
    ("detector", "head_channels"): (_parse_int, _format_plain,
                                    lambda c: c.detector.head_channels),
    ("detector", "kernel_size"): (_parse_int, _format_plain,
                                  lambda c: c.detector.kernel_size),
    ("detector_train", "epochs"): (_parse_int, _format_plain,
                                   lambda c: c.detector_train.epochs),
    ("detector_train", "batch_size"): (_parse_int, _format_plain,
                                       lambda c: c.detector_train.batch_size),
    ("detector_train", "learning_rate"): (
        _parse_float, _format_float, lambda c: c.detector_train.learning_rate),
    ("detector_train", "learning_rate_late"): (
        _parse_float, _format_float,
        lambda c: c.detector_train.learning_rate_late),
    ("detector_train", "switch_epoch"): (
        _parse_int, _format_plain, lambda c: c.detector_train.switch_epoch),
    ("detector_train", "momentum"): (_parse_float, _format_float,
                                     lambda c: c.detector_train.momentum),
    ("detector_train", "window"): (_parse_int, _format_plain,
                                   lambda c: c.detector_train.window),
    ("phi_train", "epochs"): (_parse_int, _format_plain,
                              lambda c: c.phi_train.epochs),
    ("phi_train", "batch_size"): (_parse_int, _format_plain,
                                  lambda c: c.phi_train.batch_size),
    ("phi_train", "learning_rate"): (_parse_float, _format_float,
                                     lambda c: c.phi_train.learning_rate),
    ("phi_train", "learning_rate_late"): (
        _parse_float, _format_float, lambda c: c.phi_train.learning_rate_late),
    ("phi_train", "switch_epoch"): (_parse_int, _format_plain,
                                    lambda c: c.phi_train.switch_epoch),
    ("phi_train", "momentum"): (_parse_float, _format_float,
                                lambda c: c.phi_train.momentum),
    ("proposals", "threshold"): (_parse_float, _format_float,
                                 lambda c: c.proposals.threshold),
    ("proposals", "tau_mid"): (_parse_float, _format_float,
                               lambda c: c.proposals.tau_mid),
    ("proposals", "duration_min"): (
        _parse_duration_bound, _format_duration_bound,
        lambda c: c.proposals.duration_min),
    ("proposals", "duration_max"): (
        _parse_duration_bound, _format_duration_bound,
        lambda c: c.proposals.duration_max),
    ("proposals", "samples"): (_parse_int, _format_plain,
                               lambda c: c.proposals.samples),
    ("proposals", "extension"): (_parse_float, _format_float,
                                 lambda c: c.proposals.extension),
    ("proposals", "nms"): (_parse_str, _format_plain, lambda c: c.proposals.nms),
    ("proposals", "nms_iou"): (_parse_float, _format_float,
                               lambda c: c.proposals.nms_iou),
    ("proposals", "soft_sigma"): (_parse_float, _format_float,
                                  lambda c: c.proposals.soft_sigma),
    ("proposals", "soft_floor"): (_parse_float, _format_float,
                                  lambda c: c.proposals.soft_floor),
    ("proposals", "top_k"): (_parse_int, _format_plain,
                             lambda c: c.proposals.top_k),
    ("eval", "iou_start"): (_parse_float, _format_float,
                            lambda c: c.eval.iou_start),
    ("eval", "iou_step"): (_parse_float, _format_float,
                           lambda c: c.eval.iou_step),
    ("eval", "iou_stop"): (_parse_float, _format_float,
                           lambda c: c.eval.iou_stop),
    ("eval", "an_values"): (_parse_int_tuple, _format_int_tuple,
                            lambda c: c.eval.an_values),
    ("eval", "an_max"): (_parse_int, _format_plain, lambda c: c.eval.an_max),
    ("eval", "map_start"): (_parse_float, _format_float,
                            lambda c: c.eval.map_start),
    ("eval", "map_step"): (_parse_float, _format_float,
                           lambda c: c.eval.map_step),
    ("eval", "map_stop"): (_parse_float, _format_float,
                           lambda c: c.eval.map_stop),
    ("run", "seed"): (_parse_int, _format_plain, lambda c: c.seed),
    ("run", "threads"): (_parse_int, _format_plain, lambda c: c.threads),
}

_SECTIONS = []
for _sec, _ in _SCHEMA:
    if _sec not in _SECTIONS:
        _SECTIONS.append(_sec)


def _build(values: dict[tuple[str, str], object]) -> RunConfig:
    def get(sec, key):
        return values[(sec, key)]

    try:
        synth = SynthConfig(
            train_videos=get("synth", "train_videos"),
            val_videos=get("synth", "val_videos"),
            length=get("synth", "length"),
            feature_dim=get("synth", "feature_dim"),
            classes=get("synth", "classes"),
            instances_min=get("synth", "instances_min"),
            instances_max=get("synth", "instances_max"),
            duration_min=get("synth", "duration_min"),
            duration_max=get("synth", "duration_max"),
            signal_strength=get("synth", "signal_strength"),
            noise_std=get("synth", "noise_std"),
            stride=get("synth", "stride"),
            seed=get("run", "seed"))
        detector = DetectorConfig(
            input_dim=get("detector", "input_dim"),
            shared_channels=get("detector", "shared_channels"),
            branches=get("detector", "branches"),
            head_channels=get("detector", "head_channels"),
            kernel_size=get("detector", "kernel_size"))
        detector_train = TrainSchedule(
            epochs=get("detector_train", "epochs"),
            batch_size=get("detector_train", "batch_size"),
            learning_rate=get("detector_train", "learning_rate"),
            learning_rate_late=get("detector_train", "learning_rate_late"),
            switch_epoch=get("detector_train", "switch_epoch"),
            momentum=get("detector_train", "momentum"),
            window=get("detector_train", "window"),
            seed=get("run", "seed"))
        phi_train = TrainSchedule(
            epochs=get("phi_train", "epochs"),
            batch_size=get("phi_train", "batch_size"),
            learning_rate=get("phi_train", "learning_rate"),
            learning_rate_late=get("phi_train", "learning_rate_late"),
            switch_epoch=get("phi_train", "switch_epoch"),
            momentum=get("phi_train", "momentum"),
            window=256,
            seed=get("run", "seed"))
        proposal_cfg = ProposalConfig(
            threshold=get("proposals", "threshold"),
            tau_mid=get("proposals", "tau_mid"),
            duration_min=get("proposals", "duration_min"),
            duration_max=get("proposals", "duration_max"),
            samples=get("proposals", "samples"),
            extension=get("proposals", "extension"),
            nms=get("proposals", "nms"),
            nms_iou=get("proposals", "nms_iou"),
            soft_sigma=get("proposals", "soft_sigma"),
            soft_floor=get("proposals", "soft_floor"),
            top_k=get("proposals", "top_k"))
        eval_cfg = EvalConfig(
            iou_start=get("eval", "iou_start"),
            iou_step=get("eval", "iou_step"),
            iou_stop=get("eval", "iou_stop"),
            an_values=get("eval", "an_values"),
            an_max=get("eval", "an_max"),
            map_start=get("eval", "map_start"),
            map_step=get("eval", "map_step"),
            map_stop=get("eval", "map_stop"))
        return RunConfig(
            synth=synth,
            labeling_delta=get("labeling", "delta"),
            detector=detector,
            detector_train=detector_train,
            phi_train=phi_train,
            proposals=proposal_cfg,
            eval=eval_cfg,
            seed=get("run", "seed"),
            threads=get("run", "threads"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


_DEFAULTS = RunConfig()


def load_config(path=None,
                overrides: Optional[Mapping[tuple[str, str], str]] = None
                ) -> RunConfig:
    """Merge defaults, an optional config file, and override strings.

    ``overrides`` maps (section, key) to unparsed value text and is
    applied after the file.  Raises ConfigError for unknown keys, bad
    values, or values that fail the dataclass validators.
    """
    values = {sk: getter(_DEFAULTS) for sk, (_, _, getter) in _SCHEMA.items()}
    if path is not None:
        parser = configparser.RawConfigParser()
        parser.optionxform = str  # keep keys case sensitive
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh, source=str(path))
        except OSError as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc)) from exc
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        for section in parser.sections():
            for key in parser.options(section):
                sk = (section, key)
                if sk not in _SCHEMA:
                    raise ConfigError(
                        "%s: unknown config key [%s] %s" % (path, section, key))
                parse = _SCHEMA[sk][0]
                raw = parser.get(section, key)
                try:
                    values[sk] = parse(raw)
                except ValueError as exc:
                    raise ConfigError("%s: [%s] %s: %s"
                                      % (path, section, key, exc)) from exc
    for sk, raw in (overrides or {}).items():
        if sk not in _SCHEMA:
            raise ConfigError("unknown config key [%s] %s" % sk)
        try:
            values[sk] = _SCHEMA[sk][0](raw)
        except ValueError as exc:
            raise ConfigError("[%s] %s: %s" % (sk[0], sk[1], exc)) from exc
    return _build(values)


def format_config(cfg: RunConfig) -> str:
    """Canonical text for print-config; parses back to equal values."""
    lines = []
    for section in _SECTIONS:
        lines.append("[%s]" % section)
        for (sec, key), (_, fmt, getter) in _SCHEMA.items():
            if sec == section:
                lines.append("%s = %s" % (key, fmt(getter(cfg))))
        lines.append("")
    return "\n".join(lines)
