"""Command line interface.

Subcommands cover the full pipeline: synthesise data, train the
detector, train the compatibility network, emit proposals, evaluate
them, and plot the resulting curves.  Exit codes: 0 success, 2 usage or
configuration problems, 3 data/file problems, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import os
import sys
from typing import Optional

from .config import RunConfig, format_config, load_config
from .detector import detector_forward, load_detector, save_detector, train_detector
from .errors import ConfigError, DataFormatError, NumericError, PackingError
from .labeling import inflate_labels, read_annotations, write_annotations
from .metrics import (ar_an_curve, auc_ar_an, average_recall_at_an, iou_1d,
                      map_table, recall_vs_iou)
from .proposals import (duration_stats, load_phi, phi_training_samples,
                        propose_video, read_proposals, save_phi, train_phi,
                        write_proposals)
from .report import (read_curve_csv, write_curve_csv, write_line_chart,
                     write_loss_csv, write_report)
from .synth import generate_videos, read_features, write_features


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(p: _Parser):
    p.add_argument("--config", help="config file (INI-style key = value)")
    p.add_argument("--seed", type=int, help="override [run] seed")


def _load(args, extra: Optional[dict] = None) -> RunConfig:
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    return load_config(args.config, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="tapgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate synthetic train/val data")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-detector", help="fit the boundary detector")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="per-epoch loss CSV "
                                      "(default: <out>.loss.csv)")
    p.set_defaults(func=_cmd_train_detector)

    p = sub.add_parser("train-phi", help="fit the compatibility network")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.set_defaults(func=_cmd_train_phi)

    p = sub.add_parser("propose", help="emit scored proposals")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--phi", required=True)
    p.add_argument("--out", required=True, help="proposal table path")
    p.add_argument("--nms", choices=("greedy", "soft"),
                   help="override [proposals] nms")
    p.add_argument("--top-k", type=int, help="override [proposals] top_k")
    p.add_argument("--threads", type=int, help="override [run] threads")
    p.add_argument("--annotations",
                   help="ground truth (required with --oracle-classes)")
    p.add_argument("--oracle-classes", action="store_true",
                   help="attach the class of the best-overlapping instance "
                        "to each proposal (for mAP smoke checks)")
    p.set_defaults(func=_cmd_propose)

    p = sub.add_parser("eval", help="score a proposal table")
    _add_common(p)
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="render CSV curves to SVG")
    _add_common(p)
    p.add_argument("--ar-csv", help="AR-vs-AN curve CSV")
    p.add_argument("--recall-csv", help="recall-vs-IoU curve CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("print-config", help="print the merged configuration")
    _add_common(p)
    p.set_defaults(func=_cmd_print_config)

    return parser


def _cmd_synth(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    train = generate_videos(cfg.synth, 0, cfg.synth.train_videos)
    val = generate_videos(cfg.synth, cfg.synth.train_videos,
                          cfg.synth.val_videos)
    for name, part in (("train", train), ("val", val)):
        write_features(os.path.join(args.out, "features_%s.tsaf" % name),
                       [seq for seq, _ in part])
        write_annotations(os.path.join(args.out, "annotations_%s.txt" % name),
                          [ann for _, ann in part])
        total = sum(len(ann.instances) for _, ann in part)
        print("synth: %s: %d videos, %d instances" % (name, len(part), total))
    return 0


def _match_features_to_annotations(sequences, annotations):
    by_id = {a.video_id: a for a in annotations}
    pairs = []
    for seq in sequences:
        ann = by_id.get(seq.video_id)
        if ann is None:
            raise DataFormatError("video %r has features but no annotations"
                                  % seq.video_id)
        if ann.length != seq.length:
            raise DataFormatError(
                "video %r: feature length %d != annotation length %d"
                % (seq.video_id, seq.length, ann.length))
        pairs.append((seq, ann))
    return pairs


def _cmd_train_detector(args) -> int:
    cfg = _load(args)
    sequences = read_features(args.features)
    annotations = read_annotations(args.annotations)
    pairs = _match_features_to_annotations(sequences, annotations)
    dataset = [(seq.features, inflate_labels(ann, cfg.labeling_delta))
               for seq, ann in pairs]
    params, losses = train_detector(dataset, cfg.detector, cfg.detector_train)
    save_detector(args.out, params)
    write_loss_csv(args.loss_csv or args.out + ".loss.csv", losses)
    print("train-detector: %d videos, %d epochs, final loss %s"
          % (len(dataset), len(losses), repr(losses[-1])))
    return 0


def _resolve_duration_bounds(cfg: RunConfig, annotations) -> tuple[float, float]:
    lo, hi = cfg.proposals.duration_min, cfg.proposals.duration_max
    if lo is None or hi is None:
        stat_lo, stat_hi = duration_stats(annotations)
        lo = stat_lo if lo is None else lo
        hi = stat_hi if hi is None else hi
    return float(lo), float(hi)


def _cmd_train_phi(args) -> int:
    cfg = _load(args)
    sequences = read_features(args.features)
    annotations = read_annotations(args.annotations)
    pairs = _match_features_to_annotations(sequences, annotations)
    detector_params = load_detector(args.detector, cfg.detector)
    lo, hi = _resolve_duration_bounds(cfg, [ann for _, ann in pairs])
    videos = [(seq.video_id, seq.features) for seq, _ in pairs]
    ann_map = {ann.video_id: ann for _, ann in pairs}
    feats, targets = phi_training_samples(
        videos, ann_map, detector_params, cfg.proposals, lo, hi, seed=cfg.seed)
    params, losses = train_phi(feats, targets, cfg.phi_train)
    save_phi(args.out, params, lo, hi)
    write_loss_csv(args.loss_csv or args.out + ".loss.csv", losses)
    print("train-phi: %d samples, %d epochs, final loss %s"
          % (feats.shape[0], len(losses), repr(losses[-1])))
    return 0


def _oracle_class(proposal, annotations):
    best_iou = 0.0
    best = None
    for inst in annotations.instances:
        v = iou_1d(proposal.start, proposal.end, inst.start, inst.end)
        if v > best_iou:
            best_iou = v
            best = inst
    if best is None:
        centre = (proposal.start + proposal.end) / 2.0
        for inst in annotations.instances:
            d = abs((inst.start + inst.end) / 2.0 - centre)
            if best is None or d < best[0]:
                best = (d, inst)
        best = best[1] if best is not None else None
    return best.class_id if best is not None else 0


def _cmd_propose(args) -> int:
    extra = {}
    if args.nms is not None:
        extra[("proposals", "nms")] = args.nms
    if args.top_k is not None:
        extra[("proposals", "top_k")] = str(args.top_k)
    if args.threads is not None:
        extra[("run", "threads")] = str(args.threads)
    cfg = _load(args, extra)
    if args.oracle_classes and not args.annotations:
        raise _UsageError("--oracle-classes requires --annotations")
    sequences = read_features(args.features)
    detector_params = load_detector(args.detector, cfg.detector)
    phi_params, ck_lo, ck_hi = load_phi(args.phi)
    lo = cfg.proposals.duration_min
    hi = cfg.proposals.duration_max
    pcfg = dataclasses.replace(cfg.proposals,
                               duration_min=ck_lo if lo is None else lo,
                               duration_max=ck_hi if hi is None else hi)
    ann_map = {}
    if args.annotations:
        ann_map = {a.video_id: a for a in read_annotations(args.annotations)}

    def work(seq):
        triple = detector_forward(seq.features, detector_params)
        props = propose_video(triple, phi_params, pcfg)
        if args.oracle_classes:
            ann = ann_map.get(seq.video_id)
            if ann is None:
                raise DataFormatError("video %r has no annotations for "
                                      "--oracle-classes" % seq.video_id)
            props = [dataclasses.replace(p, class_id=_oracle_class(p, ann))
                     for p in props]
        return seq.video_id, props

    if cfg.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(cfg.threads) as pool:
            results = dict(pool.map(work, sequences))
    else:
        results = dict(work(seq) for seq in sequences)
    write_proposals(args.out, results)
    total = sum(len(v) for v in results.values())
    print("propose: %d videos, %d proposals (nms=%s, top_k=%d)"
          % (len(results), total, pcfg.nms, pcfg.top_k))
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    proposals = read_proposals(args.proposals)
    annotations = {a.video_id: a for a in read_annotations(args.annotations)}
    os.makedirs(args.out, exist_ok=True)
    grid = cfg.eval.iou_grid()
    an_max = cfg.eval.an_max
    curve = ar_an_curve(proposals, annotations, an_max, grid)
    auc = auc_ar_an(proposals, annotations, an_max, grid)
    recall_points = recall_vs_iou(proposals, annotations, an_max, grid)

    entries: list[tuple[str, object]] = [
        ("videos", len(annotations)),
        ("instances", sum(len(a.instances) for a in annotations.values())),
        ("proposals", sum(len(p) for p in proposals.values())),
    ]
    for an in cfg.eval.an_values:
        value = (float(curve[an]) if an <= an_max else
                 average_recall_at_an(proposals, annotations, an, grid))
        entries.append(("ar@%d" % an, value))
    entries.append(("auc@%d" % an_max, auc))
    has_classes = any(p.class_id is not None
                      for props in proposals.values() for p in props)
    if has_classes:
        table = map_table(proposals, annotations, cfg.eval.map_grid())
        for thr, value in table:
            entries.append(("map@%s" % repr(thr), value))
        entries.append(("map_mean", float(sum(v for _, v in table) / len(table))))
    write_report(os.path.join(args.out, "report.txt"), entries)
    write_curve_csv(os.path.join(args.out, "ar_an.csv"), ("an", "ar"),
                    [(float(i), float(v)) for i, v in enumerate(curve)])
    write_curve_csv(os.path.join(args.out, "recall_iou.csv"),
                    ("iou", "recall"), recall_points)
    for key, value in entries:
        print("%s=%s" % (key, repr(value) if isinstance(value, float) else value))
    return 0


def _cmd_plot(args) -> int:
    if not args.ar_csv and not args.recall_csv:
        raise _UsageError("plot needs --ar-csv and/or --recall-csv")
    os.makedirs(args.out, exist_ok=True)
    if args.ar_csv:
        _, points = read_curve_csv(args.ar_csv)
        write_line_chart(os.path.join(args.out, "ar_an.svg"), points,
                         "Average recall vs proposal budget",
                         "proposals per video", "average recall")
        print("plot: wrote ar_an.svg")
    if args.recall_csv:
        _, points = read_curve_csv(args.recall_csv)
        write_line_chart(os.path.join(args.out, "recall_iou.svg"), points,
                         "Recall vs IoU threshold",
                         "IoU threshold", "recall")
        print("plot: wrote recall_iou.svg")
    return 0


def _cmd_print_config(args) -> int:
    cfg = _load(args)
    sys.stdout.write(format_config(cfg))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise _UsageError("a command is required (try --help)")
        return args.func(args)
    except _UsageError as exc:
        print("error: usage: %s" % exc, file=sys.stderr)
        return 2
    except ConfigError as exc:
        print("error: config: %s" % exc, file=sys.stderr)
        return 2
    except (DataFormatError, PackingError) as exc:
        print("error: data: %s" % exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print("error: data: %s" % exc, file=sys.stderr)
        return 3
    except NumericError as exc:
        print("error: numeric: %s" % exc, file=sys.stderr)
        return 4
    except ValueError as exc:
        print("error: data: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
