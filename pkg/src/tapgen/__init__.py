"""Temporal action proposal toolkit.

From-scratch temporal boundary detection: a tape-based autodiff engine,
a multi-dilation temporal convolution detector for start/mid/end
probabilities, proposal pairing with a learned compatibility score,
non-maximum suppression, and recall-oriented evaluation, plus a
synthetic data generator that makes the whole pipeline testable without
real video features.
"""

__version__ = "0.1.0"

from .autodiff import (ComputeGraph, ParamTensor, Tensor, Tensor2D, average,
                       backward, binary_cross_entropy, conv1d_dilated,
                       fully_connected, relu, scale, sgd_step, sigmoid,
                       smooth_l1)
from .detector import (BranchSpec, DetectorConfig, DetectorParams,
                       ProbabilityTriple, TrainSchedule, detector_forward,
                       init_detector_params, load_detector, receptive_field,
                       save_detector, train_detector)
from .labeling import (AnnotationSet, Instance, LabelTriple, inflate_labels,
                       midpoint, read_annotations, round_half_up,
                       write_annotations)
from .metrics import (auc_ar_an, average_recall_at_an, default_iou_grid,
                      iou_1d, map_at_iou, recall_vs_iou)
from .proposals import (PhiConfig, PhiParams, Proposal, ProposalConfig,
                        bayesian_score, duration_stats, greedy_nms,
                        pair_candidates, phi_features, phi_forward,
                        propose_video, select_candidates, soft_nms, train_phi)
from .synth import (FeatureSequence, SynthConfig, generate_videos,
                    read_features, write_features)

__all__ = [name for name in dir() if not name.startswith("_")]
