"""Recurrent convolutional encoding models for neural system identification.

Subpackages:
    autodiff   minimal reverse-mode tensor engine (float64)
    models     CPB/RCPB model blocks, readouts, checkpointing
    training   losses, regularization, three-phase Adam schedule
    metrics    CC_raw / CC_max / CC_norm^2 evaluation
    multipath  path-ensemble reformulation, strengths, ablations
    neurophys  virtual neurophysiology (bars, gratings, tuning curves)
    data       dataset container, preprocessing, teacher generator
    cli        batch command-line interface
"""

from .autodiff import Tensor, backward, no_grad
from .backend import BACKEND
from .data import (NeuralDataset, TeacherSpec, generate_teacher_dataset,
                   load_dataset, preprocess, save_dataset, split,
                   training_subset)
from .metrics import cc_max, cc_norm2, cc_raw, dataset_score
from .models import (Model, ModelConfig, build_model, infer, load_model,
                     matched_feedforward_config, param_count, predict,
                     save_model)
from .multipath import (PathDescriptor, ablate_paths, build_multipath_model,
                        component_strength, ensemble_summary, enumerate_paths,
                        infer_multipath, path_strength, readout_weight)
from .neurophys import (TuningCurve, build_suppressive_circuit, length_tuning,
                        map_receptive_fields, size_tuning, suppression_index,
                        temporal_dynamics)
from .training import (Adam, TrainHistory, TrainSchedule, per_iteration_loss,
                       prediction_loss, regularization, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "BACKEND", "Model", "ModelConfig", "NeuralDataset",
    "PathDescriptor", "TeacherSpec", "Tensor", "TrainHistory", "TrainSchedule",
    "TuningCurve", "ablate_paths", "backward", "build_model",
    "build_multipath_model", "build_suppressive_circuit", "cc_max", "cc_norm2",
    "cc_raw", "component_strength", "dataset_score", "ensemble_summary",
    "enumerate_paths", "generate_teacher_dataset", "infer", "infer_multipath",
    "length_tuning", "load_dataset", "load_model", "map_receptive_fields",
    "matched_feedforward_config", "no_grad", "param_count",
    "per_iteration_loss", "predict", "prediction_loss", "preprocess",
    "readout_weight", "regularization", "save_dataset", "save_model",
    "size_tuning", "split", "suppression_index", "temporal_dynamics", "train",
    "training_subset",
]
