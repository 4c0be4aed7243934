"""Network assembly, training and inference."""
from .config import ModelConfig, TrainConfig, load_config_file
from .network import (
    ModelParams,
    backward,
    forward,
    infer,
    init_params,
    input_features,
    labels_to_volume,
    loss_and_grads,
    predict_labels,
)
from .train import Case, TrainState, load_case, load_checkpoint, make_case, save_checkpoint, train
from .flops import FlopReport, count_flops, count_flops_for_hierarchy, time_inference
