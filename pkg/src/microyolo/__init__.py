"""Tiny grid-cell object detector toolchain for microcontroller targets:
training, int8 quantization-aware training, bit-exact integer inference,
VOC-style mAP evaluation and deployment profiling."""

__version__ = "0.1.0"

from .config import (ModelConfig, LayerSpec, parse_model_config, config_text,
                     count_params, count_macs, check_deployability,
                     reference_config, desk_config)
from .head import Box, Detection, GridTarget, encode_targets, yolo_loss, iou, \
    decode_predictions, nms
from .net import Network, Int8Network, build_quantized_layers
from .quant import QuantParams, QuantizedLayer, choose_scale, quantize, \
    dequantize, fake_quant_forward, fake_quant_backward
from .train import TrainConfig, train, network_from_checkpoint
from .evaluation import evaluate, eval_matrix, average_precision, \
    match_detections
from .profiler import compare_report, footprint, inference_efficiency, \
    power_efficiency, energy_per_inference

__all__ = [
    "ModelConfig", "LayerSpec", "parse_model_config", "config_text",
    "count_params", "count_macs", "check_deployability", "reference_config",
    "desk_config", "Box", "Detection", "GridTarget", "encode_targets",
    "yolo_loss", "iou", "decode_predictions", "nms", "Network", "Int8Network",
    "build_quantized_layers", "QuantParams", "QuantizedLayer", "choose_scale",
    "quantize", "dequantize", "fake_quant_forward", "fake_quant_backward",
    "TrainConfig", "train", "network_from_checkpoint", "evaluate",
    "eval_matrix", "average_precision", "match_detections", "compare_report",
    "footprint", "inference_efficiency", "power_efficiency",
    "energy_per_inference",
]
