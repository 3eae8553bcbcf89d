"""Learned octree geometry codec for spinning-LiDAR point clouds.

A non-causal context backbone runs once per window of octree nodes; a small
stage-scalable predictor handles intra-level dependencies, so the number of
decoding stages can be picked per bitstream without retraining.
"""
from .codec import decode_frame, encode_frame, encode_frame_fully_causal
from .errors import CodecError
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint

__all__ = ["CodecError", "Model", "ModelConfig", "decode_frame", "encode_frame",
           "encode_frame_fully_causal", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
