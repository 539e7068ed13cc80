"""Bit-exact MX6/MX9 mixed-precision quantization and accelerator latency modeling."""

__version__ = "0.1.0"

from .accel import HardwareConfig, LatencyReport, WorkloadSpec, gemm_cycles, layer_latency, model_latency, peak_tops
from .codec import MX6, MX9, MxFormatSpec, MxGroup, MxTensor, decode_group, decode_tensor, encode_group, encode_tensor, group_dot
from .gemm import attention_forward, linear_forward, reference_forward
from .planner import build_attention_plan, build_linear_plan, channel_magnitudes, consistency_score
from .sweep import SweepConfig, run_sweep
from .tensor_io import load_bundle, read_tensor, write_tensor
