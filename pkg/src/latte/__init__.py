"""Latte: directed latent-variable linear attention, its sliding-window hybrid
and the reference mechanisms it generalizes, in numpy."""
import os as _os

# LATTE_THREADS caps BLAS/OpenMP worker threads; it has to be set before numpy loads.
_threads = _os.environ.get("LATTE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .attention import AttentionParams, sliding_window_attention, softmax_attention  # noqa: E402
from .core import (LatteParams, LatteState, latte_bidirectional, latte_causal_bruteforce,  # noqa: E402
                   latte_causal_scan, latte_step, latte_stream)
from .linear import FeatureMap, linear_attention_direct, linear_attention_recurrent  # noqa: E402
from .macchiato import MacchiatoParams, macchiato_forward  # noqa: E402
from .model import ModelConfig, build_model, forward_lm, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "softmax_attention", "sliding_window_attention",
    "LatteParams", "LatteState", "latte_bidirectional", "latte_causal_bruteforce", "latte_causal_scan",
    "latte_step", "latte_stream",
    "FeatureMap", "linear_attention_direct", "linear_attention_recurrent",
    "MacchiatoParams", "macchiato_forward",
    "ModelConfig", "build_model", "forward_lm", "train",
]
