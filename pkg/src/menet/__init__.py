"""Self-contained multi-encoder volumetric segmentation toolkit.

Everything runs on float64 numpy arrays: the tensor primitives
(tensor_core), a tape-based reverse-mode autodiff engine (autodiff),
the four-encoder network (model), Dice-family losses (losses), the
NIfTI/patch data pipeline (nifti, data), BraTS-style evaluation
(metrics) and the Adam training loop plus CLI (train, cli).
"""

from .model import MENetConfig, ModelParams, build_menet, predict_patch
from .tensor_core import ConvSpec, conv_output_extent, deconv_output_extent

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "MENetConfig",
    "ModelParams",
    "build_menet",
    "conv_output_extent",
    "deconv_output_extent",
    "predict_patch",
    "__version__",
]
