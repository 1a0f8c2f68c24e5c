"""TRA-Net: three-region attention for facial action unit detection."""

from importlib.metadata import PackageNotFoundError, version

from tranet.network import ModelConfig, build_model, forward, preset
from tranet.numcore import Tensor
from tranet.numcore.kernels import BACKEND

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.1.0"

__all__ = ["BACKEND", "ModelConfig", "Tensor", "build_model", "forward", "preset", "__version__"]
