"""Desk-scale learned image codec with a hyperprior, masked spatial context,
channel-conditioned slices and a bit-exact range coder."""

__version__ = "0.1.0"

from .coder import Bitstream, BitstreamError, decode_image, encode_image, schedule_steps
from .estimator import ArcheCodec
from .metrics import RDCurve, RDPoint, bd_rate, ms_ssim, psnr
from .model import ArcheModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, rd_loss, train

__all__ = [
    "ArcheCodec", "ArcheModel", "Bitstream", "BitstreamError", "ModelConfig", "RDCurve", "RDPoint",
    "TrainConfig", "bd_rate", "decode_image", "encode_image", "load_checkpoint", "ms_ssim", "psnr",
    "rd_loss", "save_checkpoint", "schedule_steps", "train",
]
