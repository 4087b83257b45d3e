"""Fully spiking DDIM: a Spiking UNet trained with surrogate gradients, sampled in signal space."""

from .schedule import NoiseSchedule, ddim_coefficients, make_cosine_schedule
from .snn import NeuronConfig, SignalTensor, decode_average, encode_direct, lif, lif_step
from .unet import SpikingUNet, UNetConfig, build_unet, unet_forward

__all__ = [
    "NeuronConfig",
    "NoiseSchedule",
    "SignalTensor",
    "SpikingUNet",
    "UNetConfig",
    "build_unet",
    "ddim_coefficients",
    "decode_average",
    "encode_direct",
    "lif",
    "lif_step",
    "make_cosine_schedule",
    "unet_forward",
]
__version__ = "0.1.0"
