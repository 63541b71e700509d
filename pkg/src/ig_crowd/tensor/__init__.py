from .autograd import Tensor, TensorError, ShapeError, backward, no_grad, is_grad_enabled, as_tensor
from .ops import conv2d, maxpool2, relu, fully_connected, global_avg_pool, softmax, softmax_cross_entropy, crop
from .params import ParamEntry, ParamSet, sgd_step, uniform_fan_in
from .archive import ArchiveError, save_tensor, load_tensor, encode_tensor, decode_tensor

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "conv2d",
    "maxpool2",
    "relu",
    "fully_connected",
    "global_avg_pool",
    "softmax",
    "softmax_cross_entropy",
    "crop",
    "ParamEntry",
    "ParamSet",
    "sgd_step",
    "uniform_fan_in",
    "ArchiveError",
    "save_tensor",
    "load_tensor",
    "encode_tensor",
    "decode_tensor",
]
