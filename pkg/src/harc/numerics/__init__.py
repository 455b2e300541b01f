from harc.numerics.checkpoint import (
    crc_of,
    decode_tensors,
    encode_tensors,
    read_container,
    write_container,
)
from harc.numerics.grad import forward_backward, gradient_check
from harc.numerics.params import (
    AdamState,
    Parameter,
    ParameterStore,
    adam_step,
    init_embedding,
    init_glorot,
    make_rng,
)
from harc.numerics.tensor import Tensor, masked_softmax

__all__ = [
    "AdamState",
    "Parameter",
    "ParameterStore",
    "Tensor",
    "adam_step",
    "crc_of",
    "decode_tensors",
    "encode_tensors",
    "forward_backward",
    "gradient_check",
    "init_embedding",
    "init_glorot",
    "make_rng",
    "masked_softmax",
    "read_container",
    "write_container",
]
