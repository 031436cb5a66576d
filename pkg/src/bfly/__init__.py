"""Trainable butterfly networks for fast linear layers, linear
encoder-decoders, and learned sketching."""

from . import (  # noqa: F401
    butterfly,
    datagen,
    encdec,
    errors,
    fjlt,
    grad,
    linalg,
    replace,
    sketch,
)
from .butterfly import (  # noqa: F401
    ButterflyNetwork,
    TruncatedButterfly,
    layer_connectivity,
    new_hadamard,
    new_identity,
)
from .fjlt import sample_fjlt  # noqa: F401
from .grad import Chain, TrainConfig, train  # noqa: F401
from .rng import Rng  # noqa: F401

__version__ = "0.1.0"
