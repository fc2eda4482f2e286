"""CNN/DNN acoustic model: topology, layers, dropout and exact derivatives."""

from .dropout import DropoutContext, DropoutMismatchError, DropoutPlan, dropout_apply, keep_mask
from .layers import pool_lp, pool_max, pool_stochastic, stochastic_probabilities
from .model import (
    CROSS_ENTROPY,
    Network,
    ParameterLayout,
    SoftmaxCrossEntropy,
    SquaredError,
    backward,
    forward,
    gauss_newton_product,
    load_params,
    save_params,
)
from .spec import (
    ActivationSpec,
    ConfigError,
    ConvLayerSpec,
    DropoutSpec,
    FullSpec,
    NetworkSpec,
    PoolingSpec,
    build_multiscale,
    conv_stream,
    default_bands,
    default_cnn,
    full_stack,
    validate_network_spec,
)


def conv_forward(x, spec, weights, biases):
    """Single convolution on one ``F x T x C`` input.

    ``weights`` is ``bands x (kf*kt*C) x maps`` (one band for full sharing);
    the result is ``F' x T' x maps``.
    """
    import numpy as np

    from .layers import Conv

    x = np.asarray(x, dtype=float)
    if not spec.id:
        spec.id = "conv"
    validate_network_spec(NetworkSpec(x.shape, 2, [[spec]]))
    layer = Conv(spec, x.shape)
    W = np.asarray(weights, dtype=float).reshape(layer.num_bands, layer.K, layer.M)
    b = np.asarray(biases, dtype=float).reshape(layer.num_bands, layer.M)
    y, _ = layer.forward(x[None], {"W": W, "b": b}, None)
    return y[0]
