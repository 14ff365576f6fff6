"""Small feature encoder standing in for a CNN backbone."""

from dataclasses import dataclass, field

import numpy as np

from core_math import normalize_backward, normalize_rows
from errors import ConfigError

ENCODER_KINDS = ("identity", "linear", "mlp")


@dataclass(frozen=True)
class EncoderSpec:
    """Shape and initialization of an encoder.

    :param kind: ``identity``, ``linear`` or ``mlp``
    :type kind: str
    :param input_dim: Feature dimension
    :type input_dim: int
    :param output_dim: Embedding dimension
    :type output_dim: int
    :param hidden_dims: Hidden layer widths, mlp only
    :type hidden_dims: tuple[int]
    :param normalize_output: L2-normalize the embedding
    :type normalize_output: bool
    :param seed: Seed of the weight initialization
    :type seed: int
    """

    kind: str
    input_dim: int
    output_dim: int
    hidden_dims: tuple = field(default_factory=tuple)
    normalize_output: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims",
                           tuple(int(e) for e in self.hidden_dims))
        if self.kind not in ENCODER_KINDS:
            raise ConfigError("unknown encoder %r, expected one of %s"
                              % (self.kind, ", ".join(ENCODER_KINDS)),
                              "encoder")
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if min(dims) < 1:
            raise ConfigError("dimensions must be >= 1, got %s" % (dims,),
                              "encoder")
        if self.kind == "identity" and self.input_dim != self.output_dim:
            raise ConfigError("identity encoder needs input_dim == "
                              "output_dim, got %s and %s"
                              % (self.input_dim, self.output_dim),
                              "embedding_dim")
        if self.kind != "mlp" and self.hidden_dims:
            raise ConfigError("hidden_dims only apply to mlp", "encoder")

    @property
    def layer_dims(self):
        if self.kind == "identity":
            return []
        widths = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(widths, widths[1:]))


class Encoder:
    """Identity, affine map or ReLU MLP with exact backward pass.

    Parameters live in ``params`` as ``w<i>`` (fan_in x fan_out) and
    ``b<i>`` arrays, updated in place by the optimizers.
    """

    def __init__(self, spec, params=None):
        self.spec = spec
        self.params = params if params is not None else self._init_params()

    def _init_params(self):
        generator = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(self.spec.seed, spawn_key=(0,))))
        ret = {}
        for i, (fan_in, fan_out) in enumerate(self.spec.layer_dims):
            bound = 1.0 / np.sqrt(fan_in)
            ret["w%s" % i] = generator.uniform(-bound, bound,
                                               (fan_in, fan_out))
            ret["b%s" % i] = generator.uniform(-bound, bound, fan_out)
        return ret

    @property
    def n_layers(self):
        return len(self.spec.layer_dims)

    def forward(self, features):
        """Get the embeddings of ``features`` and what backward needs.

        :param features: M x input_dim matrix
        :type features: np.ndarray
        :rtype: tuple[np.ndarray, dict]
        """
        h = np.asarray(features, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise ConfigError("features of shape %s for encoder input %s"
                              % (h.shape, self.spec.input_dim), "dataset")
        inputs = []
        for i in range(self.n_layers):
            inputs.append(h)
            h = h @ self.params["w%s" % i] + self.params["b%s" % i]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        cache = {"inputs": inputs}
        if self.spec.normalize_output:
            h, norms = normalize_rows(h)
            cache["unit"], cache["norms"] = h, norms
        return h, cache

    def backward(self, cache, grad_out):
        """Get dL/d(params) from dL/d(embeddings)."""
        grad = grad_out
        if self.spec.normalize_output:
            grad = normalize_backward(cache["unit"], cache["norms"], grad)
        ret = {}
        for i in reversed(range(self.n_layers)):
            h = cache["inputs"][i]
            ret["w%s" % i] = h.T @ grad
            ret["b%s" % i] = grad.sum(axis=0)
            grad = grad @ self.params["w%s" % i].T
            if i > 0:
                # inputs[i] is the ReLU output of the layer below
                grad = grad * (h > 0.0)
        return ret

    def embed(self, features):
        return self.forward(features)[0]
