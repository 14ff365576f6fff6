"""Adam and RMSprop over named parameter arrays."""

from dataclasses import dataclass

import numpy as np

from errors import ConfigError

OPTIMIZER_KINDS = ("adam", "rmsprop")


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer hyperparameters.

    ``gamma`` is the RMSprop moving average factor; it is multiplied by
    ``gamma_decay`` after every step.
    """

    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.9
    gamma_decay: float = 0.999
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError("unknown optimizer %r" % self.kind, "optimizer")
        if self.learning_rate < 0:
            raise ConfigError("must be >= 0, got %r" % self.learning_rate,
                              "learning_rate")
        for name in ("beta1", "beta2", "gamma"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError("must lie in (0, 1), got %r"
                                  % getattr(self, name), name)
        if not 0.0 < self.gamma_decay <= 1.0:
            raise ConfigError("must lie in (0, 1], got %r" % self.gamma_decay,
                              "gamma_decay")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0",
                              "optimizer")


class Adam:
    """Adam with bias-corrected moments, one pair of moments per name."""

    def __init__(self, config):
        self.config = config
        self.t = 0
        self.m = {}
        self.v = {}

    def update(self, params, grads):
        """Update ``params`` in place.

        :param params: Name to parameter array
        :type params: dict[str, np.ndarray]
        :param grads: Name to gradient, same shapes
        :type grads: dict[str, np.ndarray]
        """
        c = self.config
        self.t += 1
        for name in sorted(grads):
            grad = grads[name]
            if c.weight_decay:
                grad = grad + c.weight_decay * params[name]
            m = self.m.get(name, np.zeros_like(grad))
            v = self.v.get(name, np.zeros_like(grad))
            m = c.beta1 * m + (1.0 - c.beta1) * grad
            v = c.beta2 * v + (1.0 - c.beta2) * grad * grad
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - c.beta1 ** self.t)
            v_hat = v / (1.0 - c.beta2 ** self.t)
            params[name] -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)

    def state_arrays(self):
        ret = {"m/" + k: v for k, v in self.m.items()}
        ret.update({"v/" + k: v for k, v in self.v.items()})
        return ret

    def load_arrays(self, t, arrays):
        self.t = t
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}


class RMSprop:
    """RMSprop whose averaging factor decays exponentially with steps."""

    def __init__(self, config):
        self.config = config
        self.t = 0
        self.cache = {}

    @property
    def gamma(self):
        return self.config.gamma * self.config.gamma_decay ** self.t

    def update(self, params, grads):
        c = self.config
        gamma = self.gamma
        self.t += 1
        for name in sorted(grads):
            grad = grads[name]
            if c.weight_decay:
                grad = grad + c.weight_decay * params[name]
            cache = self.cache.get(name, np.zeros_like(grad))
            cache = gamma * cache + (1.0 - gamma) * grad * grad
            self.cache[name] = cache
            params[name] -= c.learning_rate * grad / (np.sqrt(cache) + c.eps)

    def state_arrays(self):
        return {"cache/" + k: v for k, v in self.cache.items()}

    def load_arrays(self, t, arrays):
        self.t = t
        self.cache = {k[6:]: v for k, v in arrays.items()
                      if k.startswith("cache/")}


def make_optimizer(config):
    if config.kind == "adam":
        return Adam(config)
    return RMSprop(config)
