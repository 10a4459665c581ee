"""
First-order optimizers. Updates are plain numpy arithmetic in a fixed
order, so they are bitwise reproducible.
"""

import numpy as np

from chromaphase.util import PredictorError

OPTIMIZERS = ("sgd", "adam")


class OptimizerConfig:
    """
    Class representing optimizer hyper-parameters. Immutable.
    """

    def __init__(self, kind="adam", lr=1e-3, momentum=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in OPTIMIZERS:
            raise PredictorError("unknown optimizer {}", repr(kind))
        if lr < 0:
            raise PredictorError("learning rate must be non-negative: {}", lr)
        if not (0 <= momentum < 1 and 0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise PredictorError("momentum and betas must lie in [0, 1)")
        self._kind = kind
        self._lr = float(lr)
        self._momentum = float(momentum)
        self._beta1 = float(beta1)
        self._beta2 = float(beta2)
        self._eps = float(eps)

    @property
    def kind(self):
        return self._kind

    @property
    def lr(self):
        return self._lr

    @property
    def momentum(self):
        return self._momentum

    @property
    def beta1(self):
        return self._beta1

    @property
    def beta2(self):
        return self._beta2

    @property
    def eps(self):
        return self._eps

    def _to_json(self):
        return {
            "kind": self._kind,
            "lr": self._lr,
            "momentum": self._momentum,
            "beta1": self._beta1,
            "beta2": self._beta2,
            "eps": self._eps,
        }

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self._to_json() == other._to_json()

    def __hash__(self):
        return hash(tuple(sorted(self._to_json().items())))


class Optimizer:
    """
    Class holding the per-parameter state (moments, step count) of an
    optimizer run.
    """

    def __init__(self, config):
        self._config = config
        self._step = 0
        self._moments = None

    @property
    def config(self):
        return self._config

    @property
    def step_count(self):
        return self._step

    def _init_moments(self, params):
        slots = 2 if self._config.kind == "adam" else 1
        self._moments = [[np.zeros_like(p) for p in params] for _ in range(slots)]

    def step(self, params, grads):
        """
        Return the updated parameter arrays given the current `params`
        and their `grads` (lists of arrays, same order every call).
        """
        if len(params) != len(grads):
            raise PredictorError("{} parameters but {} gradients", len(params), len(grads))
        if self._moments is None:
            self._init_moments(params)
        self._step += 1
        cfg = self._config
        updated = []
        if cfg.kind == "sgd":
            (velocity,) = self._moments
            for idx, (p, g) in enumerate(zip(params, grads)):
                if cfg.momentum:
                    velocity[idx] = cfg.momentum * velocity[idx] + g
                    g = velocity[idx]
                updated.append(p - cfg.lr * g)
            return updated
        first, second = self._moments
        correction1 = 1 - cfg.beta1 ** self._step
        correction2 = 1 - cfg.beta2 ** self._step
        for idx, (p, g) in enumerate(zip(params, grads)):
            first[idx] = cfg.beta1 * first[idx] + (1 - cfg.beta1) * g
            second[idx] = cfg.beta2 * second[idx] + (1 - cfg.beta2) * g * g
            m_hat = first[idx] / correction1
            v_hat = second[idx] / correction2
            updated.append(p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
        return updated

    def apply(self, tensors):
        """
        Update the `data` of every Tensor in `tensors` in place from its
        accumulated `grad` (missing gradients count as zero).
        """
        params = [t.data for t in tensors]
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
        for t, value in zip(tensors, self.step(params, grads)):
            t.data = value.astype(t.data.dtype, copy=False)

    def state(self):
        """
        Return the optimizer state as (step, {name: array}) for
        checkpointing.
        """
        arrays = {}
        if self._moments is not None:
            for slot, moments in enumerate(self._moments):
                for idx, value in enumerate(moments):
                    arrays["moment{}.{}".format(slot, idx)] = value.copy()
        return self._step, arrays

    def load_state(self, step, arrays, params):
        self._step = int(step)
        if not arrays:
            self._moments = None
            return
        self._init_moments(params)
        for slot, moments in enumerate(self._moments):
            for idx in range(len(moments)):
                key = "moment{}.{}".format(slot, idx)
                if key not in arrays:
                    raise PredictorError("optimizer state lacks {}", key)
                moments[idx] = np.array(arrays[key], dtype=moments[idx].dtype)


def optimizer_step(params, grads, config, optimizer=None):
    """
    Apply one update to `params` and return the new arrays. Pass the
    same `optimizer` across calls to carry momentum or Adam moments;
    without one, every call is a first step.
    """
    optimizer = optimizer or Optimizer(config)
    return optimizer.step([np.asarray(p, dtype=np.float64) for p in params], grads)
