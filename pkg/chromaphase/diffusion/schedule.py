"""
Variance schedules of the forward diffusion.

A schedule supplies, for times t in [0, 1] and conditioning X, the
signal retention gamma(t, X), its first and second time derivatives,
and the instantaneous rate beta(t, X). A variance-preserving schedule
satisfies d gamma / dt = -beta gamma with gamma(0) = 1 and gamma(1) = 0.
"""

import numpy as np

from chromaphase.predictor import tensor as T
from chromaphase.predictor.tensor import Tensor
from chromaphase.util import ScheduleError


class ScheduleValues:
    """
    Tensors gamma, d gamma/dt, d^2 gamma/dt^2 and beta at a batch of
    times, each of shape (B,).
    """

    def __init__(self, gamma, dgamma, d2gamma, beta):
        self.gamma = gamma
        self.dgamma = dgamma
        self.d2gamma = d2gamma
        self.beta = beta


def batch_times(t, X=None):
    """
    Return `t` as a float64 array of shape (B,). A scalar `t` is
    repeated over the batch of `X` (or becomes a batch of one).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        batch = 1 if X is None else np.shape(X)[0]
        t = np.full(batch, float(t))
    if t.ndim != 1:
        raise ScheduleError("times must be a scalar or a 1D batch, got shape {}", t.shape)
    if X is not None and np.shape(X)[0] != t.shape[0]:
        raise ScheduleError("{} times for a conditioning batch of {}", t.shape[0], np.shape(X)[0])
    if np.any(t < 0) or np.any(t > 1):
        raise ScheduleError("times must lie in [0, 1]")
    return t


class Schedule:
    """
    Base class for schedules. Subclasses implement `evaluate`.
    """

    def evaluate(self, t, X=None):
        raise NotImplementedError

    def gamma(self, t, X=None):
        return self.evaluate(t, X).gamma

    def beta(self, t, X=None):
        return self.evaluate(t, X).beta

    def dgamma(self, t, X=None):
        return self.evaluate(t, X).dgamma

    def d2gamma(self, t, X=None):
        return self.evaluate(t, X).d2gamma

    def parameters(self):
        return []

    def state(self):
        return {}

    def load_state(self, state):
        pass


class AnalyticSchedule(Schedule):
    """
    Schedule given by closed-form numpy functions of t, without
    parameters or conditioning. Used as a reference in tests and for
    fixed-schedule runs.
    """

    def __init__(self, gamma, dgamma, d2gamma, beta, name="analytic"):
        self._fns = (gamma, dgamma, d2gamma, beta)
        self._name = name

    @property
    def name(self):
        return self._name

    def evaluate(self, t, X=None):
        t = batch_times(t, X)
        return ScheduleValues(*(Tensor(np.broadcast_to(fn(t), t.shape)) for fn in self._fns))

    def __str__(self):
        return "AnalyticSchedule({})".format(self._name)


def exponential(b):
    """
    gamma = exp(-b t), beta = b: the exact solution for a constant rate.
    """
    return AnalyticSchedule(
        lambda t: np.exp(-b * t),
        lambda t: -b * np.exp(-b * t),
        lambda t: b * b * np.exp(-b * t),
        lambda t: np.full_like(t, float(b)),
        "exponential({:g})".format(b),
    )


def linear():
    """
    gamma = 1 - t, beta = 1 / (1 - t) (diverges at t = 1).
    """
    return AnalyticSchedule(
        lambda t: 1 - t,
        lambda t: -np.ones_like(t),
        lambda t: np.zeros_like(t),
        lambda t: np.divide(1.0, 1 - t, out=np.full_like(t, np.inf), where=t < 1),
        "linear",
    )


def constant(gamma_value=1.0, beta_value=1.0):
    return AnalyticSchedule(
        lambda t: np.full_like(t, float(gamma_value)),
        lambda t: np.zeros_like(t),
        lambda t: np.zeros_like(t),
        lambda t: np.full_like(t, float(beta_value)),
        "constant({:g}, {:g})".format(gamma_value, beta_value),
    )


def quadratic():
    """
    gamma = t^2. Not variance preserving; exercises curvature terms.
    """
    return AnalyticSchedule(
        lambda t: t * t,
        lambda t: 2 * t,
        lambda t: np.full_like(t, 2.0),
        lambda t: np.ones_like(t),
        "quadratic",
    )


def inverse_softplus(value):
    """
    Return x with softplus(x) = value, for value > 0.
    """
    return float(value + np.log(-np.expm1(-value)))


class LearnedSchedule(Schedule):
    """
    Schedule with learnable, optionally X-conditioned parameters:

        g(s, X)      = sum_{p <= degree} c_p(X) s^p
        beta(t, X)   = softplus(g(t, X))
        gamma(t, X)  = exp(-int_0^t beta(s, X) ds)

    with c(X) = c0 + pool(X) W, pool the mean of X over its non-channel
    axes. The integral is a fixed Gauss-Legendre rule, and the time
    derivatives of gamma are exact derivatives of that rule. Positivity
    of beta makes gamma strictly decreasing with gamma(0) = 1 for any
    parameters; reaching gamma(1) ~ 0 and matching beta to the rule's
    derivative is left to training.
    """

    def __init__(self, degree=3, cond_channels=0, nodes=8, initial_rate=6.0, dtype="float64"):
        if degree < 0:
            raise ScheduleError("schedule polynomial degree must be non-negative: {}", degree)
        if nodes < 1:
            raise ScheduleError("quadrature needs at least one node")
        self._degree = int(degree)
        self._terms = self._degree + 1
        self._cond_channels = int(cond_channels)
        self._nodes = int(nodes)
        self._initial_rate = float(initial_rate)
        self._dtype = T.DTYPES[dtype]
        x, w = np.polynomial.legendre.leggauss(self._nodes)
        self._u = (x + 1) / 2
        self._w = w / 2
        c0 = np.zeros(self._terms)
        c0[0] = inverse_softplus(self._initial_rate)
        self._c0 = Tensor(c0, requires_grad=True, dtype=self._dtype)
        self._weight = None
        if self._cond_channels > 0:
            self._weight = Tensor(
                np.zeros((self._cond_channels, self._terms)), requires_grad=True, dtype=self._dtype
            )

    @property
    def degree(self):
        return self._degree

    @property
    def cond_channels(self):
        return self._cond_channels

    @property
    def nodes(self):
        return self._nodes

    def parameters(self):
        return [self._c0] + ([] if self._weight is None else [self._weight])

    def state(self):
        state = {"schedule.c0": self._c0.data.copy()}
        if self._weight is not None:
            state["schedule.weight"] = self._weight.data.copy()
        return state

    def load_state(self, state):
        for name, param in (("schedule.c0", self._c0), ("schedule.weight", self._weight)):
            if param is None:
                continue
            if name not in state:
                raise ScheduleError("schedule state lacks {}", name)
            value = np.asarray(state[name], dtype=param.dtype)
            if value.shape != param.shape:
                raise ScheduleError("{} has shape {}, expected {}", name, value.shape, param.shape)
            param.data = value.copy()

    def _to_json(self):
        return {
            "kind": "learned",
            "degree": self._degree,
            "condChannels": self._cond_channels,
            "nodes": self._nodes,
            "initialRate": self._initial_rate,
        }

    def coefficients(self, batch, X=None):
        """
        Return c(X) as a (B, P) Tensor (or (1, P) without conditioning).
        """
        c0 = self._c0.reshape(1, self._terms)
        if self._weight is None or X is None:
            return c0
        X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
        if X.shape[0] != batch:
            raise ScheduleError("conditioning batch {} does not match {} times", X.shape[0], batch)
        if X.ndim < 2 or X.shape[1] != self._cond_channels:
            raise ScheduleError(
                "schedule expects {} conditioning channels, got shape {}", self._cond_channels, X.shape
            )
        pooled = X.reshape(X.shape[0], X.shape[1], -1).mean(axis=2)
        return c0 + T.matmul(Tensor(pooled, dtype=self._dtype), self._weight)

    def _polynomial(self, c, s, order):
        """
        Return the `order`-th s-derivative of g at points `s` (B, J).
        """
        powers = np.arange(self._terms)
        basis = np.zeros(s.shape + (self._terms,))
        for p in powers:
            if p < order:
                continue
            factor = 1.0
            for q in range(order):
                factor *= p - q
            basis[..., p] = factor * s ** (p - order)
        c = c.reshape(c.shape[0], 1, self._terms)
        return (c * Tensor(basis, dtype=self._dtype)).sum(axis=-1)

    def evaluate(self, t, X=None):
        t = batch_times(t, X)
        c = self.coefficients(t.shape[0], X)
        s = t[:, None] * self._u[None, :]
        g = self._polynomial(c, s, 0)
        g1 = self._polynomial(c, s, 1)
        g2 = self._polynomial(c, s, 2)
        sig = T.sigmoid(g)
        f = T.softplus(g)
        f1 = sig * g1
        f2 = sig * (1 - sig) * T.square(g1) + sig * g2
        w = self._w[None, :]
        u = self._u[None, :]
        integral = Tensor(t) * (f * w).sum(axis=1)
        rate = ((f + Tensor(s) * f1) * w).sum(axis=1)
        rate_slope = ((2 * u * f1 + Tensor(t[:, None] * u * u) * f2) * w).sum(axis=1)
        gamma = T.exp(-integral)
        dgamma = -rate * gamma
        d2gamma = (T.square(rate) - rate_slope) * gamma
        beta = T.softplus(self._polynomial(c, t[:, None], 0)).reshape(t.shape[0])
        return ScheduleValues(gamma, dgamma, d2gamma, beta)

    def __str__(self):
        return "LearnedSchedule(degree={}, condChannels={})".format(self._degree, self._cond_channels)
