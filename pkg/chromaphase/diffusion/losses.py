"""
Training objectives. Every loss returns a scalar Tensor so it can be
differentiated with respect to predictor and schedule parameters.

Losses that need random draws take a numpy Generator; tests and
gradient checks can pin the draws by passing `t` and `eps` explicitly.
"""

import numpy as np

from chromaphase.diffusion import call_predictor
from chromaphase.diffusion.schedule import batch_times
from chromaphase.predictor import tensor as T
from chromaphase.util import ScheduleError


def _per_sample(values, y):
    """
    Reshape a (B,) Tensor so it broadcasts against a (B, ...) batch.
    """
    return values.reshape((values.shape[0],) + (1,) * (y.ndim - 1))


def _sum_per_sample(x):
    return x.reshape(x.shape[0], -1).sum(axis=1)


def _draw_times(batch, rng, t):
    if t is None:
        return rng.uniform(0.0, 1.0, size=batch)
    return batch_times(t)


def forward_sample(y0, t, eps, schedule, X=None):
    """
    Return y_t = sqrt(gamma(t, X)) y0 + sqrt(1 - gamma(t, X)) eps.
    """
    y0 = T.as_tensor(y0)
    eps = T.as_tensor(eps)
    if eps.shape != y0.shape:
        raise ScheduleError("noise shape {} does not match data shape {}", eps.shape, y0.shape)
    t = batch_times(t, y0.data if X is None else X)
    gamma = schedule.gamma(t, X)
    g = gamma.data
    if not np.all(np.isfinite(g)) or np.any(g < 0) or np.any(g > 1):
        raise ScheduleError("gamma left [0, 1]: min {}, max {}", g.min(), g.max())
    gamma = _per_sample(gamma, y0)
    return T.sqrt(gamma) * y0 + T.sqrt(1 - gamma) * eps


def loss_noise(y0, X, schedule, eps_predictor, rng=None, t=None, eps=None):
    """
    One-draw Monte Carlo estimate of 1/2 E ||eps - eps_pred(y_t, t, X)||^2,
    averaged over the batch.
    """
    y0 = T.as_tensor(y0)
    batch = y0.shape[0]
    t = _draw_times(batch, rng, t)
    if eps is None:
        eps = rng.standard_normal(y0.shape)
    y_t = forward_sample(y0, t, eps, schedule, X)
    residual = T.as_tensor(eps) - call_predictor(eps_predictor, y_t, t, X)
    return 0.5 * _sum_per_sample(T.square(residual)).mean()


def ode_residual(schedule, X, t):
    """
    Return the batch mean of (d gamma/dt + beta gamma)^2 at times `t`.
    """
    values = schedule.evaluate(t, X)
    return T.square(values.dgamma + values.beta * values.gamma).mean()


def boundary_residual(schedule, X, batch):
    """
    Return the batch mean of (gamma(0, X) - 1)^2 + gamma(1, X)^2.
    """
    start = schedule.gamma(np.zeros(batch), X)
    end = schedule.gamma(np.ones(batch), X)
    return (T.square(start - 1) + T.square(end)).mean()


def loss_beta(schedule, X, rng=None, t=None, batch=None):
    """
    Variance-preservation loss: ODE residual at random times plus the
    two boundary conditions.
    """
    if batch is None:
        batch = 1 if X is None else np.shape(X)[0]
    t = _draw_times(batch, rng, t)
    return ode_residual(schedule, X, t) + boundary_residual(schedule, X, t.shape[0])


def loss_gamma(schedule, X, rng=None, t=None, batch=None):
    """
    Smoothness loss E_t (d^2 gamma / dt^2)^2.
    """
    if batch is None:
        batch = 1 if X is None else np.shape(X)[0]
    t = _draw_times(batch, rng, t)
    return T.square(schedule.d2gamma(t, X)).mean()


def loss_prior(y0, X, schedule):
    """
    Closed-form KL( N(sqrt(g) y0, (1 - g) I) || N(0, I) ) with
    g = gamma(1, X), averaged over the batch:

        1/2 d (-log(1 - g) - g) + 1/2 g ||y0||^2
    """
    y0 = T.as_tensor(y0)
    batch = y0.shape[0]
    dim = int(np.prod(y0.shape[1:]))
    g = schedule.gamma(np.ones(batch), X)
    if np.any(g.data >= 1):
        raise ScheduleError("gamma(1) = {} makes the prior KL infinite", g.data.max())
    kl = 0.5 * dim * (-T.log(1 - g) - g) + 0.5 * g * _sum_per_sample(T.square(y0))
    return kl.mean()


def loss_mean(y, X, mean_predictor):
    """
    Batch mean of ||y - mu(X)||^2.
    """
    y = T.as_tensor(y)
    return _sum_per_sample(T.square(y - call_predictor(mean_predictor, X))).mean()


def loss_cvdm(y, X, model, t, eps):
    """
    L_beta + L_prior + L_noise + a L_gamma on the batch `y`, all terms
    sharing the times `t`.
    """
    schedule = model.schedule
    total = (
        loss_beta(schedule, X, t=t)
        + loss_prior(y, X, schedule)
        + loss_noise(y, X, schedule, model.eps_predictor, t=t, eps=eps)
    )
    if model.a:
        total = total + model.a * loss_gamma(schedule, X, t=t)
    return total


def loss_zmd(batch, model, rng=None, t=None, eps=None):
    """
    Training loss for one batch (y, X). In "zmd" mode the diffusion
    terms see the residual y - stop_gradient(mu(X)), and omega L_mean
    trains the mean predictor; in "cvdm" mode the diffusion terms see y.
    """
    y, X = batch
    y = T.as_tensor(y)
    size = y.shape[0]
    t = _draw_times(size, rng, t)
    if eps is None:
        eps = rng.standard_normal(y.shape)
    if model.mode == "cvdm":
        return loss_cvdm(y, X, model, t, eps)
    mu = call_predictor(model.mean_predictor, X)
    residual = y - T.stop_gradient(mu)
    total = loss_cvdm(residual, X, model, t, eps)
    if model.omega:
        total = total + model.omega * T.square(y - mu).reshape(size, -1).sum(axis=1).mean()
    return total

