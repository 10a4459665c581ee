"""
Inference: the discretized reverse chain in T steps,

    beta_t  = beta(t / T, X) / T,  alpha_t = 1 - beta_t,
    gamma_t = prod_{s <= t} alpha_s,

    y_{t-1} = (y_t - beta_t / sqrt(1 - gamma_t) eps_pred(y_t, t/T, X)) / sqrt(alpha_t)
              + sqrt(beta_t) z,        z ~ N(0, I), z = 0 at t = 1.

Zero-mean sampling runs the chain on residuals and adds mu(X) back.
"""

import numpy as np

from chromaphase.diffusion import call_predictor
from chromaphase.predictor import tensor as T
from chromaphase.predictor.tensor import Tensor
from chromaphase.util import ScheduleError, TrainingError, log


class DiscreteSchedule:
    """
    Per-sample tables of beta_t, alpha_t and gamma_t, each of shape
    (B, T); column t - 1 holds step t.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ScheduleError(
                "discrete beta_t must lie in [0, 1), got range [{}, {}]", betas.min(), betas.max()
            )
        self.betas = betas
        self.alphas = 1 - betas
        self.gammas = np.cumprod(self.alphas, axis=1)

    @property
    def steps(self):
        return self.betas.shape[1]

    def gammas_from_logs(self):
        """
        Return gamma_t computed as exp(sum log alpha_s), a cross-check
        of the product form.
        """
        return np.exp(np.cumsum(np.log(self.alphas), axis=1))


def discrete_schedule(schedule, X, steps, batch=None):
    """
    Tabulate the schedule at t/T for t = 1..T.
    """
    if steps < 1:
        raise ScheduleError("number of timesteps must be at least 1, got {}", steps)
    if batch is None:
        batch = 1 if X is None else np.shape(X)[0]
    with T.no_grad():
        columns = [
            schedule.beta(np.full(batch, step / steps), X).data / steps
            for step in range(1, steps + 1)
        ]
    return DiscreteSchedule(np.stack(columns, axis=1))


def _reverse_chain(X, model, rng, shape):
    batch = shape[0]
    tables = discrete_schedule(model.schedule, X, model.T, batch)
    if tables.betas.max() > 0.5:
        log.warn("sampling with coarse steps: max beta_t = {:.3g}", tables.betas.max())
    expand = (batch,) + (1,) * (len(shape) - 1)
    y = rng.standard_normal(shape)
    with T.no_grad():
        for step in range(model.T, 0, -1):
            beta = tables.betas[:, step - 1].reshape(expand)
            alpha = tables.alphas[:, step - 1].reshape(expand)
            noise_level = np.sqrt(1 - tables.gammas[:, step - 1]).reshape(expand)
            times = np.full(batch, step / model.T)
            eps_hat = call_predictor(model.eps_predictor, Tensor(y), times, X).data
            coef = np.divide(beta, noise_level, out=np.zeros_like(beta), where=noise_level > 0)
            y = (y - coef * eps_hat) / np.sqrt(alpha)
            if step > 1:
                y = y + np.sqrt(beta) * rng.standard_normal(shape)
            if not np.all(np.isfinite(y)):
                raise TrainingError("non-finite sample at step {}", step, step=step)
    return y


def mean_sample(X, model):
    """
    Return mu(X): the mean-prediction baseline.
    """
    if model.mean_predictor is None:
        raise ScheduleError("model has no mean predictor")
    with T.no_grad():
        return call_predictor(model.mean_predictor, X).data.copy()


def ancestral_sample(X, model, rng):
    """
    Draw one sample per conditioning input: run the reverse chain on
    residuals and return y_0 + mu(X).
    """
    mu = mean_sample(X, model)
    return _reverse_chain(X, model, rng, mu.shape) + mu


def cvdm_sample(X, model, rng, shape):
    """
    Draw samples of `shape` without mean centering.
    """
    return _reverse_chain(X, model, rng, tuple(shape))
