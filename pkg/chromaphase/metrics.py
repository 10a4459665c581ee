"""
Phase-map quality metrics: gauge-free mean absolute error and
multi-scale structural similarity (MS-SSIM).

MS-SSIM uses the usual constants: an 11x11 Gaussian window with sigma
1.5, K1 = 0.01, K2 = 0.03, the five-scale exponents below, and 2x2
average pooling between scales.
"""

import numpy as np
import scipy.signal

from chromaphase import RealImage
from chromaphase.util import FieldError, log

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _pair(a, b):
    if isinstance(a, RealImage) and isinstance(b, RealImage):
        if not a.same_grid(b):
            raise FieldError("cannot compare images on different grids: {} vs {}", a, b)
    a = a.data if isinstance(a, RealImage) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, RealImage) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FieldError("cannot compare shapes {} and {}", a.shape, b.shape)
    if a.ndim != 2:
        raise FieldError("metrics expect single-channel 2D maps, got shape {}", a.shape)
    return a, b


def mae(a, b):
    """
    Return the mean absolute difference of two phase maps after
    removing each map's mean.
    """
    a, b = _pair(a, b)
    return float(np.mean(np.abs((a - a.mean()) - (b - b.mean()))))


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA):
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(image, window):
    return scipy.signal.convolve2d(image, window, mode="valid")


def _ssim_terms(a, b, window, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter(a, window)
    mu_b = _filter(b, window)
    var_a = _filter(a * a, window) - mu_a * mu_a
    var_b = _filter(b * b, window) - mu_b * mu_b
    cov = _filter(a * b, window) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    contrast_structure = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(luminance * contrast_structure)), float(np.mean(contrast_structure))


def _downsample(image):
    height = image.shape[0] - image.shape[0] % 2
    width = image.shape[1] - image.shape[1] % 2
    image = image[:height, :width]
    return 0.25 * (image[0::2, 0::2] + image[1::2, 0::2] + image[0::2, 1::2] + image[1::2, 1::2])


def max_levels(shape):
    """
    Return the largest scale count whose coarsest level still fits the
    11x11 window, i.e. min(shape) >= 2^(levels - 1) * 11.
    """
    levels = 0
    while min(shape) >= (2 ** levels) * WINDOW_SIZE and levels < len(MS_SSIM_WEIGHTS):
        levels += 1
    return levels


def ms_ssim(a, b, levels=5):
    """
    Return the MS-SSIM of two maps, in [0, 1]. The dynamic range is the
    joint maximum after shifting both maps so the joint minimum is not
    negative. Images too small for `levels` scales are evaluated with
    fewer scales (exponents renormalized) and a warning.
    """
    a, b = _pair(a, b)
    if not 1 <= levels <= len(MS_SSIM_WEIGHTS):
        raise FieldError("levels must be between 1 and {}", len(MS_SSIM_WEIGHTS))
    fit = max_levels(a.shape)
    if fit == 0:
        raise FieldError("images of shape {} are smaller than the SSIM window", a.shape)
    if fit < levels:
        log.warn("MS-SSIM: {}x{} images only allow {} of {} levels", a.shape[1], a.shape[0], fit, levels)
        levels = fit
    low = min(a.min(), b.min())
    if low < 0:
        a = a - low
        b = b - low
    data_range = max(a.max(), b.max())
    if data_range == 0:
        data_range = 1.0
    weights = np.array(MS_SSIM_WEIGHTS[:levels])
    weights /= weights.sum()
    window = gaussian_window()
    score = 1.0
    for level in range(levels):
        ssim, cs = _ssim_terms(a, b, window, data_range)
        value = ssim if level == levels - 1 else cs
        score *= max(value, 0.0) ** weights[level]
        if level < levels - 1:
            a = _downsample(a)
            b = _downsample(b)
    return float(min(score, 1.0))


class MetricReport:
    """
    Class representing per-sample MS-SSIM and MAE values with their
    mean and standard deviation. Immutable.
    """

    def __init__(self, sample_ids, ms_ssim_values, mae_values):
        if not len(sample_ids) == len(ms_ssim_values) == len(mae_values):
            raise FieldError("metric report columns have different lengths")
        self._ids = tuple(sample_ids)
        self._ms_ssim = tuple(float(np.clip(v, 0.0, 1.0)) for v in ms_ssim_values)
        self._mae = tuple(float(v) for v in mae_values)
        if any(v < 0 for v in self._mae):
            raise FieldError("MAE values must be non-negative")

    @property
    def sample_ids(self):
        return self._ids

    @property
    def ms_ssim(self):
        return self._ms_ssim

    @property
    def mae(self):
        return self._mae

    def summary(self):
        """
        Return (ms_ssim mean, ms_ssim std, mae mean, mae std); NaN when
        the report is empty.
        """
        if not self._ids:
            return (float("nan"),) * 4
        return (
            float(np.mean(self._ms_ssim)),
            float(np.std(self._ms_ssim)),
            float(np.mean(self._mae)),
            float(np.std(self._mae)),
        )

    def rows(self):
        """
        Return (sample_id, ms_ssim, mae) tuples for CSV output.
        """
        return list(zip(self._ids, self._ms_ssim, self._mae))

    def _to_json(self):
        ms_mean, ms_std, mae_mean, mae_std = self.summary()
        return {
            "samples": [
                {"sampleId": sid, "msSsim": ms, "mae": err} for sid, ms, err in self.rows()
            ],
            "msSsimMean": ms_mean,
            "msSsimStd": ms_std,
            "maeMean": mae_mean,
            "maeStd": mae_std,
        }

    def __str__(self):
        ms_mean, ms_std, mae_mean, mae_std = self.summary()
        return "MS-SSIM {:.4f} +- {:.4f}, MAE {:.4f} +- {:.4f} rad ({} samples)".format(
            ms_mean, ms_std, mae_mean, mae_std, len(self._ids)
        )


def evaluate(predictions, truths, sample_ids=None, levels=5):
    """
    Score every prediction against its ground truth. Both metrics see
    each map with its mean removed.
    """
    if len(predictions) != len(truths):
        raise FieldError("{} predictions for {} ground truths", len(predictions), len(truths))
    if sample_ids is None:
        sample_ids = list(range(len(predictions)))
    ms_values = []
    mae_values = []
    for pred, truth in zip(predictions, truths):
        pred, truth = _pair(pred, truth)
        pred = pred - pred.mean()
        truth = truth - truth.mean()
        ms_values.append(ms_ssim(pred, truth, levels))
        mae_values.append(mae(pred, truth))
    return MetricReport(sample_ids, ms_values, mae_values)
