"""
Scalar-wave forward model: Fresnel propagation of thin objects and
polychromatic integration over the sensor's color channels.

Propagation uses the paraxial transfer function

    H(u) = exp(ikz) exp(-i pi lambda z |u|^2)

applied in the Fourier domain with periodic boundaries. H has unit
modulus, so propagation conserves total power and propagating by -z
undoes propagating by z.
"""

import numpy as np

from chromaphase import ComplexField, RealImage, WavelengthGrid
from chromaphase import util
from chromaphase.util import FieldError, log


def _next_power_of_two(n):
    return 1 << (int(n) - 1).bit_length()


def transfer_function(shape, pitch, z, wavelength):
    """
    Return the Fresnel transfer function for a grid of `shape` (rows,
    columns) with the given `pitch`, defocus `z` and `wavelength`, laid
    out like `numpy.fft.fft2` output (DC at index (0, 0)).
    """
    fy = np.fft.fftfreq(shape[0], d=pitch)
    fx = np.fft.fftfreq(shape[1], d=pitch)
    u2 = fy[:, None] ** 2 + fx[None, :] ** 2
    k = 2 * np.pi / wavelength
    return np.exp(1j * k * z) * np.exp(-1j * np.pi * wavelength * z * u2)


def sampling_ratio(shape, pitch, z, wavelength):
    """
    Return lambda |z| / (pitch^2 N) for the smallest side N; values
    above 1 violate the Fresnel sampling criterion.
    """
    return wavelength * abs(z) / (pitch ** 2 * min(shape))


def apodize(field, width=8):
    """
    Return a copy of `field` whose outer `width` pixels are blended
    toward the field's mean value with a raised-cosine taper, which
    removes the seam that periodic boundaries create at crop edges.
    """
    data = field.data
    weights = []
    for n in data.shape:
        idx = np.arange(n)
        dist = np.minimum(idx, n - 1 - idx).astype(np.float64)
        w = np.where(dist < width, 0.5 * (1 - np.cos(np.pi * dist / width)), 1.0)
        weights.append(w)
    taper = weights[0][:, None] * weights[1][None, :]
    mean = data.mean()
    return ComplexField(mean + taper * (data - mean), field.pitch)


def fresnel_propagate(field, z, wavelength, apodize_edges=False):
    """
    Propagate `field` by the distance `z` (meters, negative for
    back-propagation) at `wavelength` (meters) and return the new
    `ComplexField` on the same grid.

    Non-power-of-two grids are zero-padded to the next power of two
    and cropped on return. A warning is logged when the Fresnel
    sampling criterion lambda |z| / (pitch^2 N) <= 1 is violated.
    """
    if not isinstance(field, ComplexField):
        raise FieldError("fresnel_propagate got non-ComplexField: {}", field)
    util.require_finite(field.data, "propagated field")
    if not np.isfinite(z):
        raise FieldError("propagation distance is not finite: {}", z)
    if not wavelength > 0:
        raise FieldError("wavelength must be positive: {}", wavelength)
    if apodize_edges:
        field = apodize(field)
    if z == 0:
        return field
    height, width = field.data.shape
    padded_shape = (_next_power_of_two(height), _next_power_of_two(width))
    ratio = sampling_ratio(padded_shape, field.pitch, z, wavelength)
    if ratio > 1:
        log.warn(
            "Fresnel aliasing: lambda|z|/(pitch^2 N) = {:.3g} > 1 (z={:g} m, lambda={:g} m)",
            ratio,
            z,
            wavelength,
        )
    data = field.data
    if padded_shape != data.shape:
        data = np.pad(data, ((0, padded_shape[0] - height), (0, padded_shape[1] - width)))
    spectrum = np.fft.fft2(data)
    spectrum *= transfer_function(padded_shape, field.pitch, z, wavelength)
    out = np.fft.ifft2(spectrum)[:height, :width]
    return ComplexField(out, field.pitch)


def intensity(field):
    """
    Return the pixelwise |a|^2 of `field` as an intensity `RealImage`.
    """
    util.require_finite(field.data, "field")
    return RealImage(np.abs(field.data) ** 2, field.pitch, role="intensity")


def quantum_efficiency(wavelength, channel):
    """
    Return the sensitivity exp(-(lambda - lambda_c)^2 / (2 sigma_c^2))
    of `channel` at `wavelength`. Works elementwise on arrays.
    """
    wavelength = np.asarray(wavelength, dtype=np.float64)
    q = np.exp(-((wavelength - channel.lambda_c) ** 2) / (2 * channel.sigma_c ** 2))
    return float(q) if q.ndim == 0 else q


def channel_weights(channel, grid):
    """
    Return the Riemann weights Q_c(lambda_i) / W of `channel` over
    `grid`.
    """
    return quantum_efficiency(grid.lambdas, channel) / len(grid)


def background_level(channel, grid):
    """
    Return (1/W) sum_i Q_c(lambda_i), the image value a uniform object
    produces in `channel`.
    """
    return float(np.sum(channel_weights(channel, grid)))


def effective_wavelength(channel, grid):
    """
    Return the Q_c-weighted mean wavelength of `channel` over `grid`.
    In the weak-object regime a channel image equals the monochromatic
    image at this wavelength, which makes it the right abscissa for
    chromatic derivative estimates.
    """
    weights = channel_weights(channel, grid)
    return float(np.sum(weights * grid.lambdas) / np.sum(weights))


def polychromatic_image(obj, z, channel, grid, apodize_edges=False):
    """
    Return the image recorded by `channel` when the thin object `obj`
    is defocused by `z` and illuminated by one coherent plane wave per
    wavelength of `grid`:

        I_c(x; z) = (1/W) sum_i Q_c(lambda_i) I(x; z, lambda_i)

    The sum runs in wavelength order, so the result does not depend on
    how the caller parallelizes over images.
    """
    if not isinstance(grid, WavelengthGrid):
        if len(grid) == 0:
            raise FieldError("polychromatic_image got an empty wavelength grid")
        grid = WavelengthGrid(grid)
    if apodize_edges:
        obj = apodize(obj)
    weights = channel_weights(channel, grid)
    total = np.zeros(obj.data.shape, dtype=np.float64)
    for wavelength, weight in zip(grid.lambdas, weights):
        total += weight * np.abs(fresnel_propagate(obj, z, wavelength).data) ** 2
    return RealImage(total, obj.pitch, role="intensity")


def rgb_image(obj, z, channels, grid, apodize_edges=False):
    """
    Return the (C, H, W) intensity image of `obj` at defocus `z`, one
    plane per sensor channel in `channels`.
    """
    planes = [
        polychromatic_image(obj, z, channel, grid, apodize_edges).data for channel in channels
    ]
    return RealImage(np.stack(planes), obj.pitch, role="intensity")


def through_focus_stack(obj, zs, wavelength):
    """
    Return the monochromatic intensity images of `obj` at every defocus
    in `zs`, as a list of `RealImage`.
    """
    return [intensity(fresnel_propagate(obj, z, wavelength)) for z in zs]
