"""
Library for single-exposure quantitative phase imaging from chromatic
aberrations. This module holds the value types shared by the optics,
dataset and solver modules. All of them are immutable and validate
their invariants on construction.

Physical quantities are SI throughout (meters, radians); configuration
accepts nm/um via `util.parse_length`.
"""

import numbers

import numpy as np

from chromaphase import util
from chromaphase.util import FieldError

__version__ = "0.1.0"

# Default pixel pitch, meters per pixel.
DEFAULT_PITCH = 0.5e-6

# Smallest accepted grid side, in pixels.
MIN_SIDE = 8


def _check_pitch(pitch):
    if not isinstance(pitch, numbers.Real) or not pitch > 0:
        raise FieldError("pitch must be a positive number of meters: {}", pitch)
    return float(pitch)


def _check_grid(shape):
    if len(shape) < 2:
        raise FieldError("expected a 2D grid, got shape {}", shape)
    height, width = shape[-2:]
    if width < MIN_SIDE or height < MIN_SIDE:
        raise FieldError(
            "grid must be at least {0}x{0} pixels, got {1}x{2}", MIN_SIDE, width, height
        )


class ComplexField:
    """
    Class representing a sampled complex amplitude A(x)e^{i phi(x)} on a
    regular pixel grid with physical pitch. Immutable.
    """

    def __init__(self, data, pitch=DEFAULT_PITCH):
        """
        Construct a field from a 2D array `data` (converted to
        complex128) and a `pitch` in meters per pixel. Sides must be at
        least 8 pixels; sizes that are not powers of two are accepted
        and padded internally by the propagator.
        """
        data = np.array(data, dtype=np.complex128)
        if data.ndim != 2:
            raise FieldError("ComplexField needs a 2D array, got shape {}", data.shape)
        _check_grid(data.shape)
        data.setflags(write=False)
        self._data = data
        self._pitch = _check_pitch(pitch)

    @staticmethod
    def from_phase(phase, amplitude=1.0, pitch=None):
        """
        Build the thin transmittance A e^{i phase}. `phase` may be a
        `RealImage` (whose pitch is used unless `pitch` is given) or an
        array.
        """
        if isinstance(phase, RealImage):
            pitch = phase.pitch if pitch is None else pitch
            phase = phase.data
        if pitch is None:
            pitch = DEFAULT_PITCH
        amplitude = np.asarray(amplitude, dtype=np.float64)
        return ComplexField(amplitude * np.exp(1j * np.asarray(phase, dtype=np.float64)), pitch)

    @property
    def data(self):
        return self._data

    @property
    def pitch(self):
        return self._pitch

    @property
    def width(self):
        return self._data.shape[1]

    @property
    def height(self):
        return self._data.shape[0]

    def energy(self):
        """
        Return the total power sum |a|^2 over the grid.
        """
        return float(np.sum(np.abs(self._data) ** 2))

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self._pitch == other._pitch and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self._pitch, self._data.shape, self._data.tobytes()))

    def __str__(self):
        return "ComplexField {}x{} @ {:g} m/px".format(self.width, self.height, self._pitch)


class RealImage:
    """
    Class representing a real-valued image on a pixel grid: either an
    intensity (non-negative, arbitrary linear units) or a phase map
    (radians). May carry a leading channel axis. Immutable.
    """

    ROLES = ("intensity", "phase", "derivative")

    def __init__(self, data, pitch=DEFAULT_PITCH, role="intensity"):
        """
        Construct an image from `data`, shape (H, W) or (C, H, W). The
        `role` is "intensity" (values must be >= 0), "phase" or
        "derivative". All values must be finite.
        """
        if role not in RealImage.ROLES:
            raise FieldError("unknown image role: {}", repr(role))
        data = np.array(data, dtype=np.float64)
        if data.ndim not in (2, 3):
            raise FieldError("RealImage needs shape (H, W) or (C, H, W), got {}", data.shape)
        _check_grid(data.shape)
        util.require_finite(data, "{} image".format(role))
        if role == "intensity" and np.any(data < 0):
            raise FieldError("intensity image has negative values (min {})", data.min())
        data.setflags(write=False)
        self._data = data
        self._pitch = _check_pitch(pitch)
        self._role = role

    @property
    def data(self):
        return self._data

    @property
    def pitch(self):
        return self._pitch

    @property
    def role(self):
        return self._role

    @property
    def width(self):
        return self._data.shape[-1]

    @property
    def height(self):
        return self._data.shape[-2]

    @property
    def channels(self):
        return 1 if self._data.ndim == 2 else self._data.shape[0]

    def channel(self, idx):
        """
        Return channel `idx` of a multi-channel image as a 2D image.
        """
        if self._data.ndim == 2:
            if idx != 0:
                raise FieldError("single-channel image has no channel {}", idx)
            return self
        return RealImage(self._data[idx], self._pitch, self._role)

    def same_grid(self, other):
        """
        Return truthy if `other` has the same spatial shape and pitch.
        """
        return self._data.shape[-2:] == other.data.shape[-2:] and self._pitch == other.pitch

    def _to_json(self):
        return {
            "imageRole": self._role,
            "imagePitch": self._pitch,
            "imageShape": list(self._data.shape),
        }

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (self._role, self._pitch) == (other._role, other._pitch) and np.array_equal(
            self._data, other._data
        )

    def __hash__(self):
        return hash((self._role, self._pitch, self._data.shape, self._data.tobytes()))

    def __str__(self):
        return "RealImage({}) {}x{}x{}".format(
            self._role, self.channels, self.width, self.height
        )


def PhaseMap(data, pitch=DEFAULT_PITCH):
    """
    Shorthand for a `RealImage` in the phase role.
    """
    return RealImage(data, pitch, role="phase")


class SensorChannel:
    """
    Class representing one color channel of the sensor, whose quantum
    efficiency is a Gaussian of center `lambda_c` and width `sigma_c`
    (both meters). Immutable.
    """

    def __init__(self, lambda_c, sigma_c, name=None):
        lambda_c = float(lambda_c)
        sigma_c = float(sigma_c)
        if not 350e-9 <= lambda_c <= 800e-9:
            raise FieldError(
                "channel center must lie in [350, 800] nm, got {:g} nm", lambda_c * 1e9
            )
        if not sigma_c > 0:
            raise FieldError("channel width must be positive, got {}", sigma_c)
        self._lambda_c = lambda_c
        self._sigma_c = sigma_c
        self._name = name

    @property
    def lambda_c(self):
        return self._lambda_c

    @property
    def sigma_c(self):
        return self._sigma_c

    @property
    def name(self):
        return self._name

    def with_sigma(self, sigma_c):
        """
        Return a copy of this channel with a different width.
        """
        return SensorChannel(self._lambda_c, sigma_c, self._name)

    def _to_json(self):
        return {
            "channelName": self._name,
            "channelCenter": self._lambda_c,
            "channelWidth": self._sigma_c,
        }

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (self._lambda_c, self._sigma_c, self._name) == (
            other._lambda_c,
            other._sigma_c,
            other._name,
        )

    def __hash__(self):
        return hash((self._lambda_c, self._sigma_c, self._name))

    def __str__(self):
        return "{} channel {:g} nm (sigma {:g} nm)".format(
            self._name or "unnamed", self._lambda_c * 1e9, self._sigma_c * 1e9
        )


# Default channel centers of an RGB sensor.
RED = SensorChannel(630e-9, 50e-9, "red")
GREEN = SensorChannel(550e-9, 50e-9, "green")
BLUE = SensorChannel(450e-9, 50e-9, "blue")


class WavelengthGrid:
    """
    Class representing the ordered, uniformly spaced wavelengths of the
    Riemann sum over the illumination band. Immutable.
    """

    def __init__(self, lambdas):
        """
        Construct a grid from a sequence of wavelengths in meters. They
        must be strictly increasing with a uniform step. A single
        wavelength is accepted and gives the monochromatic case.
        """
        lambdas = np.array(lambdas, dtype=np.float64).ravel()
        if lambdas.size == 0:
            raise FieldError("WavelengthGrid got no wavelengths")
        util.require_finite(lambdas, "wavelength grid")
        if np.any(lambdas <= 0):
            raise FieldError("wavelengths must be positive")
        if lambdas.size > 1:
            steps = np.diff(lambdas)
            if np.any(steps <= 0):
                raise FieldError("wavelengths are not strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
                raise FieldError("wavelength step is not uniform")
            self._step = float(steps[0])
        else:
            self._step = 0.0
        lambdas.setflags(write=False)
        self._lambdas = lambdas

    @staticmethod
    def band(start=400e-9, stop=700e-9, step=6e-9, include_stop=True):
        """
        Return the grid from `start` to `stop` in `step`-sized steps,
        both ends included (51 wavelengths for the default band).
        Without `include_stop` only the left endpoints of the intervals
        are kept.
        """
        count = int(round((stop - start) / step))
        if include_stop:
            count += 1
        return WavelengthGrid(start + step * np.arange(count))

    @property
    def lambdas(self):
        return self._lambdas

    @property
    def step(self):
        return self._step

    def __len__(self):
        return self._lambdas.size

    def _to_json(self):
        return {
            "bandStart": float(self._lambdas[0]),
            "bandStep": self._step,
            "bandCount": len(self),
        }

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return np.array_equal(self._lambdas, other._lambdas)

    def __hash__(self):
        return hash(self._lambdas.tobytes())

    def __str__(self):
        return "{} wavelengths from {:g} nm step {:g} nm".format(
            len(self), self._lambdas[0] * 1e9, self._step * 1e9
        )
