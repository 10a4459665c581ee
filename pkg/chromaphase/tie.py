"""
Classical Transport-of-Intensity phase retrieval.

The TIE links the axial intensity derivative to the lateral phase
gradient,

    -k dI/dz = div(I grad phi),

and in its chromatic form (xi = lambda z, constant defocus plane)

    -2 pi dI/dxi = div(I grad phi).

All differential operators here are spectral, on periodic grids, using
the real FFT. The inverse Laplacian is Tikhonov-regularized, and the DC
and Nyquist bins are nulled everywhere so that the operators compose
exactly. Phase is only defined up to a constant: every solver returns a
zero-mean map.
"""

import numpy as np

from chromaphase import PhaseMap, RealImage
from chromaphase import optics
from chromaphase.util import SolverError

AXIAL_VARIABLES = ("z", "xi")


class SpectralGrid:
    """
    Class holding the frequency coordinates (cycles per meter) of the
    real FFT of a `height` x `width` image with the given `pitch`. DC
    sits at index (0, 0); the last axis only stores non-negative
    frequencies.
    """

    def __init__(self, width, height, pitch):
        self._width = int(width)
        self._height = int(height)
        self._pitch = float(pitch)
        self._kx = np.fft.rfftfreq(self._width, d=self._pitch)[None, :]
        self._ky = np.fft.fftfreq(self._height, d=self._pitch)[:, None]
        mask = np.zeros((self._height, self._width // 2 + 1), dtype=bool)
        if self._width % 2 == 0:
            mask[:, -1] = True
        if self._height % 2 == 0:
            mask[self._height // 2, :] = True
        self._nyquist = mask

    @staticmethod
    def for_image(image):
        return SpectralGrid(image.width, image.height, image.pitch)

    @property
    def shape(self):
        return (self._height, self._width)

    @property
    def pitch(self):
        return self._pitch

    @property
    def kx(self):
        return self._kx

    @property
    def ky(self):
        return self._ky

    @property
    def k2(self):
        return self._kx ** 2 + self._ky ** 2

    @property
    def nyquist(self):
        """
        Boolean mask of the bins at the Nyquist row or column (even
        sides only).
        """
        return self._nyquist

    def default_eps(self):
        """
        Return 1e-3 times the mean of 4 pi^2 |k|^2 over the full
        frequency grid.
        """
        fx = np.fft.fftfreq(self._width, d=self._pitch)
        fy = np.fft.fftfreq(self._height, d=self._pitch)
        return 1e-3 * 4 * np.pi ** 2 * (np.mean(fx ** 2) + np.mean(fy ** 2))

    def forward(self, data):
        return np.fft.rfft2(data)

    def inverse(self, spectrum):
        return np.fft.irfft2(spectrum, s=self.shape)

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (self._width, self._height, self._pitch) == (
            other._width,
            other._height,
            other._pitch,
        )

    def __hash__(self):
        return hash((self._width, self._height, self._pitch))


class AxialDerivative:
    """
    Class representing an estimate of dI/dz (per meter) or dI/dxi (per
    square meter), tagged with the variable it differentiates. Immutable.
    """

    def __init__(self, image, variable):
        if variable not in AXIAL_VARIABLES:
            raise SolverError("axial derivative variable must be z or xi, got {}", repr(variable))
        if not isinstance(image, RealImage):
            image = RealImage(image, role="derivative")
        if image.channels != 1:
            raise SolverError("axial derivative must be single-channel, got {}", image)
        if image.role != "derivative":
            image = RealImage(image.data, image.pitch, role="derivative")
        self._image = image
        self._variable = variable

    @property
    def image(self):
        return self._image

    @property
    def variable(self):
        return self._variable

    @property
    def data(self):
        return self._image.data

    @property
    def pitch(self):
        return self._image.pitch

    def scaled(self, factor, variable=None):
        """
        Return this derivative times `factor`, optionally retagged (for
        chain-rule conversions between z and xi).
        """
        return AxialDerivative(
            RealImage(self.data * factor, self.pitch, role="derivative"),
            variable or self._variable,
        )

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self._variable == other._variable and self._image == other._image

    def __hash__(self):
        return hash((self._variable, self._image))

    def __str__(self):
        return "dI/d{} {}x{}".format(self._variable, self._image.width, self._image.height)


## Spectral operators


def _as_array(g):
    if isinstance(g, (RealImage, AxialDerivative)):
        return g.data, g.pitch
    return np.asarray(g, dtype=np.float64), None


def _inverse_laplacian_array(data, grid, eps):
    spectrum = grid.forward(data)
    denom = -4 * np.pi ** 2 * grid.k2 - eps
    denom[0, 0] = 1.0
    spectrum /= denom
    spectrum[0, 0] = 0
    spectrum[grid.nyquist] = 0
    return grid.inverse(spectrum)


def inverse_laplacian(g, eps=None, pitch=None):
    """
    Apply the regularized inverse Laplacian

        F^-1{ F{g} / (-4 pi^2 (kx^2 + ky^2) - eps) }

    with the DC and Nyquist bins forced to zero, so the output has zero
    mean. `eps` (1/m^2) defaults to `SpectralGrid.default_eps`; pass 0
    for the exact operator. Returns a `RealImage` in the phase role when
    given one, otherwise an array.
    """
    data, image_pitch = _as_array(g)
    pitch = pitch or image_pitch
    if pitch is None:
        raise SolverError("inverse_laplacian needs a pitch for a bare array")
    grid = SpectralGrid(data.shape[1], data.shape[0], pitch)
    if eps is None:
        eps = grid.default_eps()
    if eps < 0:
        raise SolverError("regularization eps must be non-negative: {}", eps)
    out = _inverse_laplacian_array(data, grid, eps)
    if image_pitch is None:
        return out
    return RealImage(out, pitch, role="phase")


def laplacian(data, pitch):
    """
    Return the spectral Laplacian of a 2D array.
    """
    grid = SpectralGrid(data.shape[1], data.shape[0], pitch)
    spectrum = grid.forward(data) * (-4 * np.pi ** 2 * grid.k2)
    spectrum[grid.nyquist] = 0
    return grid.inverse(spectrum)


def gradient(data, grid):
    """
    Return the spectral (d/dx, d/dy) of a 2D array. The Nyquist bins
    have no well-defined derivative and are dropped.
    """
    spectrum = grid.forward(data)
    spectrum[grid.nyquist] = 0
    dx = grid.inverse(2j * np.pi * grid.kx * spectrum)
    dy = grid.inverse(2j * np.pi * grid.ky * spectrum)
    return dx, dy


def divergence(fx, fy, grid):
    """
    Return the spectral divergence of the vector field (fx, fy).
    """
    dfx, _ = gradient(fx, grid)
    _, dfy = gradient(fy, grid)
    return dfx + dfy


def curl(fx, fy, grid):
    """
    Return the scalar curl d(fy)/dx - d(fx)/dy.
    """
    _, dfx_dy = gradient(fx, grid)
    dfy_dx, _ = gradient(fy, grid)
    return dfy_dx - dfx_dy


## Axial derivative estimators


def _check_same_grid(images):
    first = images[0]
    for image in images[1:]:
        if not first.same_grid(image) or image.channels != first.channels:
            raise SolverError("images are on different grids: {} vs {}", first, image)


def derivative_2shot(i_plus, i_minus, dz):
    """
    Central difference (I(+dz) - I(-dz)) / (2 dz).
    """
    if not dz > 0:
        raise SolverError("defocus step must be positive: {}", dz)
    _check_same_grid([i_plus, i_minus])
    didz = (i_plus.data - i_minus.data) / (2 * dz)
    return AxialDerivative(RealImage(didz, i_plus.pitch, role="derivative"), "z")


def derivative_polyfit(stack, zs, degree):
    """
    Fit a polynomial of `degree` in z to every pixel of the
    through-focus `stack` by least squares and return its derivative at
    z = 0.

    The fit is done in the Legendre basis on z mapped to [-1, 1], which
    keeps high degrees (20 for a 41-plane stack) well conditioned.
    """
    zs = np.asarray(zs, dtype=np.float64)
    if len(stack) != zs.size:
        raise SolverError("stack has {} planes but {} defocus values", len(stack), zs.size)
    if degree < 0:
        raise SolverError("polynomial degree must be non-negative: {}", degree)
    if np.unique(zs).size < degree + 1:
        raise SolverError(
            "degree {} fit needs {} distinct defocus values, got {}",
            degree,
            degree + 1,
            np.unique(zs).size,
        )
    if zs.size == 0 or zs.max() == zs.min():
        raise SolverError("an axial derivative needs at least two distinct defocus values")
    _check_same_grid(list(stack))
    center = (zs.max() + zs.min()) / 2
    half = (zs.max() - zs.min()) / 2
    s = (zs - center) / half
    design = np.polynomial.legendre.legvander(s, degree)
    if np.linalg.matrix_rank(design) < degree + 1:
        raise SolverError("rank-deficient design matrix for degree {}", degree)
    first = stack[0]
    values = np.stack([image.data.ravel() for image in stack])
    coeffs, *_ = np.linalg.lstsq(design, values, rcond=None)
    s0 = -center / half
    basis_slopes = np.array(
        [
            np.polynomial.legendre.legval(s0, np.polynomial.legendre.legder(np.eye(degree + 1)[j]))
            for j in range(degree + 1)
        ]
    )
    didz = (basis_slopes @ coeffs) / half
    return AxialDerivative(
        RealImage(didz.reshape(first.data.shape), first.pitch, role="derivative"), "z"
    )


def _channel_list(channels):
    if isinstance(channels, RealImage):
        return [channels.channel(idx) for idx in range(channels.channels)]
    return list(channels)


def derivative_chromatic(channels, lambdas, z, normalize=True, two_point=False):
    """
    Estimate dI/dxi from one color exposure at defocus `z`, using that
    channel c sees the defocus xi_c = lambda_c z.

    By default this is the least-squares slope of I_c against xi_c
    through all channels; `two_point` uses only the outermost pair.
    With `normalize`, every channel is first divided by its spatial
    mean, since the channels have different background levels. For
    simulated polychromatic data pass the effective wavelengths
    (`chromatic_lambdas`).
    """
    channels = _channel_list(channels)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if len(channels) != lambdas.size or lambdas.size < 2:
        raise SolverError(
            "need matching channels and wavelengths, got {} and {}", len(channels), lambdas.size
        )
    if not z > 0:
        raise SolverError("chromatic derivative needs positive defocus, got {}", z)
    _check_same_grid(channels)
    xis = lambdas * z
    if np.unique(xis).size != xis.size:
        raise SolverError("coincident xi values: {}", xis)
    planes = []
    for image in channels:
        data = image.data
        if normalize:
            mean = data.mean()
            if not mean > 0:
                raise SolverError("cannot normalize a dark channel")
            data = data / mean
        planes.append(data)
    planes = np.stack(planes)
    if two_point:
        lo = int(np.argmin(xis))
        hi = int(np.argmax(xis))
        slope = (planes[hi] - planes[lo]) / (xis[hi] - xis[lo])
    else:
        dxi = xis - xis.mean()
        slope = np.tensordot(dxi, planes - planes.mean(axis=0), axes=1) / np.sum(dxi ** 2)
    return AxialDerivative(RealImage(slope, channels[0].pitch, role="derivative"), "xi")


def chromatic_lambdas(channels, grid):
    """
    Return the effective wavelength of every channel over `grid`.
    """
    return [optics.effective_wavelength(channel, grid) for channel in channels]


## Solvers


def _zero_mean_phase(data, pitch):
    return PhaseMap(data - data.mean(), pitch)


def _require_variable(derivative, variable):
    if not isinstance(derivative, AxialDerivative):
        raise SolverError("expected an AxialDerivative, got {}", derivative)
    if derivative.variable != variable:
        raise SolverError(
            "solver needs dI/d{}, got dI/d{}", variable, derivative.variable
        )


def solve_pure_phase(didz, i0, k, eps=None):
    """
    Solve the TIE for a uniformly illuminated pure-phase object,

        phi = inv_laplacian{ (-k / I0) dI/dz }.
    """
    _require_variable(didz, "z")
    if not i0 > 0:
        raise SolverError("in-focus intensity I0 must be positive: {}", i0)
    grid = SpectralGrid(didz.image.width, didz.image.height, didz.pitch)
    if eps is None:
        eps = grid.default_eps()
    phi = _inverse_laplacian_array((-k / i0) * didz.data, grid, eps)
    return _zero_mean_phase(phi, didz.pitch)


def _teague(derivative, intensity, k, eps, floor):
    if not isinstance(intensity, RealImage) or intensity.channels != 1:
        raise SolverError("Teague solver needs a single-channel intensity image")
    if not derivative.image.same_grid(intensity):
        raise SolverError("derivative {} and intensity {} grids differ", derivative, intensity)
    i = intensity.data
    max_i = float(i.max())
    if floor is None:
        floor = 1e-3 * max_i
    if max_i <= 0 or max_i < floor:
        raise SolverError("intensity image is dark (max {} below floor {})", max_i, floor)
    grid = SpectralGrid(intensity.width, intensity.height, intensity.pitch)
    if eps is None:
        eps = grid.default_eps()
    psi = _inverse_laplacian_array(derivative.data, grid, eps)
    gx, gy = gradient(psi, grid)
    inv_i = 1.0 / np.maximum(i, floor)
    div = divergence(gx * inv_i, gy * inv_i, grid)
    phi = -k * _inverse_laplacian_array(div, grid, 0.0)
    return _zero_mean_phase(phi, intensity.pitch)


def solve_teague(didz, intensity, k, eps=None, floor=None):
    """
    Solve the TIE under Teague's assumption that I grad(phi) is a
    gradient field:

        phi = -k inv_laplacian{ div( (1 / max(I, floor)) grad inv_laplacian{dI/dz} ) }

    The outer inverse Laplacian is exact; the inner one carries the
    regularization `eps`. `floor` defaults to 1e-3 max(I).
    """
    _require_variable(didz, "z")
    return _teague(didz, intensity, k, eps, floor)


def solve_tie_xi(didxi, intensity, eps=None, floor=None):
    """
    Solve the chromatic TIE -2 pi dI/dxi = div(I grad phi), the Teague
    solution with k replaced by 2 pi.
    """
    _require_variable(didxi, "xi")
    return _teague(didxi, intensity, 2 * np.pi, eps, floor)


def teague_curl_residual(phi, didz, intensity, k, eps=None):
    """
    Diagnostic for Teague's assumption. Compare the transverse flux
    I grad(phi) of a reconstruction with the gradient field
    -k grad inv_laplacian{dI/dz} it is supposed to equal, and measure
    how far the flux is from curl-free. Return a dict with both values,
    relative to the norm of the flux.
    """
    _require_variable(didz, "z")
    grid = SpectralGrid(intensity.width, intensity.height, intensity.pitch)
    if eps is None:
        eps = grid.default_eps()
    px, py = gradient(phi.data, grid)
    fx = intensity.data * px
    fy = intensity.data * py
    gx, gy = gradient(-k * _inverse_laplacian_array(didz.data, grid, eps), grid)
    norm = np.sqrt(np.sum(fx ** 2 + fy ** 2))
    if norm == 0:
        return {"fluxResidual": 0.0, "curlResidual": 0.0}
    flux = np.sqrt(np.sum((fx - gx) ** 2 + (fy - gy) ** 2)) / norm
    # curl has units of 1/length relative to the flux
    rot = np.sqrt(np.sum(curl(fx, fy, grid) ** 2)) * grid.pitch / norm
    return {"fluxResidual": float(flux), "curlResidual": float(rot)}


def solve_chromatic(image, lambdas, z, eps=None, floor=None, normalize=True, two_point=False):
    """
    Single-exposure retrieval from a (C, H, W) color image taken at
    defocus `z`: chromatic derivative, then `solve_tie_xi` against the
    channel-averaged intensity (flat-fielded like the derivative when
    `normalize` is set).
    """
    if not isinstance(image, RealImage) or image.channels < 2:
        raise SolverError("single-exposure retrieval needs a color image with at least 2 channels")
    didxi = derivative_chromatic(image, lambdas, z, normalize=normalize, two_point=two_point)
    planes = image.data
    if normalize:
        planes = planes / planes.mean(axis=(1, 2), keepdims=True)
    intensity = RealImage(planes.mean(axis=0), image.pitch, role="intensity")
    return solve_tie_xi(didxi, intensity, eps, floor)
