"""
Synthetic training data: grayscale images are mapped to pure-phase
objects, imaged through the polychromatic forward model at a random
defocus, and corrupted with Gaussian noise. Also holds the dataset file
format.

Every sample owns the random stream `util.rng_stream(seed, index)`, so
a dataset does not depend on how many threads generated it.
"""

import glob
import json
import os
import struct

import numpy as np
import scipy.ndimage
from PIL import Image

import chromaphase
from chromaphase import ComplexField, PhaseMap, RealImage, SensorChannel, WavelengthGrid
from chromaphase import container, optics, util
from chromaphase.util import (
    DatasetError,
    FieldError,
    NotADatasetError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    log,
)

MODALITIES = ("polychromatic", "two_shot")


class SimulationSpec:
    """
    Class representing the parameters of the acquisition simulator.
    Immutable.
    """

    def __init__(
        self,
        phase_max=3.5,
        z_range=(0.1e-6, 3e-6),
        band=None,
        channels=None,
        sigma_c_range=(10e-9, 100e-9),
        noise_sigma=0.01,
        seed=0,
        modality="polychromatic",
        pitch=chromaphase.DEFAULT_PITCH,
    ):
        """
        Construct a spec. `band` defaults to 400-700 nm in 6 nm steps
        (51 wavelengths), `channels` to the red, green and blue
        defaults. If `sigma_c_range` is None the channels keep their
        own widths. Setting both ends of `z_range` equal fixes the
        defocus.
        """
        if not phase_max > 0:
            raise DatasetError("phase_max must be positive: {}", phase_max)
        z_min, z_max = (float(z) for z in z_range)
        if not 0 < z_min <= z_max:
            raise DatasetError("z_range must be positive and ordered: {}", z_range)
        if sigma_c_range is not None:
            lo, hi = (float(s) for s in sigma_c_range)
            if not 0 < lo <= hi:
                raise DatasetError("sigma_c_range must be positive and ordered: {}", sigma_c_range)
            sigma_c_range = (lo, hi)
        if not noise_sigma >= 0:
            raise DatasetError("noise_sigma must be non-negative: {}", noise_sigma)
        if modality not in MODALITIES:
            raise DatasetError("unknown modality: {}", repr(modality))
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise DatasetError("seed must be an unsigned integer: {}", repr(seed))
        channels = tuple(channels or (chromaphase.RED, chromaphase.GREEN, chromaphase.BLUE))
        if len(channels) != 3:
            raise DatasetError("expected 3 sensor channels, got {}", len(channels))
        self._phase_max = float(phase_max)
        self._z_range = (z_min, z_max)
        self._band = band if band is not None else WavelengthGrid.band()
        self._channels = channels
        self._sigma_c_range = sigma_c_range
        self._noise_sigma = float(noise_sigma)
        self._seed = seed
        self._modality = modality
        self._pitch = float(pitch)

    @property
    def phase_max(self):
        return self._phase_max

    @property
    def z_range(self):
        return self._z_range

    @property
    def band(self):
        return self._band

    @property
    def channels(self):
        return self._channels

    @property
    def sigma_c_range(self):
        return self._sigma_c_range

    @property
    def noise_sigma(self):
        return self._noise_sigma

    @property
    def seed(self):
        return self._seed

    @property
    def modality(self):
        return self._modality

    @property
    def pitch(self):
        return self._pitch

    def _to_json(self):
        return {
            "phaseMax": self._phase_max,
            "zRange": list(self._z_range),
            "band": [float(lam) for lam in self._band.lambdas],
            "channels": [channel._to_json() for channel in self._channels],
            "sigmaCRange": None if self._sigma_c_range is None else list(self._sigma_c_range),
            "noiseSigma": self._noise_sigma,
            "seed": self._seed,
            "modality": self._modality,
            "pitch": self._pitch,
        }

    @staticmethod
    def _from_json(data):
        return SimulationSpec(
            phase_max=data["phaseMax"],
            z_range=tuple(data["zRange"]),
            band=WavelengthGrid(data["band"]),
            channels=[
                SensorChannel(c["channelCenter"], c["channelWidth"], c["channelName"])
                for c in data["channels"]
            ],
            sigma_c_range=None if data["sigmaCRange"] is None else tuple(data["sigmaCRange"]),
            noise_sigma=data["noiseSigma"],
            seed=data["seed"],
            modality=data["modality"],
            pitch=data["pitch"],
        )

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self._to_json() == other._to_json()

    def __hash__(self):
        return hash(json.dumps(self._to_json(), sort_keys=True))


class Sample:
    """
    Class representing one (X, Y) training pair: the simulated
    acquisition `x` (channels first), the ground-truth phase `y`, and
    the draws that produced them. `seed_used` is the key (seed, index)
    of the random stream the sample was drawn from; a bare seed is
    paired with `index`. Immutable.
    """

    def __init__(self, x, y, z, sigma_c_used, seed_used, index=0):
        if not isinstance(x, RealImage) or x.channels < 2:
            raise DatasetError("sample input must be a multi-channel RealImage: {}", x)
        if not isinstance(y, RealImage) or y.channels != 1:
            raise DatasetError("sample target must be a single-channel phase map: {}", y)
        if not x.same_grid(y):
            raise ShapeMismatchError(
                "sample input {} and target {} are on different grids", x, y
            )
        self._x = x
        self._y = y
        self._z = float(z)
        self._sigma_c_used = tuple(float(s) for s in sigma_c_used)
        key = (seed_used, index) if np.ndim(seed_used) == 0 else tuple(seed_used)
        if len(key) != 2:
            raise DatasetError("sample stream key must be (seed, index), got {}", seed_used)
        self._seed_used = tuple(int(part) for part in key)
        self._index = int(index)

    @property
    def x(self):
        return self._x

    @property
    def y(self):
        return self._y

    @property
    def z(self):
        return self._z

    @property
    def sigma_c_used(self):
        return self._sigma_c_used

    @property
    def seed_used(self):
        return self._seed_used

    @property
    def index(self):
        return self._index

    def _to_json(self):
        return {
            "index": self._index,
            "z": self._z,
            "sigmaCUsed": list(self._sigma_c_used),
            "seedUsed": list(self._seed_used),
            "pitch": self._x.pitch,
            "xShape": list(self._x.data.shape),
            "yShape": list(self._y.data.shape),
        }

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self._to_json() == other._to_json()
            and self._x == other._x
            and self._y == other._y
        )

    def __hash__(self):
        return hash((self._index, self._seed_used, self._z, self._y))

    def __str__(self):
        return "Sample {} (z={:g} um, {})".format(self._index, self._z * 1e6, self._x)


def phase_from_grayscale(image, phase_max):
    """
    Map the [min, max] range of a grayscale image affinely onto
    [0, phase_max] radians. A constant image maps to zero phase.
    """
    pitch = chromaphase.DEFAULT_PITCH
    if isinstance(image, RealImage):
        pitch = image.pitch
        image = image.data
    data = np.asarray(image, dtype=np.float64)
    util.require_finite(data, "grayscale image")
    lo = data.min()
    span = data.max() - lo
    if span == 0:
        return PhaseMap(np.zeros_like(data), pitch)
    # Clip guards the upper end against rounding past phase_max.
    return PhaseMap(np.clip((data - lo) / span * phase_max, 0, phase_max), pitch)


def add_noise(image, sigma, rng):
    """
    Add white Gaussian noise of standard deviation `sigma` times the
    image mean, then clamp at zero.
    """
    if not sigma >= 0:
        raise DatasetError("noise sigma must be non-negative: {}", sigma)
    if sigma == 0:
        return image
    std = sigma * float(np.mean(image.data))
    noisy = image.data + std * rng.standard_normal(image.data.shape)
    return RealImage(np.maximum(noisy, 0.0), image.pitch, role="intensity")


def _draw_sigmas(spec, rng):
    if spec.sigma_c_range is None:
        return tuple(channel.sigma_c for channel in spec.channels)
    lo, hi = spec.sigma_c_range
    return tuple(float(rng.uniform(lo, hi)) for _ in spec.channels)


def simulate_sample(phase, spec, rng, index=0):
    """
    Simulate one acquisition of the pure-phase object `phase`.

    Draws the defocus z, then one quantum-efficiency width per channel,
    then the noise of every channel in order, all from `rng`. In the
    polychromatic modality X is the RGB triple at +z; in the two_shot
    modality X is the green channel at +z and -z.
    """
    phase_max = spec.phase_max
    if np.any(phase.data < 0) or np.any(phase.data > phase_max):
        raise DatasetError("phase values must lie in [0, {}]", phase_max)
    z = float(rng.uniform(*spec.z_range))
    sigmas = _draw_sigmas(spec, rng)
    channels = [
        channel.with_sigma(sigma) for channel, sigma in zip(spec.channels, sigmas)
    ]
    obj = ComplexField.from_phase(phase)
    if spec.modality == "polychromatic":
        planes = [optics.polychromatic_image(obj, z, channel, spec.band) for channel in channels]
    else:
        green = channels[1]
        planes = [
            optics.polychromatic_image(obj, z, green, spec.band),
            optics.polychromatic_image(obj, -z, green, spec.band),
        ]
    planes = [add_noise(plane, spec.noise_sigma, rng).data for plane in planes]
    x = RealImage(np.stack(planes), phase.pitch, role="intensity")
    return Sample(x, phase, z, sigmas, (spec.seed, index), index)


## Grayscale sources


def filtered_noise(rng, size, sigma_px=3.0):
    """
    Return white noise low-pass filtered by a Gaussian of `sigma_px`
    pixels, with periodic boundaries.
    """
    noise = rng.standard_normal((size, size))
    return scipy.ndimage.gaussian_filter(noise, sigma_px, mode="wrap")


def blobs(rng, size, count=6):
    """
    Return a sum of `count` isotropic Gaussian blobs of random position,
    width and height.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        width = rng.uniform(0.04, 0.15) * size
        height = rng.uniform(0.2, 1.0)
        out += height * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return out


# (value, semi-axis a, semi-axis b, center x, center y, angle deg) of
# the modified Shepp-Logan head phantom on [-1, 1]^2.
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0),
)


def ellipses(size, table):
    """
    Rasterize a table of (value, a, b, x0, y0, angle) ellipses on the
    [-1, 1]^2 square.
    """
    coords = np.linspace(-1, 1, size)
    xx, yy = np.meshgrid(coords, -coords)
    out = np.zeros((size, size))
    for value, a, b, x0, y0, angle in table:
        theta = np.deg2rad(angle)
        dx = xx - x0
        dy = yy - y0
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        out[(u / a) ** 2 + (v / b) ** 2 <= 1] += value
    return out


def random_phantom(rng, size, count=8):
    """
    Return a Shepp-Logan-style phantom: the head outline plus `count`
    random interior ellipses.
    """
    table = list(SHEPP_LOGAN[:2])
    for _ in range(count):
        table.append(
            (
                rng.uniform(-0.3, 0.3),
                rng.uniform(0.05, 0.3),
                rng.uniform(0.05, 0.3),
                rng.uniform(-0.4, 0.4),
                rng.uniform(-0.5, 0.5),
                rng.uniform(0, 180),
            )
        )
    # Soften the edges slightly so the phase stays band-limited.
    return scipy.ndimage.gaussian_filter(ellipses(size, table), 1.0, mode="wrap")


PROCEDURAL_SOURCES = {
    "noise": filtered_noise,
    "blobs": blobs,
    "phantom": random_phantom,
}


def load_grayscale(path):
    """
    Read a PNG or PGM file as a 2D float array. Color images are
    converted to luminance.
    """
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "I", "I;16", "F"):
                img = img.convert("L")
            return np.asarray(img, dtype=np.float64)
    except OSError as e:
        raise DatasetError("cannot read image {}: {}", path, e) from None


def list_images(directory):
    """
    Return the sorted PNG and PGM files of `directory`.
    """
    paths = []
    for pattern in ("*.png", "*.PNG", "*.pgm", "*.PGM"):
        paths.extend(glob.glob(os.path.join(directory, pattern)))
    paths = sorted(set(paths))
    if not paths:
        raise DatasetError("no PNG or PGM images in {}", directory)
    return paths


def center_crop(data, size):
    height, width = data.shape
    if height < size or width < size:
        raise DatasetError("image {}x{} smaller than crop size {}", width, height, size)
    top = (height - size) // 2
    left = (width - size) // 2
    return data[top : top + size, left : left + size]


def grayscale_source(source, index, rng, size):
    """
    Return the grayscale image for sample `index`. `source` is the name
    of a procedural generator, "mixed" (cycling through all of them),
    or a list of image paths (cycled).
    """
    if isinstance(source, (list, tuple)):
        return center_crop(load_grayscale(source[index % len(source)]), size)
    if source == "mixed":
        names = sorted(PROCEDURAL_SOURCES)
        source = names[index % len(names)]
    if source not in PROCEDURAL_SOURCES:
        raise DatasetError("unknown grayscale source: {}", repr(source))
    return PROCEDURAL_SOURCES[source](rng, size)


def generate_dataset(spec, count, size=64, source="mixed", threads=None):
    """
    Generate `count` samples of `size` x `size` pixels. `source` is as
    for `grayscale_source`, or a directory of images. Sample `index`
    draws everything from `util.rng_stream(spec.seed, index)`.
    """
    if isinstance(source, str) and os.path.isdir(source):
        source = list_images(source)
    samples = util.parallel_map(
        lambda index: generate_sample(spec, index, size, source), range(count), threads
    )
    log.verbose("generated {} samples ({}, {}x{})", count, spec.modality, size, size)
    return samples


def generate_sample(spec, index, size=64, source="mixed"):
    """
    Generate sample `index` of the dataset `generate_dataset` would
    produce for `spec`, on its own. Regenerating a stored sample takes
    the `spec` it was simulated with and `sample.seed_used[1]`.
    """
    if isinstance(source, str) and os.path.isdir(source):
        source = list_images(source)
    rng = util.rng_stream(spec.seed, index)
    gray = grayscale_source(source, index, rng, size)
    phase = phase_from_grayscale(RealImage(gray, spec.pitch, role="phase"), spec.phase_max)
    try:
        return simulate_sample(phase, spec, rng, index)
    except FieldError as e:
        raise FieldError("sample {}: {}", index, e) from e


## Dataset files

DATASET_MAGIC = b"ZMDD"
DATASET_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sHII")


def write_dataset(samples, path, spec=None):
    """
    Write `samples` to `path`. Layout: magic "ZMDD", u16 version, u32
    sample count, u32 metadata length, the JSON metadata, then the x and
    y tensors of every sample in the tensor container layout.
    """
    metadata = {
        "version": chromaphase.__version__,
        "spec": None if spec is None else spec._to_json(),
        "samples": [sample._to_json() for sample in samples],
    }
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), len(meta_bytes)))
        f.write(meta_bytes)
        for sample in samples:
            f.write(container.encode_tensor(sample.x.data))
            f.write(container.encode_tensor(sample.y.data))


def read_dataset_with_metadata(path):
    """
    Read the dataset at `path`. Return the list of samples and the
    stored `SimulationSpec` (or None).
    """
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != DATASET_MAGIC:
        raise NotADatasetError("{} is not a dataset (bad magic {})", path, buf[:4])
    if len(buf) < _DATASET_HEADER.size:
        raise TruncatedFileError("dataset header of {} cut off", path)
    _, version, count, meta_len = _DATASET_HEADER.unpack_from(buf)
    if version != DATASET_VERSION:
        raise VersionMismatchError(
            "{} has dataset format version {} (expected {})", path, version, DATASET_VERSION
        )
    offset = _DATASET_HEADER.size
    if len(buf) < offset + meta_len:
        raise TruncatedFileError("dataset metadata of {} cut off", path)
    try:
        metadata = json.loads(buf[offset : offset + meta_len].decode("utf-8"))
    except ValueError as e:
        raise DatasetError("malformed dataset metadata in {}: {}", path, e) from None
    offset += meta_len
    records = metadata["samples"]
    if len(records) != count:
        raise ShapeMismatchError(
            "{} declares {} samples but describes {}", path, count, len(records)
        )
    samples = []
    for record in records:
        x, offset = container.decode_tensor(buf, offset)
        y, offset = container.decode_tensor(buf, offset)
        for name, array in (("x", x), ("y", y)):
            declared = tuple(record[name + "Shape"])
            if array.shape != declared:
                raise ShapeMismatchError(
                    "sample {} {} has shape {}, metadata says {}",
                    record["index"],
                    name,
                    array.shape,
                    declared,
                )
        samples.append(
            Sample(
                RealImage(x, record["pitch"], role="intensity"),
                PhaseMap(y, record["pitch"]),
                record["z"],
                record["sigmaCUsed"],
                record["seedUsed"],
                record["index"],
            )
        )
    if offset != len(buf):
        raise DatasetError("{} trailing bytes in {}", len(buf) - offset, path)
    spec = metadata.get("spec")
    return samples, None if spec is None else SimulationSpec._from_json(spec)


def read_dataset(path):
    """
    Read the samples stored at `path`.
    """
    return read_dataset_with_metadata(path)[0]
