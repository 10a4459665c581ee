"""
Run configuration: one JSON document with a section per stage. Every
key has a default here (mirrored by `chromaphase.json` at the
repository root); unknown keys are rejected, and physical lengths are
strings with an explicit unit.
"""

import hashlib
import json

from frozendict import frozendict

from chromaphase import SensorChannel, WavelengthGrid, util
from chromaphase.dataset import MODALITIES, SimulationSpec
from chromaphase.predictor.optim import OPTIMIZERS, OptimizerConfig
from chromaphase.diffusion import MODES
from chromaphase.diffusion.training import TrainConfig
from chromaphase.util import ConfigError, parse_length

SOLVER_METHODS = ("chromatic", "pure_phase", "teague", "polyfit")

DEFAULTS = {
    "simulation": {
        "count": 100,
        "size": 64,
        "source": "mixed",
        "phaseMax": 3.5,
        "zMin": "0.1um",
        "zMax": "3um",
        "bandStart": "400nm",
        "bandStop": "700nm",
        "bandStep": "6nm",
        "channels": {"red": "630nm", "green": "550nm", "blue": "450nm"},
        "channelWidth": "50nm",
        "sigmaCMin": "10nm",
        "sigmaCMax": "100nm",
        "noiseSigma": 0.01,
        "modality": "polychromatic",
        "pitch": "0.5um",
    },
    "solver": {
        "method": "chromatic",
        "defocus": "2um",
        "wavelength": "550nm",
        "eps": None,
        "floor": None,
        "degree": 2,
        "normalize": True,
        "twoPoint": False,
    },
    "diffusion": {
        "mode": "zmd",
        "T": 200,
        "a": 0.001,
        "omega": 2.0,
        "steps": 1000,
        "batchSize": 64,
        "optimizer": "adam",
        "lr": 0.001,
        "width": 32,
        "blocks": 2,
        "scheduleDegree": 3,
        "checkpointEvery": 100,
    },
    "theory": {
        "betas": [0.5, 2.0, 10.0],
        "paths": 10000,
        "steps": 200,
        "dim": 16,
        "datasets": 10,
    },
    "seed": 0,
    "paths": {
        "dataset": "dataset.zmdd",
        "checkpoint": "model.zmdk",
    },
}

SECTIONS = ("simulation", "solver", "diffusion", "theory", "paths")


def _merge(section, defaults, values):
    if not isinstance(values, dict):
        raise ConfigError("config section {} must be an object", repr(section))
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError("unknown key{} in {}: {}", "s" if len(unknown) > 1 else "", section, ", ".join(unknown))
    merged = dict(defaults)
    merged.update(values)
    return merged


def _freeze(value):
    if isinstance(value, dict):
        return frozendict({key: _freeze(item) for key, item in value.items()})
    if isinstance(value, list):
        return tuple(_freeze(item) for item in value)
    return value


def _thaw(value):
    if isinstance(value, (dict, frozendict)):
        return {key: _thaw(item) for key, item in value.items()}
    if isinstance(value, tuple):
        return [_thaw(item) for item in value]
    return value


def _positive_int(section, key, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError("{}.{} must be an integer >= {}, got {}", section, key, minimum, repr(value))
    return value


def _number(section, key, value, minimum=0.0):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value >= minimum:
        raise ConfigError("{}.{} must be a number >= {}, got {}", section, key, minimum, repr(value))
    return float(value)


def _choice(section, key, value, choices):
    if value not in choices:
        raise ConfigError("{}.{} must be one of {}, got {}", section, key, ", ".join(choices), repr(value))
    return value


class RunConfig:
    """
    Class representing a validated run configuration. Sections are
    exposed as frozendicts holding the document values; the helper
    methods convert them to library objects with lengths in meters.
    Immutable.
    """

    def __init__(self, data=None):
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigError("run configuration must be a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError("unknown top-level config key{}: {}", "s" if len(unknown) > 1 else "", ", ".join(unknown))
        resolved = {}
        for section in SECTIONS:
            resolved[section] = _merge(section, DEFAULTS[section], data.get(section, {}))
        resolved["seed"] = data.get("seed", DEFAULTS["seed"])
        if isinstance(resolved["seed"], bool) or not isinstance(resolved["seed"], int) or resolved["seed"] < 0:
            raise ConfigError("seed must be an unsigned integer, got {}", repr(resolved["seed"]))
        self._data = _freeze(resolved)
        # Convert once so that malformed values fail at load time.
        self.simulation_spec()
        self.solver_options()
        self.train_config()
        self.theory_options()

    @property
    def simulation(self):
        return self._data["simulation"]

    @property
    def solver(self):
        return self._data["solver"]

    @property
    def diffusion(self):
        return self._data["diffusion"]

    @property
    def theory(self):
        return self._data["theory"]

    @property
    def paths(self):
        return self._data["paths"]

    @property
    def seed(self):
        return self._data["seed"]

    def with_seed(self, seed):
        data = self._to_json()
        data["seed"] = seed
        return RunConfig(data)

    def simulation_spec(self):
        """
        Return the `SimulationSpec` of the simulation section.
        """
        sim = self.simulation
        _positive_int("simulation", "count", sim["count"], minimum=0)
        _positive_int("simulation", "size", sim["size"], minimum=8)
        _choice("simulation", "modality", sim["modality"], MODALITIES)
        width = parse_length(sim["channelWidth"])
        if not isinstance(sim["channels"], frozendict) or len(sim["channels"]) != 3:
            raise ConfigError("simulation.channels must map 3 channel names to center wavelengths")
        channels = [
            SensorChannel(parse_length(center), width, name) for name, center in sim["channels"].items()
        ]
        band = WavelengthGrid.band(
            parse_length(sim["bandStart"]), parse_length(sim["bandStop"]), parse_length(sim["bandStep"])
        )
        if sim["sigmaCMin"] is None and sim["sigmaCMax"] is None:
            sigma_range = None
        else:
            sigma_range = (parse_length(sim["sigmaCMin"]), parse_length(sim["sigmaCMax"]))
        try:
            return SimulationSpec(
                phase_max=_number("simulation", "phaseMax", sim["phaseMax"]),
                z_range=(parse_length(sim["zMin"]), parse_length(sim["zMax"])),
                band=band,
                channels=channels,
                sigma_c_range=sigma_range,
                noise_sigma=_number("simulation", "noiseSigma", sim["noiseSigma"]),
                seed=self.seed,
                modality=sim["modality"],
                pitch=parse_length(sim["pitch"]),
            )
        except util.ChromaphaseError as e:
            raise ConfigError("invalid simulation section: {}", e) from None

    def solver_options(self):
        """
        Return the solver section with lengths in meters.
        """
        solver = self.solver
        options = {
            "method": _choice("solver", "method", solver["method"], SOLVER_METHODS),
            "defocus": parse_length(solver["defocus"]),
            "wavelength": parse_length(solver["wavelength"]),
            "eps": None if solver["eps"] is None else _number("solver", "eps", solver["eps"]),
            "floor": None if solver["floor"] is None else _number("solver", "floor", solver["floor"]),
            "degree": _positive_int("solver", "degree", solver["degree"]),
        }
        for key in ("normalize", "twoPoint"):
            if not isinstance(solver[key], bool):
                raise ConfigError("solver.{} must be true or false", key)
        options["normalize"] = solver["normalize"]
        options["two_point"] = solver["twoPoint"]
        return options

    def optimizer_config(self):
        diff = self.diffusion
        return OptimizerConfig(
            kind=_choice("diffusion", "optimizer", diff["optimizer"], OPTIMIZERS),
            lr=_number("diffusion", "lr", diff["lr"]),
        )

    def train_config(self):
        """
        Return the `TrainConfig` of the diffusion section.
        """
        diff = self.diffusion
        _choice("diffusion", "mode", diff["mode"], MODES)
        _positive_int("diffusion", "T", diff["T"])
        _number("diffusion", "a", diff["a"])
        _number("diffusion", "omega", diff["omega"])
        _positive_int("diffusion", "width", diff["width"])
        _positive_int("diffusion", "blocks", diff["blocks"], minimum=0)
        _positive_int("diffusion", "scheduleDegree", diff["scheduleDegree"], minimum=0)
        return TrainConfig(
            steps=_positive_int("diffusion", "steps", diff["steps"], minimum=0),
            batch_size=_positive_int("diffusion", "batchSize", diff["batchSize"]),
            optimizer=self.optimizer_config(),
            seed=self.seed,
            checkpoint_every=_positive_int("diffusion", "checkpointEvery", diff["checkpointEvery"], minimum=0),
        )

    def theory_options(self):
        theory = self.theory
        betas = theory["betas"]
        if not isinstance(betas, tuple) or not betas:
            raise ConfigError("theory.betas must be a non-empty list")
        return {
            "betas": tuple(_number("theory", "betas", b) for b in betas),
            "paths": _positive_int("theory", "paths", theory["paths"], minimum=100),
            "steps": _positive_int("theory", "steps", theory["steps"], minimum=10),
            "dim": _positive_int("theory", "dim", theory["dim"]),
            "datasets": _positive_int("theory", "datasets", theory["datasets"], minimum=0),
            "seed": self.seed,
        }

    def _to_json(self):
        return _thaw(self._data)

    def digest(self):
        """
        Return the SHA-256 of the canonical JSON form.
        """
        return _digest(self._to_json())

    def training_digest(self):
        """
        Return the hash of everything a resumed training run must share
        with the run that wrote its checkpoint: all of the configuration
        except the step budget, the checkpoint interval and the paths.
        """
        data = self._to_json()
        del data["paths"]
        del data["diffusion"]["steps"]
        del data["diffusion"]["checkpointEvery"]
        return _digest(data)

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self._data == other._data

    def __hash__(self):
        return hash(self._data)


def _digest(data):
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def is_manifest(data):
    return isinstance(data, dict) and "configHash" in data and "config" in data


def load_run(path=None):
    """
    Load the run configuration at `path` (defaults when None) and
    return it with the command-line arguments recorded for the run.
    A run manifest is accepted too, in which case its recorded
    configuration and arguments are used; a manifest whose hash does
    not match its configuration is rejected. Plain configuration files
    record no arguments.
    """
    if path is None:
        return RunConfig(), {}
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("no such config file: {}", path) from None
    except ValueError as e:
        raise ConfigError("malformed JSON in {}: {}", path, e) from None
    if is_manifest(data):
        config = RunConfig(data["config"])
        if config.digest() != data["configHash"]:
            raise ConfigError("manifest {} does not match its recorded config hash", path)
        arguments = data.get("arguments") or {}
        if not isinstance(arguments, dict):
            raise ConfigError("manifest {} has malformed arguments", path)
        return config, arguments
    return RunConfig(data), {}


def load_config(path=None):
    """
    Load the run configuration at `path`; see `load_run`.
    """
    return load_run(path)[0]
