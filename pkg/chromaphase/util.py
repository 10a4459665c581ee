"""
Module containing assorted utility functions and constants: the error
hierarchy, logging, config vars, physical unit parsing, deterministic
random streams and the worker pool used for data-parallel loops.
"""

import datetime
import hashlib
import os
import re
import sys
import threading

import numpy as np
import psutil


class UnsetClass:
    """
    Singleton class used to implement `Unset`.
    """

    def __repr__(self):
        return "<Unset>"


Unset = UnsetClass()

del UnsetClass


class ChromaphaseError(Exception):
    """
    Base class for all errors raised by the library.
    """

    def __init__(self, msg, *args, **kwargs):
        """
        Construct a new error, passing the `msg`, `args`, and `kwargs`
        to `str.format`.
        """
        super().__init__(msg.format(*args, **kwargs))


class FieldError(ChromaphaseError):
    """
    Exception raised for invalid optical fields or images.
    """


class SolverError(ChromaphaseError):
    """
    Exception raised when a TIE solver gets input it cannot use.
    """


class DatasetError(ChromaphaseError):
    """
    Exception raised when reading or writing a dataset or tensor file
    fails.
    """


class NotADatasetError(DatasetError):
    """
    The file does not start with the expected magic bytes.
    """


class VersionMismatchError(DatasetError):
    """
    The file was written by an incompatible format version.
    """


class TruncatedFileError(DatasetError):
    """
    The file ends before all the data its header announces.
    """


class ShapeMismatchError(DatasetError):
    """
    Stored arrays do not have the shapes the metadata declares.
    """


class ScheduleError(ChromaphaseError):
    """
    Exception raised when a variance schedule leaves its valid range.
    """


class PredictorError(ChromaphaseError):
    """
    Exception raised for misuse of the differentiable function library.
    """


class TrainingError(ChromaphaseError):
    """
    Exception raised when training or sampling produces non-finite
    values. `step` is the failing step; `checkpoint` is the last good
    state (or None).
    """

    def __init__(self, msg, *args, step=None, checkpoint=None, **kwargs):
        super().__init__(msg, *args, **kwargs)
        self.step = step
        self.checkpoint = checkpoint


class ConfigError(ChromaphaseError):
    """
    Exception raised for malformed run configuration.
    """


def format_timestamp():
    """
    Return a string representing the current date and time.
    """
    return datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")


class Log:
    """
    Class handling logging. Lines go to stderr so that they never end
    up inside artifact files.
    """

    def _log(self, level, msg, *args, **kwargs):
        msg_str = msg.format(*args, **kwargs)
        print(
            "{} [{}] {}".format(format_timestamp(), level.upper(), msg_str),
            file=sys.stderr,
        )

    def info(self, msg, *args, **kwargs):
        self._log("info", msg, *args, **kwargs)

    def warn(self, msg, *args, **kwargs):
        self._log("warn", msg, *args, **kwargs)

    def verbose(self, msg, *args, **kwargs):
        """
        Log a message, but only if the 'verbose' config var is enabled.
        """
        if get_env_boolean("verbose"):
            self._log("info", msg, *args, **kwargs)


# Global logging object.
log = Log()


def die(message, code=1):
    """
    Log a message to stderr with the current timestamp, and then exit
    the process reporting failure.
    """
    log.info("fatal: {}", message)
    sys.exit(code)


# Default values for config vars. Set as CHROMAPHASE_THREADS=4 and so
# on in the environment.
ENV_DEFAULTS = {
    "threads": "auto",
    "verbose": "no",
}


def get_env(var):
    """
    Given the name of a config var, return its value.
    """
    env_var = "CHROMAPHASE_" + var.upper()
    return os.environ.get(env_var, ENV_DEFAULTS[var])


def get_env_boolean(var):
    """
    Given the name of a config var, check the environment and return a
    boolean. The var must be set to something that clearly indicates a
    boolean value (several formats are accepted), otherwise raise
    ConfigError.
    """
    val = get_env(var)
    yes = val in ("1", "on") or any(
        word.startswith(val.lower()) for word in ("yes", "true", "enabled")
    )
    if yes and val:
        return True
    no = val in ("0", "off") or any(
        word.startswith(val.lower()) for word in ("no", "false", "disabled")
    )
    if no and val:
        return False
    raise ConfigError(
        "value for boolean config var {} (= CHROMAPHASE_{}) is malformed: {}",
        repr(var),
        var.upper(),
        repr(val),
    )


def get_thread_count():
    """
    Return the number of worker threads to use, from the 'threads'
    config var. 'auto' means one per physical core.
    """
    val = get_env("threads")
    if val == "auto":
        return psutil.cpu_count(logical=False) or 1
    try:
        count = int(val)
    except ValueError:
        raise ConfigError("malformed thread count: {}", repr(val)) from None
    if count < 1:
        raise ConfigError("thread count must be positive: {}", count)
    return count


def parallel_map(fn, items, threads=None):
    """
    Apply `fn` to every element of `items` using a pool of `threads`
    worker threads (default from `get_thread_count`), and return the
    results as a list in input order. The first exception raised by
    any call is re-raised after all workers have stopped.

    Results never depend on the thread count, since every item is
    processed independently and results are stored by index.
    """
    items = list(items)
    if threads is None:
        threads = get_thread_count()
    threads = max(1, min(threads, len(items)))
    results = [Unset] * len(items)
    if threads == 1:
        return [fn(item) for item in items]
    lock = threading.Lock()
    next_idx = 0
    errors = []

    def target():
        nonlocal next_idx
        while True:
            with lock:
                if errors or next_idx >= len(items):
                    return
                idx = next_idx
                next_idx += 1
            try:
                results[idx] = fn(items[idx])
            except Exception as e:
                with lock:
                    errors.append((idx, e))
                return

    workers = [threading.Thread(target=target, daemon=True) for _ in range(threads)]
    for worker in workers:
        worker.start()
    for worker in workers:
        worker.join()
    if errors:
        raise min(errors, key=lambda pair: pair[0])[1]
    return results


def rng_stream(seed, *key):
    """
    Return a `numpy.random.Generator` for the counter-based stream
    identified by `seed` and the integer path `key` (for example a
    sample or path index). Streams with different keys are independent,
    and the same (seed, key) always yields the same numbers.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


# Multipliers from unit suffixes to meters.
LENGTH_UNITS = {
    "m": 1.0,
    "mm": 1e-3,
    "um": 1e-6,
    "nm": 1e-9,
}

LENGTH_REGEX = r"\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(m|mm|um|nm)\s*"


def parse_length(value):
    """
    Given a string with an explicit unit suffix ("550nm", "2 um",
    "0.5e-6m"), return the length in meters as a float. Raise
    ConfigError for bare numbers or unknown units.
    """
    if not isinstance(value, str):
        raise ConfigError("length must be a string with a unit suffix: {}", repr(value))
    match = re.fullmatch(LENGTH_REGEX, value)
    if not match:
        raise ConfigError("malformed length (units nm/um/mm/m required): {}", repr(value))
    number, unit = match.groups()
    return float(number) * LENGTH_UNITS[unit]


def sha256_file(path):
    """
    Return the hex SHA-256 digest of the file at `path`.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def require_finite(array, what, error=FieldError):
    """
    Raise `error` unless every value of `array` is finite.
    """
    if not np.all(np.isfinite(array)):
        bad = int(np.count_nonzero(~np.isfinite(array)))
        raise error("{} has {} non-finite value{}", what, bad, "" if bad == 1 else "s")


def rng_state_to_json(rng):
    """
    Return the bit generator state of `rng` as a JSON-able dict.
    """

    def convert(value):
        if isinstance(value, dict):
            return {key: convert(item) for key, item in value.items()}
        if isinstance(value, np.ndarray):
            return {"array": [int(v) for v in value.ravel()], "dtype": str(value.dtype)}
        if isinstance(value, np.integer):
            return int(value)
        return value

    return convert(rng.bit_generator.state)


def rng_from_json(state):
    """
    Return a Philox `numpy.random.Generator` restored from a state
    produced by `rng_state_to_json`.
    """

    def convert(value):
        if isinstance(value, dict):
            if set(value) == {"array", "dtype"}:
                return np.array(value["array"], dtype=value["dtype"])
            return {key: convert(item) for key, item in value.items()}
        return value

    state = convert(state)
    if state.get("bit_generator") != "Philox":
        raise ConfigError("unsupported random generator state: {}", state.get("bit_generator"))
    bit_generator = np.random.Philox()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
