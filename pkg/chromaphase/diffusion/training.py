"""
Training loop and checkpoints.

A step draws a minibatch, one time and one noise draw per sample,
evaluates `loss_zmd`, and applies one optimizer update. All randomness
comes from a single Philox stream whose state is saved in checkpoints,
so a resumed run reproduces the uninterrupted loss trace bit for bit.
"""

import numpy as np

import chromaphase
from chromaphase import container, util
from chromaphase.diffusion.losses import loss_zmd
from chromaphase.predictor.optim import Optimizer, OptimizerConfig
from chromaphase.util import TrainingError, log

CHECKPOINT_MAGIC = b"ZMDK"
CHECKPOINT_VERSION = 1


class TrainingSet:
    """
    Class holding training targets `y` (N, ...) and conditioning `X`
    (N, ...) or None. Immutable.
    """

    def __init__(self, y, X=None):
        y = np.array(y, dtype=np.float64)
        if y.ndim < 2 or y.shape[0] == 0:
            raise TrainingError("training set must be a non-empty batch, got shape {}", y.shape)
        if X is not None:
            X = np.array(X, dtype=np.float64)
            if X.shape[0] != y.shape[0]:
                raise TrainingError("{} targets but {} conditioning inputs", y.shape[0], X.shape[0])
            X.setflags(write=False)
        y.setflags(write=False)
        self._y = y
        self._X = X

    @staticmethod
    def from_samples(samples):
        """
        Build a training set from dataset samples: y is the phase
        (N, 1, H, W), X the acquisitions (N, C, H, W).
        """
        if not samples:
            raise TrainingError("cannot train on an empty dataset")
        y = np.stack([sample.y.data[None] for sample in samples])
        X = np.stack([sample.x.data for sample in samples])
        return TrainingSet(y, X)

    @property
    def y(self):
        return self._y

    @property
    def X(self):
        return self._X

    def __len__(self):
        return self._y.shape[0]

    def batch(self, idx):
        return self._y[idx], None if self._X is None else self._X[idx]


class TrainConfig:
    """
    Class representing training hyper-parameters. Immutable.
    """

    def __init__(self, steps=1000, batch_size=64, optimizer=None, seed=0, checkpoint_every=0):
        if steps < 0:
            raise TrainingError("step budget must be non-negative: {}", steps)
        if batch_size < 1:
            raise TrainingError("batch size must be positive: {}", batch_size)
        self._steps = int(steps)
        self._batch_size = int(batch_size)
        self._optimizer = optimizer or OptimizerConfig()
        self._seed = int(seed)
        self._checkpoint_every = int(checkpoint_every)

    @property
    def steps(self):
        return self._steps

    @property
    def batch_size(self):
        return self._batch_size

    @property
    def optimizer(self):
        return self._optimizer

    @property
    def seed(self):
        return self._seed

    @property
    def checkpoint_every(self):
        return self._checkpoint_every

    def with_steps(self, steps):
        return TrainConfig(steps, self._batch_size, self._optimizer, self._seed, self._checkpoint_every)

    def _to_json(self):
        return {
            "steps": self._steps,
            "batchSize": self._batch_size,
            "optimizer": self._optimizer._to_json(),
            "seed": self._seed,
            "checkpointEvery": self._checkpoint_every,
        }


class Checkpoint:
    """
    Class representing the complete state of a training run after
    `step` steps: model parameters, optimizer moments, the random
    stream state and the loss trace so far.
    """

    def __init__(self, step, params, optimizer_step, optimizer_arrays, rng_state, trace):
        self.step = int(step)
        self.params = {name: np.array(value) for name, value in params.items()}
        self.optimizer_step = int(optimizer_step)
        self.optimizer_arrays = {name: np.array(value) for name, value in optimizer_arrays.items()}
        self.rng_state = rng_state
        self.trace = [float(v) for v in trace]

    def __str__(self):
        return "Checkpoint at step {} ({} tensors)".format(self.step, len(self.params))


def write_checkpoint(path, checkpoint, extra=None):
    """
    Write `checkpoint` to `path`. `extra` is JSON metadata stored
    alongside (model and run configuration).
    """
    arrays = {"param/" + name: value for name, value in checkpoint.params.items()}
    arrays.update({"optim/" + name: value for name, value in checkpoint.optimizer_arrays.items()})
    arrays["trace"] = np.array(checkpoint.trace, dtype=np.float64)
    metadata = {
        "step": checkpoint.step,
        "optimizerStep": checkpoint.optimizer_step,
        "rngState": checkpoint.rng_state,
        "version": chromaphase.__version__,
        "extra": extra or {},
    }
    container.write_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, metadata, arrays)


def read_checkpoint(path):
    """
    Return the `Checkpoint` stored at `path` and its extra metadata.
    """
    metadata, arrays = container.read_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    params = {name[len("param/") :]: v for name, v in arrays.items() if name.startswith("param/")}
    optim = {name[len("optim/") :]: v for name, v in arrays.items() if name.startswith("optim/")}
    checkpoint = Checkpoint(
        metadata["step"],
        params,
        metadata["optimizerStep"],
        optim,
        metadata["rngState"],
        arrays["trace"].tolist(),
    )
    return checkpoint, metadata["extra"]


def _grads_finite(params):
    return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params)


def train(data, model, config, resume=None, checkpoint_path=None, checkpoint_extra=None):
    """
    Train `model` in place on the `TrainingSet` `data` until
    `config.steps` steps have been taken, and return the model and the
    per-step loss trace.

    `resume` continues from a `Checkpoint`. If `checkpoint_path` is
    given, a checkpoint is written every `config.checkpoint_every`
    steps and at the end. A non-finite loss or gradient raises
    TrainingError carrying the step and the last good checkpoint.
    """
    if len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    params = model.parameters()
    optimizer = Optimizer(config.optimizer)
    if resume is None:
        rng = util.rng_stream(config.seed, 0)
        trace = []
        start = 0
    else:
        model.load_state(resume.params)
        optimizer.load_state(resume.optimizer_step, resume.optimizer_arrays, [p.data for p in params])
        rng = util.rng_from_json(resume.rng_state)
        trace = list(resume.trace)
        start = resume.step
        log.info("resuming training at step {}", start)

    def snapshot(step, rng_state):
        opt_step, opt_arrays = optimizer.state()
        return Checkpoint(step, model.state(), opt_step, opt_arrays, rng_state, trace)

    for step in range(start, config.steps):
        rng_state = util.rng_state_to_json(rng)
        idx = rng.integers(0, len(data), size=config.batch_size)
        model.zero_grad()
        loss = loss_zmd(data.batch(idx), model, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(
                "loss is {} at step {}", value, step, step=step, checkpoint=snapshot(step, rng_state)
            )
        if loss.requires_grad:
            loss.backward()
        if not _grads_finite(params):
            raise TrainingError(
                "non-finite gradient at step {}", step, step=step, checkpoint=snapshot(step, rng_state)
            )
        optimizer.apply(params)
        trace.append(value)
        done = step + 1
        if done % 100 == 0:
            log.verbose("step {}: loss {:.6g}", done, value)
        if checkpoint_path and config.checkpoint_every and done % config.checkpoint_every == 0:
            write_checkpoint(checkpoint_path, snapshot(done, util.rng_state_to_json(rng)), checkpoint_extra)
    if checkpoint_path:
        write_checkpoint(
            checkpoint_path, snapshot(max(start, config.steps), util.rng_state_to_json(rng)), checkpoint_extra
        )
    return model, trace

