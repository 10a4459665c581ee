"""
Command-line interface. Subcommands:

    simulate        generate a synthetic dataset
    solve           retrieve phase with a classical TIE solver
    train           train a diffusion model on a dataset
    sample          draw phase samples from a trained model
    eval            score predicted phase maps against ground truth
    verify-theory   Monte Carlo checks of the forward diffusion

Every command writes `<out>.manifest.json` next to its main output,
recording the resolved configuration, its hash, the seed, the tool
version and the SHA-256 of every input and output. Passing a manifest
as `--config` replays the run.

Exit codes: 0 on success, 1 for user errors (bad configuration, bad
input files, failed checks), 2 for internal errors.
"""

import argparse
import csv
import json
import os
import sys
import traceback

import numpy as np
from PIL import Image

import chromaphase
from chromaphase import RealImage, container, dataset, metrics, theory, tie, util
from chromaphase.cli.config import SOLVER_METHODS, RunConfig, load_run
from chromaphase.diffusion import DiffusionModel, sampling
from chromaphase.diffusion.schedule import LearnedSchedule
from chromaphase.diffusion.training import TrainingSet, read_checkpoint, train
from chromaphase.predictor import Network, mean_predictor_spec, residual_predictor
from chromaphase.util import (
    ConfigError,
    DatasetError,
    FieldError,
    SolverError,
    die,
    log,
)

USER_ERRORS = (ConfigError, DatasetError, SolverError, FieldError, OSError)


def manifest_path(out):
    return "{}.manifest.json".format(out)


def write_manifest(out, command, config, outputs, inputs=(), arguments=None):
    """
    Write the run manifest for the artifact `out`. The manifest holds no
    timestamps, so reruns reproduce it byte for byte.
    """
    manifest = {
        "command": command,
        "config": config._to_json(),
        "configHash": config.digest(),
        "seed": config.seed,
        "version": chromaphase.__version__,
        "arguments": arguments or {},
        "inputs": {path: util.sha256_file(path) for path in inputs},
        "outputs": {path: util.sha256_file(path) for path in outputs},
    }
    with open(manifest_path(out), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    log.verbose("wrote manifest {}", manifest_path(out))


## Inputs


def is_dataset_file(path):
    with open(path, "rb") as f:
        return f.read(4) == dataset.DATASET_MAGIC


def read_image_input(path, config, sample=0):
    """
    Read the input of `solve`. Return (planes, pitch, z, zs): `planes`
    is a (C, H, W) array; `z` is the recorded defocus (datasets only);
    `zs` the per-plane defocus of a through-focus stack (tensor sidecar
    key "zs").

    Accepted inputs are dataset files (sample `sample`), PNG/PGM images
    (RGB images give three channels), and tensor files of shape (H, W)
    or (C, H, W).
    """
    pitch = util.parse_length(config.simulation["pitch"])
    if is_dataset_file(path):
        samples = dataset.read_dataset(path)
        if not 0 <= sample < len(samples):
            raise DatasetError("{} has no sample {} ({} samples)", path, sample, len(samples))
        chosen = samples[sample]
        return chosen.x.data, chosen.x.pitch, chosen.z, None
    if path.lower().endswith((".png", ".pgm")):
        try:
            with Image.open(path) as img:
                if img.mode in ("RGB", "RGBA", "P"):
                    planes = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255
                    return planes, pitch, None, None
        except OSError as e:
            raise DatasetError("cannot read image {}: {}", path, e) from None
        return dataset.load_grayscale(path)[None], pitch, None, None
    planes = container.read_tensor(path)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise DatasetError("expected an (H, W) or (C, H, W) tensor in {}, got {}", path, planes.shape)
    zs = None
    if os.path.exists(container.sidecar_path(path)):
        meta = container.read_sidecar(path)
        pitch = float(meta.get("pitch", pitch))
        zs = meta.get("zs")
    return planes.astype(np.float64), pitch, None, zs


def read_phase_stack(path):
    """
    Read phase maps for `eval`: the ground truth of a dataset file, or
    a tensor of shape (H, W), (N, H, W) or (N, 1, H, W). Return the
    (N, H, W) stack and the sample ids.
    """
    if is_dataset_file(path):
        samples = dataset.read_dataset(path)
        if not samples:
            return np.zeros((0, 0, 0)), []
        return np.stack([s.y.data for s in samples]), [s.index for s in samples]
    stack = container.read_tensor(path)
    if stack.ndim == 2:
        stack = stack[None]
    elif stack.ndim == 4 and stack.shape[1] == 1:
        stack = stack[:, 0]
    if stack.ndim != 3:
        raise DatasetError("cannot read phase maps of shape {} from {}", stack.shape, path)
    return stack.astype(np.float64), list(range(stack.shape[0]))


## Outputs


def write_phase_png(path, phase):
    """
    Write `phase` as a 16-bit grayscale PNG, min-max scaled, and record
    the scale in `<path>.json`. A constant map is written as all zeros.
    """
    lo = float(phase.min())
    hi = float(phase.max())
    if hi > lo:
        scaled = np.round((phase - lo) / (hi - lo) * 65535)
    else:
        scaled = np.zeros(phase.shape)
    Image.fromarray(scaled.astype(np.uint16)).save(path, format="PNG")
    with open(container.sidecar_path(path), "w") as f:
        json.dump({"min": lo, "max": hi, "unit": "rad", "levels": 65535}, f, indent=2, sort_keys=True)
        f.write("\n")


## Commands


def cmd_simulate(args, config):
    spec = config.simulation_spec()
    sim = config.simulation
    out = args.out or config.paths["dataset"]
    samples = dataset.generate_dataset(spec, sim["count"], sim["size"], sim["source"])
    dataset.write_dataset(samples, out, spec)
    write_manifest(out, "simulate", config, [out])
    log.info("wrote {} samples to {}", len(samples), out)
    return 0


def solve_planes(planes, pitch, options, config, z=None, zs=None):
    """
    Run the solver `options["method"]` on the (C, H, W) `planes` and
    return the `PhaseMap`.
    """
    method = options["method"]
    eps = options["eps"]
    floor = options["floor"]
    defocus = options["defocus"] if z is None else z
    k = 2 * np.pi / options["wavelength"]
    images = [RealImage(plane, pitch) for plane in planes]
    if method == "chromatic":
        spec = config.simulation_spec()
        if len(images) != len(spec.channels):
            raise SolverError(
                "chromatic solver needs {} color channels, got {}", len(spec.channels), len(images)
            )
        lambdas = tie.chromatic_lambdas(spec.channels, spec.band)
        return tie.solve_chromatic(
            RealImage(planes, pitch),
            lambdas,
            defocus,
            eps,
            floor,
            normalize=options["normalize"],
            two_point=options["two_point"],
        )
    if method in ("pure_phase", "teague"):
        if len(images) != 2:
            raise SolverError("{} needs the two planes I(+z), I(-z), got {}", method, len(images))
        didz = tie.derivative_2shot(images[0], images[1], defocus)
        in_focus = RealImage((planes[0] + planes[1]) / 2, pitch)
        if method == "pure_phase":
            return tie.solve_pure_phase(didz, float(in_focus.data.mean()), k, eps)
        return tie.solve_teague(didz, in_focus, k, eps, floor)
    if zs is None:
        raise SolverError("polyfit needs per-plane defocus values (sidecar key 'zs')")
    didz = tie.derivative_polyfit(images, zs, options["degree"])
    in_focus = images[int(np.argmin(np.abs(np.asarray(zs))))]
    return tie.solve_teague(didz, in_focus, k, eps, floor)


def cmd_solve(args, config):
    options = config.solver_options()
    if args.method is not None:
        options["method"] = args.method
    sample = args.sample or 0
    planes, pitch, z, zs = read_image_input(args.input, config, sample)
    phi = solve_planes(planes, pitch, options, config, z, zs)
    out = args.out or "phase"
    tensor_path = out + ".zmdt"
    png_path = out + ".png"
    container.write_tensor(
        tensor_path,
        phi.data.astype(np.float32),
        {"pitch": phi.pitch, "method": options["method"], "unit": "rad"},
    )
    write_phase_png(png_path, phi.data)
    write_manifest(
        out,
        "solve",
        config,
        [tensor_path, container.sidecar_path(tensor_path), png_path, container.sidecar_path(png_path)],
        [args.input],
        {"method": options["method"], "sample": sample},
    )
    log.info("solved {} with {} -> {}", args.input, options["method"], tensor_path)
    return 0


def build_model(config, channels):
    """
    Build the diffusion model described by the diffusion section for
    conditioning inputs with `channels` channels and scalar phase
    targets.
    """
    diff = config.diffusion
    eps_net = Network(
        residual_predictor(2 + channels, 1, diff["width"], diff["blocks"], seed=config.seed)
    )
    mean_net = None
    if diff["mode"] == "zmd":
        mean_net = Network(mean_predictor_spec(channels, 1, diff["width"], seed=config.seed))
    schedule = LearnedSchedule(diff["scheduleDegree"], cond_channels=channels)
    return DiffusionModel(
        eps_net, schedule, mean_net, a=diff["a"], omega=diff["omega"], T=diff["T"], mode=diff["mode"]
    )


def target_range(y):
    """
    Return the (low, high) range mapped onto [-1, 1] for "cvdm" training.
    """
    low = float(y.min())
    high = float(y.max())
    return [low, high if high > low else low + 1.0]


def to_unit_range(y, bounds):
    low, high = bounds
    return 2 * (y - low) / (high - low) - 1


def from_unit_range(y, bounds):
    low, high = bounds
    return (y + 1) / 2 * (high - low) + low


def cmd_train(args, config):
    data_path = args.input or config.paths["dataset"]
    samples = dataset.read_dataset(data_path)
    data = TrainingSet.from_samples(samples)
    channels = data.X.shape[1]
    model = build_model(config, channels)
    extra = {"config": config._to_json(), "trainingHash": config.training_digest(), "channels": channels}
    if model.mode == "cvdm":
        extra["targetRange"] = target_range(data.y)
    out = args.out or config.paths["checkpoint"]
    resume = None
    inputs = [data_path]
    if args.resume:
        resume, extra = read_checkpoint(args.resume)
        if extra.get("trainingHash") != config.training_digest():
            raise ConfigError("checkpoint {} was trained with a different configuration", args.resume)
        inputs.append(args.resume)
    if model.mode == "cvdm":
        # plain diffusion expects targets in [-1, 1]
        bounds = extra.get("targetRange") or target_range(data.y)
        data = TrainingSet(to_unit_range(data.y, bounds), data.X)
    model, trace = train(data, model, config.train_config(), resume, out, extra)
    write_manifest(out, "train", config, [out], inputs, {"input": data_path, "resume": args.resume})
    if trace:
        log.info("trained {} steps, final loss {:.6g}", len(trace), trace[-1])
    return 0


def load_model(path):
    """
    Rebuild the model stored in the checkpoint at `path`. Return it with
    the checkpoint's metadata.
    """
    checkpoint, extra = read_checkpoint(path)
    if "config" not in extra or "channels" not in extra:
        raise DatasetError("{} does not describe its model", path)
    trained = RunConfig(extra["config"])
    model = build_model(trained, extra["channels"])
    model.load_state(checkpoint.params)
    return model, extra


def cmd_sample(args, config):
    checkpoint_path = args.checkpoint or config.paths["checkpoint"]
    model, extra = load_model(checkpoint_path)
    data_path = args.input or config.paths["dataset"]
    samples = dataset.read_dataset(data_path)
    if not samples:
        raise DatasetError("{} has no conditioning inputs", data_path)
    X = np.stack([s.x.data for s in samples])
    batch = config.diffusion["batchSize"]
    outputs = []
    for number, start in enumerate(range(0, len(samples), batch)):
        Xb = X[start : start + batch]
        shape = (Xb.shape[0], 1) + Xb.shape[2:]
        if args.mean:
            outputs.append(sampling.mean_sample(Xb, model))
        elif model.mode == "cvdm":
            drawn = sampling.cvdm_sample(Xb, model, util.rng_stream(config.seed, number), shape)
            if "targetRange" in extra:
                drawn = from_unit_range(drawn, extra["targetRange"])
            outputs.append(drawn)
        else:
            outputs.append(sampling.ancestral_sample(Xb, model, util.rng_stream(config.seed, number)))
        log.verbose("sampled {} of {}", min(start + batch, len(samples)), len(samples))
    out = args.out or "samples.zmdt"
    container.write_tensor(
        out,
        np.concatenate(outputs),
        {"sampleIds": [s.index for s in samples], "mode": "mean" if args.mean else model.mode},
    )
    write_manifest(
        out,
        "sample",
        config,
        [out, container.sidecar_path(out)],
        [checkpoint_path, data_path],
        {"input": data_path, "checkpoint": checkpoint_path, "mean": bool(args.mean)},
    )
    log.info("wrote {} samples to {}", len(samples), out)
    return 0


def cmd_eval(args, config):
    predictions, _ = read_phase_stack(args.prediction)
    truths, ids = read_phase_stack(args.truth)
    if len(predictions) != len(truths):
        raise DatasetError("{} predictions for {} ground truths", len(predictions), len(truths))
    report = metrics.evaluate(list(predictions), list(truths), ids)
    out = args.out or "metrics.csv"
    with open(out, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample_id", "ms_ssim", "mae"])
        for row in report.rows():
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
    write_manifest(out, "eval", config, [out], [args.prediction, args.truth])
    log.info("{}", report)
    return 0


def cmd_verify_theory(args, config):
    report = theory.verify_theory(**config.theory_options())
    out = args.out or "theory.json"
    with open(out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out, "verify-theory", config, [out])
    if not report["passed"]:
        failed = [check["check"] for check in report["checks"] if not check["passed"]]
        log.warn("theory checks failed: {}", ", ".join(failed))
        return 1
    log.info("all {} theory checks passed", len(report["checks"]))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify-theory": cmd_verify_theory,
}


class ArgumentParser(argparse.ArgumentParser):
    """
    Argument parser reporting usage problems with exit code 1.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        die(message, 1)


def make_parser():
    parser = ArgumentParser(prog="chromaphase", description="Chromatic phase imaging toolkit")
    parser.add_argument("--version", action="version", version=chromaphase.__version__)
    commands = parser.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    commands.required = True
    subparsers = {}
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", help="run configuration or manifest (JSON)")
        sub.add_argument("--seed", type=int, help="override the configured seed")
        sub.add_argument("--out", help="output path")
        subparsers[name] = sub
    subparsers["solve"].add_argument("input", help="dataset, image or tensor file")
    subparsers["solve"].add_argument("--method", choices=SOLVER_METHODS)
    subparsers["solve"].add_argument("--sample", type=int, help="dataset sample index (default 0)")
    subparsers["train"].add_argument("--input", help="dataset file")
    subparsers["train"].add_argument("--resume", help="checkpoint to continue from")
    subparsers["sample"].add_argument("--input", help="dataset file with conditioning inputs")
    subparsers["sample"].add_argument("--checkpoint", help="trained model")
    subparsers["sample"].add_argument(
        "--mean", action="store_true", default=None, help="output the mean prediction only"
    )
    subparsers["eval"].add_argument("prediction", help="predicted phase tensor or dataset")
    subparsers["eval"].add_argument("truth", help="ground truth phase tensor or dataset")
    return parser


def replay_arguments(args, recorded):
    """
    Fill the options missing from `args` with the values a manifest
    recorded for its run. Options given on the command line win.
    """
    for name, value in recorded.items():
        if name not in vars(args):
            raise ConfigError("manifest records an unknown {} option: {}", args.command, name)
        if getattr(args, name) is None:
            setattr(args, name, value)
    if getattr(args, "method", None) not in (None,) + SOLVER_METHODS:
        raise ConfigError("manifest records an unknown solver method: {}", args.method)


def main(argv=None):
    """
    Run the command line `argv` (default `sys.argv[1:]`) and return the
    exit code.
    """
    args = make_parser().parse_args(argv)
    try:
        config, recorded = load_run(args.config)
        replay_arguments(args, recorded)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative: {}", args.seed)
            config = config.with_seed(args.seed)
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        return 1
    except USER_ERRORS as e:
        die(e, 1)
    except Exception as e:
        if util.get_env_boolean("verbose"):
            traceback.print_exc()
        die("internal error: {}: {}".format(type(e).__name__, e), 2)
