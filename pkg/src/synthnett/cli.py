"""Command-line interface: ``synthnett <subcommand> [options]``.

Settings are resolved as built-in defaults, then ``--config FILE``, then
flags given on the command line. Every run that has an output directory
writes the resolved settings there as ``resolved-config``. Failures print
one JSON line ``{"error": ..., "message": ...}`` on stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Callable
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import formats, haar, metrics, phantoms, solver, sparse_approx, training
from .config import (
    ConfigError,
    optional,
    parse_bool,
    parse_floats,
    parse_kv,
    read_config,
    write_resolved,
)
from .tfunet import ArchConfig, encode

logger = logging.getLogger("synthnett")


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable[[str], Any] = str
    default: Any = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")

    def argtype(self) -> Callable[[str], Any]:
        """``convert`` under the value type's name, for argparse error messages."""

        def conv(raw):
            return self.convert(raw)

        conv.__name__ = getattr(self.type, "__name__", "value")
        return conv

    def convert(self, raw: str):
        value = self.type(raw)
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.key}: {value!r} is not one of {', '.join(map(str, self.choices))}")
        return value


@dataclass(frozen=True)
class Command:
    name: str
    help: str
    opts: tuple[Opt, ...]
    run: Callable[[dict], None]


# --------------------------------------------------------------------------
# shared option groups

P_GRID = Opt("p_grid", parse_floats, metrics.DEFAULT_P_GRID, "comma-separated thresholding fractions")
SCOPE = (
    Opt("threshold_coarse", parse_bool, True, "threshold the coarse low-pass stack too"),
    Opt("threshold_bypass", parse_bool, True, "threshold the bypass stacks too"),
)
DATA = (
    Opt("data", optional(str), None, "directory of .f64 images; generated phantoms are used when absent"),
    Opt("count", int, 50, "number of phantoms to generate when --data is absent"),
    Opt("size", int, 64, "phantom size when --data is absent"),
    Opt("data_seed", int, 2, "master seed for generated phantoms"),
)


def _plan(s: dict, p: float = 0.0) -> sparse_approx.ThresholdPlan:
    return sparse_approx.ThresholdPlan(p, True, s["threshold_coarse"], s["threshold_bypass"])


def _images(s: dict) -> np.ndarray:
    if s["data"]:
        return np.stack(formats.load_images(s["data"]))
    return np.stack(phantoms.generate_dataset(s["count"], s["size"], s["data_seed"]))


def _out(s: dict) -> Path:
    p = Path(s["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _save_image(out: Path, stem: str, image: np.ndarray) -> None:
    formats.write_raw(out / f"{stem}.f64", image)
    formats.write_pgm(out / f"{stem}.pgm", image)


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(s):
    out = _out(s)
    images = phantoms.generate_dataset(s["count"], s["size"], s["seed"])
    formats.save_images(out, images, prefix="phantom", pgm=s["pgm"])
    logger.info("wrote %d phantoms to %s", len(images), out)


TRAIN_KEYS = tuple(f.name for f in fields(training.TrainConfig))
ARCH_KEYS = tuple(f.name for f in fields(ArchConfig))


def _train_opts() -> tuple[Opt, ...]:
    tc, ac = training.TrainConfig(), ArchConfig()
    return (
        Opt("out", required=True, help="output directory"),
        Opt("scale", str, "full", "preset for defaults not set elsewhere", choices=("full", "desk")),
        Opt("epochs", int, tc.epochs, "training epochs"),
        Opt("batch_size", int, tc.batch_size, "images per Adam step"),
        Opt("lr", float, tc.lr, "Adam learning rate"),
        Opt("beta1", float, tc.beta1, "Adam first-moment decay"),
        Opt("beta2", float, tc.beta2, "Adam second-moment decay"),
        Opt("adam_eps", float, tc.adam_eps, "Adam epsilon"),
        Opt("mu", optional(float), None, "l1 weight; 'auto' gives 10**mu_exponent * n_train"),
        Opt("mu_exponent", float, tc.mu_exponent, "exponent used when mu is auto"),
        Opt("level_weights", optional(parse_floats), None, "per-level l1 weights; 'auto' gives 2**-l"),
        Opt("image_size", int, tc.image_size, "phantom side length"),
        Opt("n_train", int, tc.n_train, "training images"),
        Opt("n_val", int, tc.n_val, "validation images"),
        Opt("train_dir", optional(str), None, "directory of .f64 training images instead of phantoms"),
        Opt("val_dir", optional(str), None, "directory of .f64 validation images instead of phantoms"),
        Opt("train_seed", int, 1, "master seed of the generated training phantoms"),
        Opt("val_seed", int, 2, "master seed of the generated validation phantoms"),
        Opt("checkpoint_every", int, tc.checkpoint_every, "checkpoint period in epochs (0 = off)"),
        Opt("seed", int, tc.seed, "seed for initialisation and batch order"),
        Opt("output_init", str, tc.output_init, "output batch-norm start", choices=("data", "none")),
        Opt("resume", optional(str), None, "checkpoint directory to resume from"),
        Opt("levels", int, ac.levels, "decomposition levels"),
        Opt("base_channels", int, ac.base_channels, "encoder channels at level 0"),
        Opt("channel_growth", int, ac.channel_growth, "channel multiplier per level"),
        Opt("kernel_size", int, ac.kernel_size, "convolution kernel size"),
        Opt("bypass", parse_bool, ac.bypass, "use bypass connections"),
    )


def _scale_defaults(s: dict, given: set[str]) -> None:
    if s["scale"] != "desk":
        return
    tc, _ = training.desk_scale()
    for k in ("epochs", "image_size", "n_train", "n_val"):
        if k not in given:
            s[k] = getattr(tc, k)


def cmd_train(s):
    out = _out(s)
    tc = training.TrainConfig(**{k: s[k] for k in TRAIN_KEYS})
    arch = ArchConfig(**{k: s[k] for k in ARCH_KEYS if k in s})
    if s["train_dir"]:
        xs = np.stack(formats.load_images(s["train_dir"]))
    else:
        xs = np.stack(phantoms.generate_dataset(tc.n_train, tc.image_size, s["train_seed"]))
    if s["val_dir"]:
        xv = np.stack(formats.load_images(s["val_dir"]))
    else:
        xv = np.stack(phantoms.generate_dataset(tc.n_val, tc.image_size, s["val_seed"]))
    r = training.train(tc, arch, xs, xv, out_dir=out, resume_from=s["resume"])
    logger.info("trained %d epochs in %.1f s; final val_mse %.4g", tc.epochs, r.seconds, r.history[-1].val_mse)


def cmd_encode(s):
    out = _out(s)
    params = formats.load_params(s["weights"])
    xi = encode(params, formats.read_image(s["in"]))
    formats.save_coefficients(out / "coefficients", xi, {"source": str(s["in"])})


def cmd_threshold(s):
    out = _out(s)
    params = formats.load_params(s["weights"])
    x = formats.read_image(s["in"])
    r = sparse_approx.sparse_reconstruct(params, x, _plan(s, s["p"]))
    _save_image(out, "full", r.full)
    _save_image(out, f"p{s['p']:.2f}", r.thresholded)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("p", "id", "ssim", "psnr"))
        for p, rep in ((0.0, r.report_full), (s["p"], r.report_thresholded)):
            w.writerow((f"{p:.2f}", repr(rep.id), repr(rep.ssim), repr(rep.psnr)))


def cmd_evaluate(s):
    out = _out(s)
    params = formats.load_params(s["weights"])
    res = sparse_approx.ratio_experiment(params, _images(s), s["p_grid"], _plan(s))
    sparse_approx.write_ratio_csv(out / "ratios.csv", res.rows)
    if s["detail"]:
        sparse_approx.write_detail_csv(out / "detail.csv", res)


def cmd_experiment(s):
    out = _out(s)
    images = _images(s)
    for tag in ("a", "b"):
        params = formats.load_params(s[f"weights_{tag}"])
        res = sparse_approx.ratio_experiment(params, images, s["p_grid"], _plan(s))
        sparse_approx.write_ratio_csv(out / f"ratios_{tag}.csv", res.rows)
        if s["dump"]:
            d = out / f"images_{tag}"
            d.mkdir(exist_ok=True)
            for p in s["p_grid"]:
                formats.write_pgm(d / f"p{p:.2f}.pgm", sparse_approx.sparse_reconstruct(params, images[0], _plan(s, p)).thresholded)
        if params.config.bypass:
            full, zeroed = sparse_approx.bypass_zeroing(params, images)
            with open(out / f"bypass_zeroing_{tag}.csv", "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(("image", "ssim_full", "ssim_zeroed"))
                for i, (a, b) in enumerate(zip(full, zeroed)):
                    w.writerow((i, repr(a.ssim), repr(b.ssim)))


def make_operator(name: str, args: dict[str, str], shape: tuple[int, int]) -> solver.ForwardOperator:
    def take(key, conv, default):
        return conv(args.pop(key)) if key in args else default

    args = dict(args)
    if name == "identity":
        op = solver.Identity(shape)
    elif name == "mask":
        if "mask" in args:
            op = solver.Mask(formats.read_image(args.pop("mask")) > 0.5)
        else:
            op = solver.Mask.random(shape, take("fraction", float, 0.5), take("seed", int, 0))
    elif name == "blur":
        kind = take("kernel", str, "gaussian")
        if kind == "gaussian":
            op = solver.Blur.gaussian(shape, take("size", int, 5), take("sigma", float, 1.0))
        elif kind == "box":
            op = solver.Blur.box(shape, take("size", int, 3))
        else:
            raise ConfigError(f"operator_args: unknown blur kernel {kind!r}")
    else:
        raise ConfigError(f"unknown operator {name!r}")
    if args:
        raise ConfigError(f"operator_args: unknown key {sorted(args)[0]!r} for {name}")
    if op.shape != tuple(shape):
        raise ConfigError(f"operator shape {op.shape} differs from data shape {tuple(shape)}")
    return op


def cmd_solve(s):
    out = _out(s)
    params = formats.load_params(s["weights"])
    image = formats.read_image(s["data"])
    A = make_operator(s["operator"], s["operator_args"], image.shape)
    # mask data is stored as an image whose known pixels carry the values
    y = A.apply(image) if s["simulate"] or isinstance(A, solver.Mask) else image
    if s["simulate"] and s["noise"] > 0:
        n = np.random.default_rng(s["seed"]).standard_normal(y.shape)
        y = y + s["noise"] * n / np.linalg.norm(n)
    cfg = solver.SolverConfig(
        mu=s["mu"],
        max_iter=s["max_iter"],
        step0=s["step0"],
        backtrack=s["backtrack"],
        tol=s["tol"],
        patience=s["patience"],
        accelerate=s["accelerate"],
        init=s["init"],
    )
    try:
        r = solver.solve(y, A, params, cfg)
    except solver.SolverDiverged as e:
        solver.write_history(out / "history.csv", e.state.history)
        np.save(out / "diverged_xi.npy", e.state.xi)
        raise
    _save_image(out, "x", r.x)
    _save_image(out, "adjoint", A.adjoint(y))
    formats.save_coefficients(out / "coefficients", r.xi, {"operator": A.name})
    solver.write_history(out / "history.csv", r.state.history)
    last = r.state.history[-1]
    summary = {
        "iterations": last.iter,
        "converged": r.state.converged,
        "restarts": r.state.restarts,
        "data_term": last.data_term,
        "penalty": last.penalty,
        "total": last.total,
    }
    if s["truth"] or s["simulate"]:
        truth = formats.read_image(s["truth"]) if s["truth"] else image
        summary["psnr"] = metrics.psnr(np.clip(truth, 0, 1), np.clip(r.x, 0, 1))
        summary["psnr_adjoint"] = metrics.psnr(np.clip(truth, 0, 1), np.clip(A.adjoint(y), 0, 1))
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    if s["probe_deltas"]:
        rows = solver.noise_stability_probe(y, A, params, cfg, s["probe_deltas"], s["probe_draws"], s["seed"])
        with open(out / "probe.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("delta", "mean_drift", "std_drift", "draws"))
            for row in rows:
                w.writerow((repr(row.delta), repr(row.mean_drift), repr(row.std_drift), row.draws))
    print(json.dumps(summary))


def cmd_frame_check(s):
    rep = haar.frame_check(s["trials"], (s["size"], s["size"]), s["seed"])
    line = rep.to_json()
    if s["out"]:
        (_out(s) / "frame_check.jsonl").write_text(line + "\n")
    print(line)


COMMANDS = {
    c.name: c
    for c in (
        Command(
            "generate",
            "write random phantoms as .f64 (and .pgm) images",
            (
                Opt("count", int, required=True, help="number of phantoms"),
                Opt("size", int, 256, "side length in pixels"),
                Opt("seed", int, 0, "master seed"),
                Opt("out", required=True, help="output directory"),
                Opt("pgm", parse_bool, True, "also write 8-bit PGM previews"),
            ),
            cmd_generate,
        ),
        Command("train", "train a tight frame U-net", _train_opts(), cmd_train),
        Command(
            "encode",
            "write the coefficient pyramid of one image",
            (
                Opt("weights", required=True, help="weights directory"),
                Opt("in", required=True, help="input image (.f64 or .pgm)"),
                Opt("out", required=True, help="output directory"),
            ),
            cmd_encode,
        ),
        Command(
            "threshold",
            "reconstruct one image from its thresholded coefficients",
            (
                Opt("weights", required=True, help="weights directory"),
                Opt("p", float, required=True, help="fraction of coefficients zeroed per channel"),
                Opt("in", required=True, help="input image (.f64 or .pgm)"),
                Opt("out", required=True, help="output directory"),
            )
            + SCOPE,
            cmd_threshold,
        ),
        Command(
            "evaluate",
            "metric ratio curve of one network",
            (Opt("weights", required=True, help="weights directory"), Opt("out", required=True, help="output directory"), P_GRID)
            + DATA
            + SCOPE
            + (Opt("detail", parse_bool, False, "also write per-image detail.csv"),),
            cmd_evaluate,
        ),
        Command(
            "experiment",
            "ratio curves of two networks on the same images",
            (
                Opt("weights_a", required=True, help="first weights directory"),
                Opt("weights_b", required=True, help="second weights directory"),
                Opt("out", required=True, help="output directory"),
                P_GRID,
                Opt("dump", parse_bool, True, "write PGM reconstructions of the first image per p"),
            )
            + DATA
            + SCOPE,
            cmd_experiment,
        ),
        Command(
            "solve",
            "sparse synthesis reconstruction from linear data",
            (
                Opt("weights", required=True, help="weights directory"),
                Opt("operator", str, "mask", "forward operator", choices=("identity", "mask", "blur")),
                Opt("operator_args", parse_kv, {}, "e.g. fraction=0.5,seed=0 | mask=FILE | kernel=gaussian,size=5,sigma=1"),
                Opt("data", required=True, help="data image; for mask only known pixels are read"),
                Opt("out", required=True, help="output directory"),
                Opt("mu", float, 1e-3, "penalty weight"),
                Opt("max_iter", int, 500, "iteration cap"),
                Opt("step0", float, 1.0, "initial step size"),
                Opt("backtrack", float, 0.5, "step shrink factor"),
                Opt("tol", float, 1e-6, "relative objective change for stopping"),
                Opt("patience", int, 5, "consecutive calm iterations for stopping"),
                Opt("accelerate", parse_bool, False, "momentum with restart"),
                Opt("init", str, "encode", "starting coefficients", choices=("encode", "zero")),
                Opt("simulate", parse_bool, False, "treat --data as the true image and apply the operator"),
                Opt("noise", float, 0.0, "norm of Gaussian noise added to simulated data"),
                Opt("truth", optional(str), None, "true image for PSNR reporting"),
                Opt("probe_deltas", optional(parse_floats), None, "noise norms for the stability probe"),
                Opt("probe_draws", int, 5, "noise draws per probe level"),
                Opt("seed", int, 0, "seed for simulated noise and the probe"),
            ),
            cmd_solve,
        ),
        Command(
            "frame-check",
            "verify the Haar tight frame identity on random images",
            (
                Opt("trials", int, 10, "random images"),
                Opt("size", int, 64, "image side length"),
                Opt("seed", int, 0, "seed"),
                Opt("out", optional(str), None, "optional output directory"),
            ),
            cmd_frame_check,
        ),
    )
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthnett", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    parser.commands = {}
    for cmd in COMMANDS.values():
        p = sub.add_parser(cmd.name, help=cmd.help, description=cmd.help, argument_default=argparse.SUPPRESS)
        parser.commands[cmd.name] = p
        p.add_argument("--config", metavar="FILE", help="key = value settings file")
        for o in cmd.opts:
            default = "required" if o.required else o.default
            if isinstance(default, (tuple, list)):
                default = ",".join(map(str, default))
            text = f"{o.help} (default: {default})" if o.help else f"(default: {default})"
            p.add_argument(o.flag, dest=o.key, type=o.argtype(), metavar=o.key.upper(), help=text)
    return parser


def resolve(cmd: Command, ns: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge defaults, the config file and command-line flags."""
    opts = {o.key: o for o in cmd.opts}
    settings = {k: o.default for k, o in opts.items()}
    given = {k for k in opts if hasattr(ns, k)}
    config_path = getattr(ns, "config", None)
    if config_path:
        for key, raw in read_config(config_path).items():
            if key not in opts:
                raise ConfigError(f"unknown config key {key!r} for {cmd.name}")
            try:
                settings[key] = opts[key].convert(raw)
            except ValueError as e:
                raise ConfigError(f"config key {key!r}: {e}") from None
            given.add(key)
    for key in opts:
        if hasattr(ns, key):
            settings[key] = getattr(ns, key)
    if cmd.name == "train":
        _scale_defaults(settings, given)
    missing = [o.flag for o in cmd.opts if o.required and settings[o.key] is None]
    if missing:
        parser.error(f"the following arguments are required: {', '.join(missing)}")
    return settings


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        cmd = COMMANDS[ns.command]
        try:
            settings = resolve(cmd, ns, parser.commands[cmd.name])
            if settings.get("out"):
                write_resolved(settings["out"], cmd.name, settings)
            cmd.run(settings)
        except SystemExit:
            raise
        except Exception as e:
            print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
            return 1
    except SystemExit as e:
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
