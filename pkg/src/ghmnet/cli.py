"""Command-line experiment harness.

    ghmnet <task> --config run.toml [--out DIR] [--seed N]

The config is TOML with a ``[model]`` section and exactly one task section
named after the subcommand.  See ``docs/config.md`` for the grammar and
``docs/csv_schemas.md`` for the columns each task writes.

Every run writes ``results.csv``, ``config.resolved`` (the effective config,
defaults filled in) and ``manifest.json`` into the output directory.  Files
are staged in a temporary directory and moved into place only when the task
succeeds, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import platform
import shutil
import sys
import tempfile
import time
import zlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy
import tomli_w

from . import __version__, bp, mp, oracle
from .diffusion import DiffusionConfig, eval_recovery, sample_sde
from .errors import ConfigurationError, DivergenceError, EnumerationLimitError, GhmError, NumericError
from .ghm import corrupt, generate_params, load_tables, sample
from .nets import (
    CONVNET, UNET, construct_classifier, construct_denoiser, convnet_forward, load_weights,
    random_init, save_weights, unet_forward,
)
from .topology import build
from .train import TrainConfig, d2_classify, d2_denoise, fit

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_ENUMERATION = 0, 2, 3, 4, 5

MODEL_DEFAULTS = {"L": 2, "m": [2, 2], "S": 2, "K": 4.0, "psi": "random", "table_file": ""}

TASK_DEFAULTS = {
    "sample": {"n": 1000},
    "oracle-check": {"instances": 50, "points": 20, "sigma2": 1.0},
    "bp": {"mode": "classify", "n": 100, "sigma2": 1.0},
    "mp-check": {"instances": 50, "points": 20, "sigma2": 1.0},
    "approx-sweep": {"network": CONVNET, "deltas": [1.0, 0.5, 0.25], "n_eval": 1000},
    "train": {
        "objective": "denoise", "n": [100, 1000, 10000], "D": 32, "B": 0.0, "step_size": 3.0,
        "iterations": 200, "init_scale": 0.3, "eval_n": 4000, "save_weights": False,
    },
    "diffuse": {"T": [20.0], "N": [800], "n_samples": 10000, "denoiser": "exact", "weights_file": ""},
}
TASKS = tuple(TASK_DEFAULTS)


def split_seed(seed: int, tag: str) -> int:
    """Independent 63-bit seed for one named component of a run.

    Keyed on ``(seed, crc32(tag))`` through `numpy.random.SeedSequence`, so
    adding a component never changes the stream of another.
    """
    ss = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# -- config -------------------------------------------------------------------


def _check_type(section, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        kind = float if default and isinstance(default[0], float) else int
        ok = isinstance(value, list) and bool(value) and all(
            isinstance(v, (int, float) if kind is float else int) and not isinstance(v, bool) for v in value
        )
    else:  # pragma: no cover
        ok = True
    if not ok:
        raise ConfigurationError(f"[{section}] {key} has the wrong type: {value!r}")
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list) and default and isinstance(default[0], float):
        return [float(v) for v in value]
    return value


def _merge(section, given, defaults):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    out = dict(defaults)
    for k, v in given.items():
        out[k] = _check_type(section, k, v, defaults[k])
    return out


def resolve_config(raw: dict, task: str, seed=None, out=None, base_dir=Path(".")) -> dict:
    """Validate a parsed config and fill in defaults."""
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    allowed = {"seed", "out", "model"} | set(TASKS)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    blocks = [t for t in TASKS if t in raw]
    if len(blocks) != 1:
        raise ConfigurationError(f"expected exactly one task section, found {blocks or 'none'}")
    if blocks[0] != task:
        raise ConfigurationError(f"config has a [{blocks[0]}] section but the subcommand is {task}")
    cfg_seed = raw.get("seed", 0)
    if seed is not None:
        cfg_seed = seed
    if not isinstance(cfg_seed, int) or isinstance(cfg_seed, bool) or cfg_seed < 0:
        raise ConfigurationError(f"seed must be a nonnegative integer, got {cfg_seed!r}")
    cfg_out = out if out is not None else raw.get("out", "out")
    if not isinstance(cfg_out, str):
        raise ConfigurationError("out must be a path string")

    model = _merge("model", raw.get("model", {}), MODEL_DEFAULTS)
    if model["psi"] not in ("random", "uniform", "file"):
        raise ConfigurationError(f"[model] psi must be random, uniform or file, got {model['psi']!r}")
    if model["psi"] == "file":
        path = (base_dir / model["table_file"]).resolve()
        if not model["table_file"] or not path.is_file():
            raise ConfigurationError(f"[model] table_file {model['table_file']!r} does not exist")
        model["table_file"] = str(path)
    if model["L"] < 1 or len(model["m"]) != model["L"] or min(model["m"]) < 1:
        raise ConfigurationError("[model] needs L >= 1 and a positive branching list m of length L")
    if model["S"] < 2 or not model["K"] >= 1:
        raise ConfigurationError("[model] needs S >= 2 and K >= 1")

    body = _merge(task, raw[task], TASK_DEFAULTS[task])
    _validate_task(task, body, base_dir)
    return {"seed": cfg_seed, "out": cfg_out, "model": model, task: body}


def _positive(task, body, *keys):
    for k in keys:
        vals = body[k] if isinstance(body[k], list) else [body[k]]
        if not all(v > 0 for v in vals):
            raise ConfigurationError(f"[{task}] {k} must be positive")


def _validate_task(task, body, base_dir):
    if task == "sample":
        _positive(task, body, "n")
    elif task in ("oracle-check", "mp-check"):
        _positive(task, body, "instances", "points", "sigma2")
    elif task == "bp":
        _positive(task, body, "n", "sigma2")
        if body["mode"] not in ("classify", "denoise"):
            raise ConfigurationError("[bp] mode must be classify or denoise")
    elif task == "approx-sweep":
        _positive(task, body, "deltas", "n_eval")
        if body["network"] not in (CONVNET, UNET):
            raise ConfigurationError(f"[approx-sweep] network must be {CONVNET} or {UNET}")
    elif task == "train":
        _positive(task, body, "n", "D", "step_size", "init_scale", "eval_n")
        if body["iterations"] < 0 or body["B"] < 0:
            raise ConfigurationError("[train] iterations and B must be nonnegative")
        if body["objective"] not in ("classify", "denoise"):
            raise ConfigurationError("[train] objective must be classify or denoise")
    elif task == "diffuse":
        _positive(task, body, "T", "N", "n_samples")
        if body["denoiser"] not in ("exact", "unet"):
            raise ConfigurationError("[diffuse] denoiser must be exact or unet")
        if body["denoiser"] == "unet":
            path = (base_dir / body["weights_file"]).resolve()
            if not body["weights_file"] or not path.is_file():
                raise ConfigurationError(f"[diffuse] weights_file {body['weights_file']!r} does not exist")
            body["weights_file"] = str(path)


# -- tasks ----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _model_params(model, seed, tag="psi"):
    topo = build(model["L"], model["m"])
    if model["psi"] == "file":
        return load_tables(model["table_file"], topology=topo, K=model["K"])
    return generate_params(topo, model["S"], model["K"], mode=model["psi"], seed=split_seed(seed, tag))


def _task_sample(cfg, workdir):
    params = _model_params(cfg["model"], cfg["seed"])
    smp = sample(params, split_seed(cfg["seed"], "sample"), size=cfg["sample"]["n"])
    d = params.topology.d
    header = ["index", "y"] + [f"x_{i + 1}" for i in range(d)]
    rows = ([i, int(smp.y[i]), *map(int, smp.x[i])] for i in range(smp.x.shape[0]))
    write_csv(workdir / "results.csv", header, rows)


def _instances(cfg, count):
    for i in range(count):
        yield i, _model_params(cfg["model"], cfg["seed"], tag=f"instance/{i}")


def _task_oracle_check(cfg, workdir):
    body = cfg["oracle-check"]
    rows = []
    for i, params in _instances(cfg, body["instances"]):
        rng = np.random.default_rng(split_seed(cfg["seed"], f"points/{i}"))
        x = sample(params, rng, size=body["points"]).x
        z = corrupt(x, np.sqrt(body["sigma2"]), rng)
        dev_c = max(np.abs(bp.bp_classify(params, xi) - oracle.posterior_label(params, xi)).max() for xi in x)
        dev_d = 0.0
        for zi in z:
            post, mean = bp.bp_denoise(params, zi, body["sigma2"])
            ref = oracle.posterior_denoise(params, zi, body["sigma2"])
            dev_d = max(dev_d, np.abs(post - ref.marginals).max(), np.abs(mean - ref.mean).max())
        rows.append([i, float(dev_c), float(dev_d)])
    write_csv(workdir / "results.csv", ["instance", "max_dev_classify", "max_dev_denoise"], rows)


def _task_bp(cfg, workdir):
    body = cfg["bp"]
    params = _model_params(cfg["model"], cfg["seed"])
    rng = np.random.default_rng(split_seed(cfg["seed"], "sample"))
    smp = sample(params, rng, size=body["n"])
    S, d = params.S, params.topology.d
    if body["mode"] == "classify":
        post = bp.bp_classify(params, smp.x)
        header = ["index", "y"] + [f"x_{i + 1}" for i in range(d)] + [f"p_{s}" for s in range(1, S + 1)]
        rows = ([i, int(smp.y[i]), *map(int, smp.x[i]), *post[i]] for i in range(body["n"]))
    else:
        z = corrupt(smp.x, np.sqrt(body["sigma2"]), rng)
        post, mean = bp.bp_denoise(params, z, body["sigma2"])
        header = ["index", "leaf", "x", "z", "mean"] + [f"p_{s}" for s in range(1, S + 1)]
        rows = (
            [i, v + 1, int(smp.x[i, v]), z[i, v], mean[i, v], *post[i, v]]
            for i in range(body["n"]) for v in range(d)
        )
    write_csv(workdir / "results.csv", header, rows)


def _task_mp_check(cfg, workdir):
    body = cfg["mp-check"]
    rows = []
    for i, params in _instances(cfg, body["instances"]):
        rng = np.random.default_rng(split_seed(cfg["seed"], f"points/{i}"))
        x = sample(params, rng, size=body["points"]).x
        z = corrupt(x, np.sqrt(body["sigma2"]), rng)
        dev_c = np.abs(mp.mp_classify(params, x) - bp.bp_classify(params, x)).max()
        post_bp, mean_bp = bp.bp_denoise(params, z, body["sigma2"])
        post_mp, mean_mp = mp.mp_denoise(params, z, body["sigma2"])
        dev_d = max(np.abs(post_mp - post_bp).max(), np.abs(mean_mp - mean_bp).max())
        raw_c = mp.mp_classify(params, x, normalize_messages=False)
        raw_d = mp.mp_denoise(params, z, body["sigma2"], normalize_messages=False)[0]
        dev_u = max(np.abs(raw_c - bp.bp_classify(params, x)).max(), np.abs(raw_d - post_bp).max())
        rows.append([i, float(dev_c), float(dev_d), float(dev_u)])
    write_csv(
        workdir / "results.csv",
        ["instance", "max_dev_classify", "max_dev_denoise", "max_dev_unnormalized"],
        rows,
    )


def _task_approx_sweep(cfg, workdir):
    body = cfg["approx-sweep"]
    params = _model_params(cfg["model"], cfg["seed"])
    S, d = params.S, params.topology.d
    rows = []
    if body["network"] == CONVNET:
        if S**d <= 10**5:
            x = np.array(list(itertools.product(range(1, S + 1), repeat=d)), dtype=float)
        else:
            x = sample(params, split_seed(cfg["seed"], "eval"), size=body["n_eval"]).x.astype(float)
        ref = np.log(bp.bp_classify(params, x))
        for delta in body["deltas"]:
            net = construct_classifier(params, delta)
            err = np.abs(np.log(convnet_forward(net, x)) - ref).max()
            rows.append([delta, net.D, net.meta["per_fn_delta"], max(net.max_block_widths()), float(err)])
    else:
        rng = np.random.default_rng(split_seed(cfg["seed"], "eval"))
        z = corrupt(sample(params, rng, size=body["n_eval"]).x, 1.0, rng)
        ref = bp.bp_denoise(params, z)[1]
        for delta in body["deltas"]:
            net = construct_denoiser(params, delta)
            err = np.abs(unet_forward(net, z) - ref).max()
            rows.append([delta, net.D, net.meta["per_fn_delta"], max(net.max_block_widths()), float(err)])
    write_csv(workdir / "results.csv", ["delta", "D", "per_fn_delta", "max_block_width", "measured"], rows)


def _task_train(cfg, workdir):
    body = cfg["train"]
    params = _model_params(cfg["model"], cfg["seed"])
    kind = CONVNET if body["objective"] == "classify" else UNET
    d2_fn = d2_classify if kind == CONVNET else d2_denoise
    eval_seed = split_seed(cfg["seed"], "eval")
    init = random_init(params.topology, params.S, body["D"], body["init_scale"],
                       seed=split_seed(cfg["seed"], "init"), kind=kind)
    d2_0 = d2_fn(init, params, body["eval_n"], seed=eval_seed)
    rows = []
    for n in body["n"]:
        tc = TrainConfig(
            body["objective"], n, body["step_size"], body["iterations"], B=body["B"] or None,
            eval_n=body["eval_n"], seed=split_seed(cfg["seed"], f"batch/{n}"),
        )
        w, log = fit(params, tc, init)
        log.write_csv(workdir / f"train_log_n{n}.csv", wall_clock=True)
        if body["save_weights"]:
            save_weights(w, workdir / f"weights_n{n}.json")
        d2 = d2_fn(w, params, body["eval_n"], seed=eval_seed)
        rows.append([n, body["D"], body["iterations"], log.initial_risk, log.final_risk, log.best_iteration,
                     d2_0.value, d2_0.stderr, d2.value, d2.stderr])
    write_csv(
        workdir / "results.csv",
        ["n", "D", "iterations", "initial_risk", "final_risk", "best_iteration",
         "d2_init", "d2_init_stderr", "d2_final", "d2_final_stderr"],
        rows,
    )


def _task_diffuse(cfg, workdir):
    body = cfg["diffuse"]
    params = _model_params(cfg["model"], cfg["seed"])
    model = params if body["denoiser"] == "exact" else load_weights(body["weights_file"])
    rows = []
    for T, N in itertools.product(body["T"], body["N"]):
        dc = DiffusionConfig(T=T, N=N, n_samples=body["n_samples"], seed=split_seed(cfg["seed"], f"sde/{T}/{N}"))
        res = sample_sde(model, dc, params=params)
        rec = eval_recovery(params, res.samples)
        rows.append([T, N, body["n_samples"], rec.tv, rec.noise_scale])
    write_csv(workdir / "results.csv", ["T", "N", "n_samples", "tv", "noise_scale"], rows)


RUNNERS = {
    "sample": _task_sample,
    "oracle-check": _task_oracle_check,
    "bp": _task_bp,
    "mp-check": _task_mp_check,
    "approx-sweep": _task_approx_sweep,
    "train": _task_train,
    "diffuse": _task_diffuse,
}


# -- entry point ----------------------------------------------------------------


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(task: str, config_path, out=None, seed=None) -> Path:
    """Run one task; return the output directory.  Raises on any failure."""
    config_path = Path(config_path)
    try:
        raw = tomllib.loads(config_path.read_text())
    except (OSError, UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ParseError(f"cannot parse {config_path}: {exc}") from exc
    cfg = resolve_config(raw, task, seed=seed, out=out, base_dir=config_path.parent)
    out_dir = Path(cfg["out"])
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".ghmnet-", dir=out_dir.parent))
    try:
        started = datetime.now(timezone.utc).isoformat()
        t0 = time.perf_counter()
        RUNNERS[task](cfg, stage)
        (stage / "config.resolved").write_text(tomli_w.dumps(cfg))
        manifest = {
            "task": task,
            "seed": cfg["seed"],
            "started_utc": started,
            "wall_clock_seconds": time.perf_counter() - t0,
            "versions": {
                "ghmnet": __version__, "python": platform.python_version(),
                "numpy": np.__version__, "scipy": scipy.__version__,
            },
            "files": {p.name: _sha256(p) for p in sorted(stage.iterdir())},
        }
        (stage / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        out_dir.mkdir(exist_ok=True)
        for p in sorted(stage.iterdir()):
            shutil.move(str(p), str(out_dir / p.name))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return out_dir


class ParseError(GhmError):
    """The config file could not be read or is not valid TOML."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ghmnet", description="GHM inference, constructed networks and training experiments.")
    sub = parser.add_subparsers(dest="task", required=True, parser_class=_Parser)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} task")
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output directory (overrides the config's out)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config's seed)")
    return parser


def exit_code(exc: BaseException) -> int:
    """Map a failure to the documented exit status."""
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, EnumerationLimitError):
        return EXIT_ENUMERATION
    if isinstance(exc, (NumericError, DivergenceError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        out = run(args.task, args.config, out=args.out, seed=args.seed)
    except (GhmError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ghmnet {args.task}: {msg}", file=sys.stderr)
        return exit_code(exc)
    print(f"wrote {out}")
    return EXIT_OK
