"""Command-line entry point: ``kernelcurves <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from . import kpca as kp
from .harmonics import DegeneracyOverflow, quadrature
from .kernels import Spectrum, gaussian_spectrum, kernel_from_config, sidecar_path, spectrum_from_kernel
from .regression import ExperimentConfig, KRRFitError, run_experiment, theory_for_config
from .theory import (
    FixedPointError,
    PowerLawSpec,
    StageSpec,
    kernel_teacher_powers,
    learning_curve,
    powerlaw_exponent,
    powerlaw_problem,
    pure_mode_powers,
    rescaled_eigenvalues,
    stage_ratios,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("spectrum", "theory", "experiment", "kpca", "powerlaw", "stages")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)
    out: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {"command": self.command, "params": self.params, "out": self.out, "seed": self.seed}


# ---------------------------------------------------------------------------
# parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_grid(text: str, integer: bool = False) -> list:
    """``a:b:logN``, ``a:b:linN`` (inclusive) or a comma list."""
    text = str(text).strip()
    try:
        if ":" in text:
            a, b, spec = text.split(":")
            a, b = float(a), float(b)
            if spec.startswith("log"):
                if a <= 0 or b <= 0:
                    raise UsageError(f"log grid needs positive endpoints: {text!r}")
                vals = np.geomspace(a, b, int(spec[3:]))
            elif spec.startswith("lin"):
                vals = np.linspace(a, b, int(spec[3:]))
            else:
                raise UsageError(f"grid spacing must be logN or linN: {text!r}")
        else:
            vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse grid {text!r}") from None
    if vals.size == 0:
        raise UsageError(f"empty grid {text!r}")
    if integer:
        return sorted({int(round(v)) for v in vals})
    return [float(v) for v in vals]


def parse_target(text: str) -> dict:
    """``kernel:pprime=300`` or ``pure:k=2,pprime=300``."""
    kind, _, rest = str(text).partition(":")
    if kind not in ("kernel", "pure"):
        raise UsageError(f"target kind must be 'kernel' or 'pure', got {kind!r}")
    out = {"kind": kind}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        try:
            if key == "pprime":
                out["p_prime"] = int(val)
            elif key == "k":
                out["degree"] = int(val)
            else:
                raise UsageError(f"unknown target field {key!r}")
        except ValueError:
            raise UsageError(f"bad target value in {text!r}") from None
    if "p_prime" not in out:
        raise UsageError("target needs pprime=<count>")
    if kind == "pure" and "degree" not in out:
        raise UsageError("pure-mode target needs k=<degree>")
    return out


def _kernel_args(p: argparse.ArgumentParser):
    p.add_argument("--kernel", choices=["ntk", "nngp", "gaussian", "linear"])
    p.add_argument("--depth", type=int)
    p.add_argument("--lengthscale", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kernelcurves", description="Spectral learning curves for kernel regression.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=S)
        p.add_argument("--config", help="JSON file of defaults; explicit flags win")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("spectrum", "kernel eigenvalues per degree")
    _kernel_args(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--quad-order", type=int)
    p.add_argument("--measure", choices=["sphere", "gaussian"])
    p.add_argument("--input-scale", type=float)

    p = add("theory", "predicted mode errors along a p grid")
    p.add_argument("--spectrum")
    p.add_argument("--target")
    p.add_argument("--lambda", dest="ridge", type=float)
    p.add_argument("--p", dest="grid")
    p.add_argument("--no-tail", action="store_true")

    p = add("experiment", "Monte Carlo kernel regression")
    _kernel_args(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--target")
    p.add_argument("--lambda", dest="ridge", type=float)
    p.add_argument("--p", dest="grid")
    p.add_argument("--trials", type=int)
    p.add_argument("--test-points", type=int)
    p.add_argument("--fixed-teacher", action="store_true")
    p.add_argument("--measure", choices=["sphere", "gaussian"])
    p.add_argument("--input-scale", type=float)
    p.add_argument("--quad-order", type=int)
    p.add_argument("--theory-out")

    p = add("kpca", "learning curve on a finite dataset")
    _kernel_args(p)
    p.add_argument("--data")
    p.add_argument("--labels")
    p.add_argument("--format", choices=["csv", "idx"])
    p.add_argument("--subset", type=int)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--allow-duplicates", action="store_true")
    p.add_argument("--lambda", dest="ridge", type=float)
    p.add_argument("--p", dest="grid")
    p.add_argument("--trials", type=int)

    p = add("powerlaw", "theory for power-law spectra")
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--modes", type=int)
    p.add_argument("--lambda", dest="ridge", type=float)
    p.add_argument("--p", dest="grid")

    p = add("stages", "large-dimension stage ratios")
    _kernel_args(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--level", type=int)
    p.add_argument("--alpha", dest="alphas")
    p.add_argument("--lambda", dest="ridge", type=float)
    return parser


DEFAULTS = {
    "common": {"seed": 0, "verbose": False},
    "spectrum": {"kmax": 60, "quad_order": 1000, "measure": "sphere", "input_scale": 1.0},
    "theory": {"ridge": 0.0, "no_tail": False},
    "experiment": {"kmax": 60, "ridge": 0.0, "trials": 50, "test_points": 0, "fixed_teacher": False,
                   "measure": "sphere", "input_scale": 1.0, "quad_order": 1000},
    "kpca": {"format": "csv", "no_normalize": False, "allow_duplicates": False, "ridge": 0.0, "trials": 0},
    "powerlaw": {"modes": 10_000, "ridge": 0.0},
    "stages": {"kmax": 60, "ridge": 0.0},
}

REQUIRED = {
    "spectrum": ["kernel", "dim", "out"],
    "theory": ["spectrum", "target", "grid", "out"],
    "experiment": ["kernel", "dim", "target", "grid", "out"],
    "kpca": ["kernel", "data", "grid", "out"],
    "powerlaw": ["a", "b", "grid", "out"],
    "stages": ["kernel", "dim", "level", "alphas", "out"],
}


def parse_args(argv) -> RunConfig:
    parser = build_parser()
    ns = parser.parse_args(list(argv))
    if ns.command is None:
        raise UsageError("a command is required: " + ", ".join(COMMANDS))
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    merged = dict(DEFAULTS["common"])
    merged.update(DEFAULTS[ns.command])
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            loaded = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        allowed = {a.dest for a in _subparser(parser, ns.command)._actions} - {"help", "config"}
        bad = set(loaded) - allowed
        if bad:
            raise UsageError(f"unknown config keys: {', '.join(sorted(bad))}")
        merged.update(loaded)
    merged.update(explicit)
    missing = [k for k in REQUIRED[ns.command] if merged.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{ns.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    out = merged.pop("out")
    seed = int(merged.pop("seed"))
    _validate(ns.command, merged)
    return RunConfig(ns.command, merged, str(out), seed)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _validate(command: str, prm: dict) -> None:
    if "kernel" in prm and command != "theory":
        kernel = prm["kernel"]
        if kernel in ("ntk", "nngp") and (prm.get("depth") is None or prm["depth"] < 1):
            raise UsageError(f"--kernel {kernel} needs --depth >= 1")
        if kernel == "gaussian" and (prm.get("lengthscale") is None or prm["lengthscale"] <= 0):
            raise UsageError("--kernel gaussian needs a positive --lengthscale")
    if prm.get("dim") is not None and prm["dim"] < 3 and prm.get("measure", "sphere") == "sphere":
        raise UsageError("--dim must be >= 3 on the sphere")
    if prm.get("kmax") is not None and prm["kmax"] < 0:
        raise UsageError("--kmax must be nonnegative")
    if prm.get("ridge") is not None and prm["ridge"] < 0:
        raise UsageError("--lambda must be nonnegative")
    if "target" in prm and isinstance(prm["target"], str):
        prm["target"] = parse_target(prm["target"])
    if "grid" in prm and isinstance(prm["grid"], str):
        prm["grid"] = parse_grid(prm["grid"], integer=command in ("experiment", "kpca"))
    if "alphas" in prm and isinstance(prm["alphas"], str):
        prm["alphas"] = parse_grid(prm["alphas"])
    if command in ("experiment", "kpca") and prm.get("trials", 1) < (1 if command == "experiment" else 0):
        raise UsageError("--trials out of range")
    if "grid" in prm and any(v < 0 for v in prm["grid"]):
        raise UsageError("sample sizes must be nonnegative")


# ---------------------------------------------------------------------------
# execution


def _kernel_cfg(prm: dict) -> dict:
    cfg = {"type": prm["kernel"]}
    if prm["kernel"] in ("ntk", "nngp"):
        cfg["depth"] = int(prm["depth"])
    if prm["kernel"] == "gaussian":
        cfg["lengthscale"] = float(prm["lengthscale"])
    return cfg


def _echo_config(path, run: RunConfig) -> None:
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    meta["run_config"] = run.to_dict()
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _flags(flags) -> str:
    raised = sorted({f for f in flags if f})
    return ", ".join(raised) if raised else "none"


def _run_spectrum(run: RunConfig) -> str:
    prm = run.params
    if prm["measure"] == "gaussian":
        if prm["kernel"] != "gaussian":
            raise UsageError("Gaussian input measure requires --kernel gaussian")
        spec = gaussian_spectrum(prm["dim"], prm["lengthscale"], prm["input_scale"], prm["kmax"])
    else:
        kernel = kernel_from_config(_kernel_cfg(prm))
        rule = quadrature(prm["dim"], max(prm["quad_order"], 4 * prm["kmax"]))
        spec = spectrum_from_kernel(kernel, prm["dim"], prm["kmax"], rule)
    spec.save(run.out)
    _echo_config(run.out, run)
    return f"spectrum: {spec.label} d={spec.d} kmax={spec.kmax} trace={spec.trace:.6g} tail={spec.tail_mass_estimate:.3g} -> {run.out}"


def _run_theory(run: RunConfig) -> str:
    prm = run.params
    spec = Spectrum.load(prm["spectrum"])
    tg = prm["target"]
    if tg["kind"] == "kernel":
        target = kernel_teacher_powers(spec, tg["p_prime"])
    else:
        target = pure_mode_powers(spec, tg["degree"], tg["p_prime"])
    curve = learning_curve(spec, target, prm["grid"], prm["ridge"], include_tail=not prm["no_tail"],
                           meta={"spectrum_file": str(prm["spectrum"])})
    curve.save(run.out)
    _echo_config(run.out, run)
    return f"theory: E_total(p={curve.p[-1]:g})={curve.total[-1]:.6g}; flags: {_flags(curve.flags)} -> {run.out}"


def _run_experiment(run: RunConfig) -> str:
    prm = run.params
    cfg = ExperimentConfig(
        kernel=_kernel_cfg(prm), d=prm["dim"], ridge=prm["ridge"], teacher=prm["target"],
        p_list=prm["grid"], trials=prm["trials"], kmax=prm["kmax"], seed=run.seed,
        redraw_teacher=not prm["fixed_teacher"], test_points=prm["test_points"],
        quad_order=prm["quad_order"], measure=prm["measure"], input_scale=prm["input_scale"],
    )
    res = run_experiment(cfg)
    res.save(run.out)
    _echo_config(run.out, run)
    msg = f"experiment: mean E_total(p={res.p_list[-1]})={res.mean_total[-1]:.6g}"
    if prm.get("theory_out"):
        curve = theory_for_config(cfg)
        curve.save(prm["theory_out"])
        _echo_config(prm["theory_out"], run)
        msg += f", theory {curve.total[-1]:.6g}"
    failed = int(res.failed.sum())
    return msg + f"; failed fits: {failed} -> {run.out}"


def _run_kpca(run: RunConfig) -> str:
    prm = run.params
    data = kp.load_dataset(
        prm["data"], prm["format"], prm.get("labels"), normalize=not prm["no_normalize"],
        subset=prm.get("subset"), seed=run.seed, allow_duplicates=prm["allow_duplicates"],
    )
    kernel = kernel_from_config(_kernel_cfg(prm))
    eig = kp.discrete_spectrum(kernel, data)
    curve = kp.dataset_learning_curve(eig, prm["grid"], prm["ridge"])
    out = Path(run.out)
    edges = kp.decade_edges(curve.n_levels)
    kp.aggregate_modes(curve, edges).save(out)
    _echo_config(out, run)
    for c, cc in enumerate(curve.per_class):
        path = out.with_name(f"{out.stem}.class{c}{out.suffix}")
        kp.aggregate_modes(cc, edges).save(path)
        _echo_config(path, run)
    msg = f"kpca: n={eig.n} rank={eig.rank} E_total(p={curve.p[-1]:g})={curve.total[-1]:.6g}; flags: {_flags(curve.flags)}"
    if prm["trials"] > 0:
        emp = kp.subset_regression_errors(eig, data.targets, prm["grid"], prm["ridge"], prm["trials"], run.seed)
        path = out.with_name(f"{out.stem}.empirical{out.suffix}")
        failed = np.isnan(emp.errors).sum(axis=0)
        lines = ["p,mean_total,std_total,failed_trials"]
        for i, p in enumerate(emp.p_list):
            lines.append(f"{int(p)},{emp.mean[i]:.17g},{emp.std[i]:.17g},{int(failed[i])}")
        path.write_text("\n".join(lines) + "\n")
        _echo_config(path, run)
        msg += f"; empirical {emp.mean[-1]:.6g}"
    return msg + f" -> {out}"


def _run_powerlaw(run: RunConfig) -> str:
    prm = run.params
    spec_pl = PowerLawSpec(prm["a"], prm["b"], prm["ridge"])
    spectrum, target = powerlaw_problem(spec_pl, prm["modes"])
    curve = learning_curve(spectrum, target, prm["grid"], prm["ridge"])
    small, p_star = powerlaw_exponent(spec_pl, "small-p")
    large, _ = powerlaw_exponent(spec_pl, "large-p")
    curve.meta.update({"exponent_small_p": small, "exponent_large_p": large,
                       "crossover": None if np.isinf(p_star) else p_star})
    curve.save(run.out, levels=[])
    _echo_config(run.out, run)
    return f"powerlaw: E_total(p={curve.p[-1]:g})={curve.total[-1]:.6g}; flags: {_flags(curve.flags)} -> {run.out}"


def _run_stages(run: RunConfig) -> str:
    prm = run.params
    kernel = kernel_from_config(_kernel_cfg(prm))
    spec = spectrum_from_kernel(kernel, prm["dim"], prm["kmax"])
    lam_bar = rescaled_eigenvalues(spec)
    level = prm["level"]
    rows = ["alpha," + ",".join(f"ratio_k{k}" for k in range(len(lam_bar))) + ",asymptotic_k" + str(level)]
    for a in prm["alphas"]:
        ratios = stage_ratios(StageSpec(lam_bar, level, a, prm["ridge"]))
        asym = stage_ratios(StageSpec(lam_bar, level, a, prm["ridge"]), asymptotic=True)[level]
        rows.append(",".join([f"{a:.17g}"] + [f"{r:.17g}" for r in ratios] + [f"{asym:.17g}"]))
    Path(run.out).write_text("\n".join(rows) + "\n")
    _echo_config(run.out, run)
    return f"stages: level {level}, {len(prm['alphas'])} alpha values -> {run.out}"


RUNNERS = {
    "spectrum": _run_spectrum,
    "theory": _run_theory,
    "experiment": _run_experiment,
    "kpca": _run_kpca,
    "powerlaw": _run_powerlaw,
    "stages": _run_stages,
}


def execute(run: RunConfig) -> int:
    try:
        print(RUNNERS[run.command](run))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FixedPointError, KRRFitError, LinAlgError, DegeneracyOverflow,
            MemoryError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        run = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if run.params.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return execute(run)


if __name__ == "__main__":
    sys.exit(main())
