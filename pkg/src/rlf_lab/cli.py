"""Command-line driver: ``rlf-lab run|sweep|check-lemmas <config>``.

Configs are INI files with one section per module. Unknown sections or keys
are rejected, and radii derived from the sup norms cannot be set.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import re
import sys
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import analysis as A
from . import fields as F
from . import svg
from .errors import RLFLabError
from .params import ExperimentParams
from .stability import sweep_epsilon, verify_main_estimate

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

SCHEMA = {
    "field": {
        "kind": str, "cutoff": float, "width": float, "rate": float, "c": "floats",
        "path": str, "mollify": float,
    },
    "perturbation": {"mode": str, "epsilon": float, "seed": int, "direction": "floats",
                     "bump_width": float},
    "experiment": {
        "p": float, "r": float, "T": float, "tau": float, "dt": float, "lattice_size": int,
        "bin_width": float, "grid_size": int, "integrator": str, "pair_count": int,
        "safety": float, "slack": float,
    },
    "sweep": {"eps_list": "floats"},
    "lemmas": {
        "family": str, "batch_size": int, "p": float, "lambda": float, "rho": float,
        "box": float, "spacing": float, "pair_count": int, "sigma": float,
    },
    "output": {"out_dir": str, "emit_svg": bool, "seed": int},
}
DERIVED = {"r_big", "R", "R_tilde", "R_prime", "lam", "lambda_", "sup_b", "sup_bt"}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    field: dict = dc_field(default_factory=dict)
    perturbation: dict = dc_field(default_factory=dict)
    experiment: dict = dc_field(default_factory=dict)
    sweep: dict = dc_field(default_factory=dict)
    lemmas: dict = dc_field(default_factory=dict)
    output: dict = dc_field(default_factory=dict)
    path: str = ""
    lines: dict = dc_field(default_factory=dict)

    def where(self, section, key=None):
        return f"{self.path}:{self.lines.get((section, key), self.lines.get((section, None), '?'))}"

    @property
    def seed(self):
        return self.output.get("seed", 0)


def _line_numbers(text):
    """Map (section, key) -> 1-based line number."""
    where, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = i
            continue
        key = re.split(r"[=:]", s, 1)[0].strip()
        where[(section, key)] = i
    return where


def _convert(kind, raw):
    if kind == "floats":
        vals = [float(v) for v in re.split(r"[,\s]+", raw.strip()) if v]
        return vals
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    lines = _line_numbers(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None

    cfg = RunConfig(path=path, lines=lines)
    for section in parser.sections():
        line = lines.get((section, None), "?")
        if section not in SCHEMA:
            raise ConfigError(f"{path}:{line}: unknown section [{section}]")
        out = getattr(cfg, section)
        for key, raw in parser.items(section):
            line = lines.get((section, key), "?")
            if key in DERIVED or (section == "experiment" and key in ("R", "R_tilde", "R_prime", "lambda")):
                raise ConfigError(f"{path}:{line}: '{key}' is derived from the sup norms and cannot be set")
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}:{line}: unknown key '{key}' in [{section}]")
            try:
                out[key] = _convert(SCHEMA[section][key], raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{line}: bad value for '{key}': {exc}") from None
            if section == "experiment" and key == "p" and not out[key] > 1:
                raise ConfigError(
                    f"{path}:{line}: unsupported exponent p={out[key]}; the estimate needs p > 1"
                )
    return cfg


def build_field(spec: dict):
    kind = spec.get("kind", "rotation")
    opts = {k: v for k, v in spec.items() if k != "kind"}
    allowed = {
        "constant": {"c"},
        "rotation": {"cutoff"},
        "contraction": {"cutoff", "rate"},
        "expansion": {"cutoff", "rate"},
        "shear": {"cutoff", "width"},
        "sampled-grid": {"path", "mollify"},
    }
    if kind not in allowed:
        raise ConfigError(f"unknown field kind {kind!r}")
    extra = set(opts) - allowed[kind]
    if extra:
        raise ConfigError(f"option(s) {sorted(extra)} not valid for field kind {kind!r}")
    if kind == "constant":
        return F.constant(opts.get("c", (1.0, 0.0)))
    if kind == "rotation":
        return F.rotation(**opts)
    if kind == "contraction":
        return F.contraction(**opts)
    if kind == "expansion":
        return F.expansion(**opts)
    if kind == "shear":
        return F.shear(**opts)
    if "path" not in opts:
        raise ConfigError("sampled-grid field needs 'path'")
    return F.load_sampled_field(opts["path"], opts.get("mollify", 0.0))


def _spec(cfg: RunConfig, seed, force=False):
    p = dict(cfg.perturbation)
    if force or "seed" not in p:
        p["seed"] = seed
    if p.get("mode", "constant-shift") not in F.PERTURBATION_MODES:
        raise ConfigError(f"unknown perturbation mode {p.get('mode')!r}")
    return F.PerturbationSpec(**p)


def _params(cfg: RunConfig, seed):
    kw = dict(cfg.experiment, seed=seed)
    return ExperimentParams(**kw)


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        fh.write(text)


def _resolve(cfg: RunConfig, args):
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = args.out or cfg.output.get("out_dir", ".")
    emit_svg = args.svg or cfg.output.get("emit_svg", False)
    return seed, out_dir, emit_svg


def cmd_run(cfg: RunConfig, args):
    seed, out_dir, emit_svg = _resolve(cfg, args)
    b = build_field(cfg.field)
    report = verify_main_estimate(b, _spec(cfg, seed, args.seed is not None), _params(cfg, seed))
    _write(out_dir, "report.json", report.to_json() + "\n")
    _write(out_dir, "report.csv", report.to_csv())
    if emit_svg:
        t = report.gronwall_terms["t"]
        _write(out_dir, "g_series.svg",
               svg.line_chart(t, report.g_series, "log functional g(t)", "t", "g"))
    status = "exact equality" if report.exact_equality else (
        "holds" if report.main_estimate_holds else "FAILS")
    print(f"delta={report.delta:.6g} lhs_sup={report.lhs_sup:.6g} "
          f"rhs_bound={report.rhs_bound:.6g} estimate {status}")
    return EXIT_OK if report.exact_equality or report.main_estimate_holds else EXIT_FAIL


def cmd_sweep(cfg: RunConfig, args):
    seed, out_dir, emit_svg = _resolve(cfg, args)
    eps_list = cfg.sweep.get("eps_list")
    if not eps_list:
        raise ConfigError(f"{cfg.where('sweep', 'eps_list')}: [sweep] eps_list is missing or empty")
    b = build_field(cfg.field)
    mode = cfg.perturbation.get("mode", "constant-shift")
    params = _params(cfg, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = sweep_epsilon(b, mode, eps_list, params, seed=_spec(cfg, seed, args.seed is not None).seed)
    for note in result.warnings:
        print(f"warning: {note}", file=sys.stderr)
    _write(out_dir, "sweep.csv", result.to_csv())
    _write(out_dir, "sweep.json", json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    if emit_svg and result.rows:
        _write(out_dir, "sweep_ratio.svg", svg.line_chart(
            [r["epsilon"] for r in result.rows], [r["ratio"] for r in result.rows],
            "lhs_sup * |log delta| across the sweep", "epsilon", "ratio", logx=True, logy=True))
    print(f"{len(result.rows)} rows, ratio band {result.ratio_band:.4g}, "
          f"lhs strictly decreasing: {result.lhs_strictly_decreasing}")
    return EXIT_OK if result.all_hold else EXIT_FAIL


def _lemma_batch(opts, seed):
    family = opts.get("family", "trig")
    n = opts.get("batch_size", 50)
    box = opts.get("box", 2.0)
    h = opts.get("spacing", 0.02)
    if n < 1:
        raise ConfigError("[lemmas] batch_size must be >= 1")
    if family == "trig":
        fns = [lambda x, s=s: F.random_trig_scalar(x, seed + s) for s in range(n)]
    elif family == "constant":
        fns = [lambda x: np.ones(len(x))] * n
    elif family == "gaussian":
        sig = opts.get("sigma", 0.05)
        fns = [lambda x: np.exp(-np.sum(x**2, axis=1) / (2 * sig**2))] * n
    else:
        raise ConfigError(f"unknown lemma family {family!r}")
    return [A.GridFunction.from_function(fn, (-box, box), h) for fn in fns]


def _stable(values):
    vals = [v for v in values if v is not None]
    if not all(math.isfinite(v) for v in vals):
        return False
    if not vals or max(vals) == 0:
        return True
    med = float(np.median(vals))
    return med > 0 and max(vals) / med < 10


def cmd_check_lemmas(cfg: RunConfig, args):
    seed, out_dir, _ = _resolve(cfg, args)
    opts = cfg.lemmas
    p = opts.get("p", 2.0)
    lam = opts.get("lambda", 0.5)
    rho = opts.get("rho", 1.0)
    if not p > 1:
        raise ConfigError(f"unsupported exponent p={p}; the estimate needs p > 1")
    batch = _lemma_batch(opts, seed)
    mx = A.check_maximal_lp_bound(batch, lam, p, rho)
    bv_values, worst = [], {}
    for i, u in enumerate(batch):
        rep = A.check_pointwise_bv(u, lam, opts.get("pair_count", 1000), seed + i, radius=rho)
        bv_values.append(rep.empirical_constant)
        if rep.sample_count and (not worst or rep.empirical_constant > worst["ratio"]):
            worst = dict(rep.worst_case, index=i)
    bv = A.LemmaReport(
        "pointwise-bv", max(bv_values), sum(1 for v in bv_values if v > 0), worst,
        skipped=sum(1 for v in bv_values if v == 0), values=bv_values,
    )
    ok = _stable(mx.values) and _stable(bv.values)
    payload = {
        "family": opts.get("family", "trig"), "p": p, "lambda": lam, "rho": rho,
        "reports": [mx.to_dict(), bv.to_dict()], "stable": ok,
    }
    _write(out_dir, "lemma_reports.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"maximal-lp constant {mx.empirical_constant:.6g}, "
          f"pointwise-bv constant {bv.empirical_constant:.6g}, stable: {ok}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "check-lemmas": cmd_check_lemmas}


def build_parser():
    ap = argparse.ArgumentParser(prog="rlf-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config")
    ap.add_argument("--out", metavar="DIR", help="output directory")
    ap.add_argument("--svg", action="store_true", help="also write SVG plots")
    ap.add_argument("--seed", type=int, metavar="N")
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, RLFLabError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
