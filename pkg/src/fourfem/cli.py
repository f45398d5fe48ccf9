"""Command line front end: ``run``, ``compare`` and ``mesh-info``.

Study configurations are INI files with a ``[study]`` section holding the
:class:`~fourfem.harness.StudyConfig` fields and an optional ``[params]``
section holding the penalty parameters::

    [study]
    name = ns_morley
    kind = navier_stokes
    scheme = morley
    R = JIM
    S = JIM
    domain = square
    levels = 2-5
    solution = sin2
    norms = energy_pw, H1_broken, L2
    output = results

    [params]
    sigma1 = 20
    sigma2 = 20
    sigma_ip = 20
    theta = 1
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from .forms import SchemeParams
from .harness import StudyConfig, compare_schemes, run_study, write_outputs
from .mesh import load_mesh, mesh_summary


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


def _levels(text):
    text = text.strip()
    if "-" in text:
        lo, hi = (int(t) for t in text.split("-", 1))
        return tuple(range(lo, hi + 1))
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _names(text):
    return tuple(t for t in text.replace(",", " ").split())


_STUDY_KEYS = {
    "name": str, "kind": str, "scheme": str, "r": str, "s": str, "domain": str,
    "levels": _levels, "solution": str, "point_load": _floats, "norms": _names,
    "output": str, "reference_levels": int, "tol": float, "max_iter": int, "init": str,
    "schemes": _names,
}
_PARAM_KEYS = ("sigma1", "sigma2", "sigma_ip", "theta")


def parse_config(path):
    """Read an INI study file; returns ``(StudyConfig, extras)``.

    ``extras`` holds keys that are not StudyConfig fields (``schemes``
    for the compare command).
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    if not parser.has_section("study"):
        raise ConfigError(f"{path}: missing [study] section")
    values, extras = {}, {}
    for key, raw in parser.items("study"):
        if key not in _STUDY_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r} in [study]")
        try:
            val = _STUDY_KEYS[key](raw)
        except ValueError as err:
            raise ConfigError(f"{path}: bad value for {key!r}: {err}") from None
        if key == "schemes":
            extras[key] = val
        else:
            values[{"r": "R", "s": "S"}.get(key, key)] = val
    if "point_load" in values and len(values["point_load"]) != 3:
        raise ConfigError(f"{path}: point_load needs three numbers x, y, magnitude")
    params = {}
    if parser.has_section("params"):
        for key, raw in parser.items("params"):
            if key not in _PARAM_KEYS:
                raise ConfigError(f"{path}: unknown key {key!r} in [params]")
            try:
                params[key] = float(raw)
            except ValueError as err:
                raise ConfigError(f"{path}: bad value for {key!r}: {err}") from None
    try:
        config = StudyConfig(params=SchemeParams(**params), **values)
        config.problem_spec()
    except (ValueError, KeyError) as err:
        raise ConfigError(f"{path}: {err}") from None
    if config.output is None:
        config.output = str(Path(path).parent)
    return config, extras


def _cmd_run(args):
    config, _ = parse_config(args.config)
    result = run_study(config)
    print(f"wrote {Path(config.output) / config.name}.csv and .json")
    for tag, r in result.rates.items():
        print(f"{tag}: rate {r['rate']:.3f} (fit residual {r['residual']:.2e})")
    return result


def _cmd_compare(args):
    config, extras = parse_config(args.config)
    kwargs = {"schemes": extras["schemes"]} if "schemes" in extras else {}
    result = compare_schemes(config, **kwargs)
    print(f"wrote {Path(config.output) / config.name}.csv and .json")
    for tag, r in result["rates"].items():
        print(f"{tag}: rate {r['rate']:.3f}")
    return result


def _cmd_mesh_info(args):
    info = mesh_summary(load_mesh(args.file))
    print(json.dumps(info, indent=2))
    return info


def build_parser():
    parser = argparse.ArgumentParser(prog="fourfem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a convergence study")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("compare", help="compare schemes against the best-approximation term")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_compare)
    p = sub.add_parser("mesh-info", help="print counts and sizes of a mesh file")
    p.add_argument("file")
    p.set_defaults(func=_cmd_mesh_info)
    return parser


def main(argv=None):
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as err:
        cause = getattr(err, "cause", None) or err
        payload = {"error": type(err).__name__, "cause": type(cause).__name__, "message": str(err)}
        level = getattr(err, "level", None)
        if level is not None:
            payload["level"] = level
        print(json.dumps(payload), file=sys.stderr)
        return 2 if isinstance(err, (ConfigError, OSError)) else 1
    return 0


__all__ = ["main", "parse_config", "build_parser", "ConfigError", "write_outputs"]
