"""Command-line front end: ``robustci {solve,sweep,selftest}``.

Configuration is a TOML file with the sections ``[system]``,
``[error_model]``, ``[targets]``, ``[iteration]``, ``[sweep]`` and
``[output]``.  Keys missing from the file take the bundled defaults, and
command-line flags override both.  A run manifest written next to the
outputs is itself accepted by ``--config`` and replays the run.

Exit codes: 0 on success (an infeasible problem is a result, not a failure),
2 on configuration errors, 3 on internal numerical failures.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from . import __version__, evaluation, precoder, selftest, socp
from .errors import ConfigError, DomainError, NumericalError
from .model import UserScenario, make_constellation

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

_INT, _FLOAT, _BOOL, _STR = "integer", "number", "boolean", "string"
_FLOATS, _STRS, _MATRIX, _INTS = "list of numbers", "list of strings", "matrix", "list of integers"
_FLOAT_OR_LIST = "number or list of numbers"

SCHEMA = {
    "system": {
        "m_antennas": _INT, "n_users": _INT, "mod_order": _INT, "sigma_z": _FLOAT,
        "scheme": _STR, "h_est_real": _MATRIX, "h_est_imag": _MATRIX, "symbols": _INTS,
    },
    "error_model": {"err_var": _FLOAT},
    "targets": {"p_hat": _FLOAT, "snr_db": _FLOAT_OR_LIST, "power_budget_db": _FLOAT},
    "iteration": {
        "eta": _FLOAT, "delta": _FLOAT, "max_iter": _INT, "negate_relaxation": _BOOL,
        "mc_probability": _BOOL, "mc_samples": _INT,
    },
    "sweep": {
        "snr_targets_db": _FLOATS, "n_channels": _INT, "n_mc": _INT, "seed": _INT,
        "schemes": _STRS,
    },
    "output": {"dir": _STR, "format": _STR},
}

# SweepConfig field -> config key, for naming the offending key in errors
_FIELD_KEYS = {
    "m_antennas": "system.m_antennas", "n_users": "system.n_users",
    "mod_order": "system.mod_order", "sigma_z": "system.sigma_z",
    "err_var": "error_model.err_var", "p_hat": "targets.p_hat",
    "eta": "iteration.eta", "delta": "iteration.delta", "max_iter": "iteration.max_iter",
    "iter_mc_samples": "iteration.mc_samples", "snr_targets_db": "sweep.snr_targets_db",
    "n_channels": "sweep.n_channels", "n_mc": "sweep.n_mc", "seed": "sweep.seed",
    "schemes": "sweep.schemes", "unsupported": "system.mod_order",
}


class ConfigFieldError(ConfigError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def default_config() -> dict:
    text = resources.files("robustci").joinpath("default_config.toml").read_text("utf-8")
    return tomli.loads(text)


def _check_type(key: str, kind: str, value):
    def is_num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    ok = {
        _INT: lambda v: isinstance(v, int) and not isinstance(v, bool),
        _FLOAT: is_num,
        _BOOL: lambda v: isinstance(v, bool),
        _STR: lambda v: isinstance(v, str),
        _FLOATS: lambda v: isinstance(v, list) and all(is_num(x) for x in v),
        _STRS: lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v),
        _INTS: lambda v: isinstance(v, list)
        and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
        _MATRIX: lambda v: isinstance(v, list)
        and all(isinstance(r, list) and all(is_num(x) for x in r) for r in v),
        _FLOAT_OR_LIST: lambda v: is_num(v)
        or (isinstance(v, list) and all(is_num(x) for x in v)),
    }[kind]
    if not ok(value):
        raise ConfigFieldError(key, f"expected {kind}, got {value!r}")


def merge_config(base: dict, override: dict, source: str = "config") -> dict:
    """Overlay ``override`` on ``base`` after checking sections, keys and types."""
    out = copy.deepcopy(base)
    for section, table in override.items():
        if section not in SCHEMA:
            raise ConfigFieldError(section, f"unknown section in {source}; expected one of "
                                   f"{sorted(SCHEMA)}")
        if not isinstance(table, dict):
            raise ConfigFieldError(section, "expected a table")
        for key, value in table.items():
            if key not in SCHEMA[section]:
                raise ConfigFieldError(f"{section}.{key}", f"unknown key in {source}")
            _check_type(f"{section}.{key}", SCHEMA[section][key], value)
            out.setdefault(section, {})[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Defaults overlaid with a TOML file or the ``config`` of a run manifest."""
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    try:
        text = p.read_text("utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    if p.suffix == ".json":
        try:
            data = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from exc
        # a manifest holds the fully resolved config, not an overlay
        return merge_config({}, data, source=path)
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return merge_config(cfg, data, source=path)


def apply_overrides(cfg: dict, args) -> dict:
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags.setdefault("sweep", {})["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        flags.setdefault("output", {})["dir"] = args.out
    if getattr(args, "format", None) is not None:
        flags.setdefault("output", {})["format"] = args.format
    if getattr(args, "mc_probability", False):
        flags.setdefault("iteration", {})["mc_probability"] = True
    if getattr(args, "negate_relaxation", None) is not None:
        flags.setdefault("iteration", {})["negate_relaxation"] = args.negate_relaxation
    if getattr(args, "scheme", None) is not None:
        flags.setdefault("system", {})["scheme"] = args.scheme
    cfg = merge_config(cfg, flags, source="command line")
    if cfg["output"]["format"] not in ("csv", "json"):
        raise ConfigFieldError("output.format", f"expected csv or json, got "
                               f"{cfg['output']['format']!r}")
    return cfg


def _field_error(exc: ConfigError) -> ConfigError:
    if isinstance(exc, ConfigFieldError):
        return exc
    msg = str(exc)
    head = msg.split(" ", 1)[0]
    key = _FIELD_KEYS.get(head)
    return ConfigFieldError(key, msg) if key else exc


def sweep_config(cfg: dict) -> evaluation.SweepConfig:
    s, e, t, it, sw = (cfg[k] for k in ("system", "error_model", "targets", "iteration", "sweep"))
    try:
        return evaluation.SweepConfig(
            m_antennas=s["m_antennas"], n_users=s["n_users"], mod_order=s["mod_order"],
            sigma_z=float(s["sigma_z"]), err_var=float(e["err_var"]), p_hat=float(t["p_hat"]),
            eta=float(it["eta"]), delta=float(it["delta"]), max_iter=it["max_iter"],
            snr_targets_db=tuple(sw["snr_targets_db"]), n_channels=sw["n_channels"],
            n_mc=sw["n_mc"], seed=sw["seed"], schemes=tuple(sw["schemes"]),
            negate_relaxation=it["negate_relaxation"], mc_probability=it["mc_probability"],
            iter_mc_samples=it["mc_samples"],
        )
    except ConfigError as exc:
        raise _field_error(exc) from exc


def solve_scenario(cfg: dict) -> precoder.Scenario:
    """The scenario of ``solve``: explicit channels if given, else drawn from the seed."""
    sc = sweep_config(cfg)
    s, t = cfg["system"], cfg["targets"]
    m, n = sc.m_antennas, sc.n_users
    const = make_constellation(sc.mod_order)
    given = [k for k in ("h_est_real", "h_est_imag", "symbols") if k in s]
    if given and len(given) < 3:
        missing = sorted({"h_est_real", "h_est_imag", "symbols"} - set(given))
        raise ConfigFieldError(f"system.{missing[0]}", "explicit channels need h_est_real, "
                               "h_est_imag and symbols together")
    if given:
        h = {}
        for k in ("h_est_real", "h_est_imag"):
            arr = np.array(s[k], dtype=float) if s[k] and all(s[k]) else np.empty((0,))
            if arr.shape != (n, m):
                raise ConfigFieldError(f"system.{k}", f"expected {n} rows of {m} entries")
            h[k] = arr
        channels = h["h_est_real"] + 1j * h["h_est_imag"]
        idx = s["symbols"]
        if len(idx) != n or any(not 0 <= i < sc.mod_order for i in idx):
            raise ConfigFieldError("system.symbols",
                                   f"expected {n} indices in [0, {sc.mod_order})")
        symbols = const.symbols[np.array(idx, dtype=int)]
    else:
        channels = evaluation.gen_channels(m, n, 1, sc.seed)[0]
        symbols = evaluation.assign_symbols(const, n, (sc.seed, 2, 0))
    snr_db = t["snr_db"]
    snr_db = [snr_db] * n if not isinstance(snr_db, list) else snr_db
    if len(snr_db) != n:
        raise ConfigFieldError("targets.snr_db", f"expected a number or {n} values")
    users = tuple(
        UserScenario(channels[i], symbols[i], sc.sigma_z, 10.0 ** (snr_db[i] / 10.0), sc.p_hat,
                     sc.err_var)
        for i in range(n)
    )
    return precoder.Scenario(users, const)


# --------------------------------------------------------------------- output


def atomic_write(path: Path, data: str) -> str:
    """Write ``data`` via a temporary file and rename; returns the SHA-256."""
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(raw).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def solve_payload(scenario: precoder.Scenario, scheme: str, result: precoder.PrecodeResult,
                  extra: dict) -> dict:
    x = result.x
    res = result.solution.residuals if result.solution is not None else None
    return {
        "scheme": scheme,
        "status": result.status,
        "power": _num(result.power),
        "x_real": None if x is None else [float(v) for v in x.real],
        "x_imag": None if x is None else [float(v) for v in x.imag],
        "users": [
            {"p_exact": _num(o.p_exact), "p_target_used": o.p_target_used,
             "radius_used": o.radius_used, "gamma_hat": u.gamma_hat}
            for o, u in zip(result.per_user, scenario.users)
        ],
        "trace": [
            {"l": r.l, "p_act": list(r.p_act), "delta_p": list(r.delta_p),
             "p_hat_adj": list(r.p_hat_adj)}
            for r in result.trace
        ],
        "converged": result.converged,
        "solver_iterations": result.solver_iterations,
        "residuals": None if res is None else {
            "primal": res.primal_res, "dual": res.dual_res, "gap": res.gap},
        **extra,
    }


def solve_csv(payload: dict) -> dict[str, str]:
    files = {}
    if payload["x_real"] is not None:
        files["precoder.csv"] = _csv(
            [[k, repr(a), repr(b)] for k, (a, b) in
             enumerate(zip(payload["x_real"], payload["x_imag"]))],
            ["antenna", "x_real", "x_imag"],
        )
    files["users.csv"] = _csv(
        [[i, "" if u["p_exact"] is None else repr(u["p_exact"]), repr(u["p_target_used"]),
          repr(u["radius_used"]), repr(u["gamma_hat"])] for i, u in enumerate(payload["users"])],
        ["user", "p_exact", "p_target_used", "radius_used", "gamma_hat"],
    )
    files["trace.csv"] = _csv(
        [[r["l"], i, repr(r["p_act"][i]), repr(r["delta_p"][i]), repr(r["p_hat_adj"][i])]
         for r in payload["trace"] for i in range(len(r["p_act"]))],
        ["l", "user", "p_act", "delta_p", "p_hat_adj"],
    )
    return files


def run_solve(cfg: dict) -> tuple[dict, dict[str, str]]:
    scenario = solve_scenario(cfg)
    sc = sweep_config(cfg)
    scheme = cfg["system"]["scheme"]
    extra = {}
    if scheme == "nonrobust":
        result = precoder.solve_nonrobust(scenario)
    elif scheme == "sphere":
        result = precoder.solve_sphere_bounding(scenario)
    elif scheme == "iterative":
        result = precoder.iterative_sphere_bounding(
            scenario, sc.eta, sc.delta, sc.max_iter, negate=sc.negate_relaxation,
            use_mc=sc.mc_probability, n_mc=sc.iter_mc_samples, seed=(sc.seed, 4),
        )
    elif scheme == "maxmin":
        budget = 10.0 ** (cfg["targets"]["power_budget_db"] / 10.0)
        bound = precoder.maxmin_snr_lower_bound(scenario, budget)
        scenario, result = precoder.maxmin_result(scenario, bound)
        extra = {"gamma_lb": _num(bound.gamma_lb), "unit_power": _num(bound.unit_power),
                 "power_budget": budget}
    else:
        raise ConfigFieldError("system.scheme",
                               f"expected one of {evaluation.SCHEMES}, got {scheme!r}")
    payload = solve_payload(scenario, scheme, result, extra)
    files = {"solve.json": json.dumps(payload, indent=2, sort_keys=True) + "\n"}
    files.update(solve_csv(payload))
    return payload, files


def _write_outputs(cfg: dict, command: str, files: dict[str, str], started: str) -> RunManifest:
    out = Path(cfg["output"]["dir"])
    manifest = RunManifest(command, cfg, cfg["sweep"]["seed"], started=started)
    for name, text in files.items():
        manifest.outputs[name] = {"path": str(out / name), "sha256": atomic_write(out / name, text)}
    manifest.finished = _now()
    atomic_write(out / "manifest.json", manifest.to_json())
    return manifest


def cmd_solve(args) -> int:
    started = _now()
    cfg = apply_overrides(load_config(args.config), args)
    payload, files = run_solve(cfg)
    _write_outputs(cfg, "solve", files, started)
    fmt = cfg["output"]["format"]
    sys.stdout.write(files["solve.json"] if fmt == "json" else files["users.csv"])
    print(f"status={payload['status']} power={payload['power']}", file=sys.stderr)
    if payload["status"] == socp.MAX_ITER:
        raise NumericalError("solver did not converge (status max_iter)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = _now()
    cfg = apply_overrides(load_config(args.config), args)
    config = sweep_config(cfg)
    report = evaluation.run_sweep(config, workers=args.workers)
    files = {"sweep.csv": report.to_csv(), "summary.json": report.to_json()}
    _write_outputs(cfg, "sweep", files, started)
    fmt = cfg["output"]["format"]
    sys.stdout.write(files["sweep.csv"] if fmt == "csv" else files["summary.json"])
    return EXIT_OK


def cmd_selftest(args) -> int:
    perturb = tuple(args.perturb or ())
    unknown = set(perturb) - set(selftest.CHECKS)
    if unknown:
        raise ConfigError(f"--perturb: unknown checks {sorted(unknown)}; "
                          f"expected names from {list(selftest.CHECKS)}")
    results = selftest.run_checks(perturb)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustci", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"robustci {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config or run manifest")
    common.add_argument("--seed", type=_u64, metavar="U64")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--format", choices=("csv", "json"),
                        help="report echoed to stdout; all files are always written")
    common.add_argument("--mc-probability", action="store_true",
                        help="use Monte Carlo for the achieved probability inside the iteration")
    common.add_argument("--negate-relaxation", action=argparse.BooleanOptionalAction,
                        default=None, help="flip the sign of the target update")

    p = sub.add_parser("solve", parents=[common], help="solve one scenario")
    p.add_argument("--scheme", choices=evaluation.SCHEMES)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", parents=[common], help="evaluate schemes over an SNR sweep")
    p.add_argument("--workers", type=_positive, default=1, metavar="N")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the analytic self-checks")
    p.add_argument("--perturb", action="append", metavar="CHECK", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
