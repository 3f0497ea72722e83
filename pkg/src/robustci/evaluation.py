"""Channel ensembles, Monte Carlo evaluation of precoders and the SNR sweep.

Random streams are keyed, never shared: channels, symbols and Monte Carlo
trials for realization ``c`` and SNR target ``j`` come from substreams of
the master seed indexed by ``(purpose, c[, j])``.  All schemes in a cell see
the same error and noise draws, and results do not depend on how cells are
distributed over worker processes.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, precoder, prob
from .errors import ConfigError
from .model import CI_TOL, PskConstellation, UserScenario, ci_margin, make_constellation

SCHEMES = ("nonrobust", "sphere", "iterative", "maxmin")

_CHANNEL, _SYMBOL, _TRIAL, _ITER_MC = 1, 2, 3, 4


def gen_channels(m: int, n: int, n_channels: int, seed: int) -> np.ndarray:
    """``n_channels`` sets of ``n`` i.i.d. CN(0, I_m) channel vectors.

    Returns a complex array of shape ``(n_channels, n, m)``; realization
    ``c`` depends only on ``(seed, c)``.
    """
    if min(m, n, n_channels) < 1:
        raise ConfigError("channel counts must be >= 1")
    out = np.empty((n_channels, n, m), dtype=complex)
    for c in range(n_channels):
        g = prob.substream(seed, _CHANNEL, c).standard_normal((2, n, m))
        out[c] = (g[0] + 1j * g[1]) / math.sqrt(2.0)
    return out


def assign_symbols(constellation: PskConstellation, n: int, seed) -> np.ndarray:
    """``n`` uniformly drawn constellation symbols from the stream ``seed``."""
    idx = prob.substream(seed).integers(0, constellation.mod_order, n)
    return constellation.symbols[idx]


@dataclass(frozen=True)
class UserEvaluation:
    connect_mc: prob.ProbEstimate
    ser: prob.ProbEstimate
    p_exact: float
    # CI held and the noise stayed inside the guaranteed margin
    protected: prob.ProbEstimate


def simulate_user(user: UserScenario, theta: float, x, n_mc: int, seed):
    """Per-trial outcomes ``(connect, correct, protected)`` for one user.

    Each trial draws ``e ~ CN(0, err_cov)`` and ``z ~ CN(0, sigma_z^2)``,
    forms ``y = (h_est + e)^T x + z`` and decodes by angular sector.  A
    trial is *protected* when the CI condition holds on the true channel and
    ``|z| < sqrt(gamma_hat) sigma_z sin(theta)``; protection implies correct
    detection.
    """
    x = np.asarray(x, dtype=complex)
    std_e = np.sqrt(user.err_cov / 2.0)
    connect, correct, protected = [], [], []
    margin = math.sqrt(user.gamma_hat) * user.sigma_z * math.sin(theta)
    for j in range(-(-n_mc // prob.MC_CHUNK)):
        size = min(prob.MC_CHUNK, n_mc - j * prob.MC_CHUNK)
        g = prob.substream(seed, j).standard_normal((2, size, user.m + 1))
        e = std_e * (g[0, :, :-1] + 1j * g[1, :, :-1])
        z = user.sigma_z / math.sqrt(2.0) * (g[0, :, -1] + 1j * g[1, :, -1])
        h = user.h_est + e
        y = h @ x + z
        ok = ci_margin(h, user.d, x, user.gamma_hat, user.sigma_z, theta) >= -CI_TOL
        good = np.abs(np.angle(np.conj(user.d) * y)) < theta
        connect.append(ok)
        correct.append(good)
        protected.append(ok & (np.abs(z) < margin))
    return np.concatenate(connect), np.concatenate(correct), np.concatenate(protected)


def evaluate_precoder(scenario: precoder.Scenario, x, n_mc: int, seed) -> list[UserEvaluation]:
    base = seed if isinstance(seed, tuple) else (seed,)
    theta = scenario.constellation.theta
    x = np.asarray(x, dtype=complex)
    x_tilde = np.concatenate([x.real, x.imag])
    p_exact = precoder.exact_connect_probs(scenario, x_tilde)
    out = []
    for i, user in enumerate(scenario.users):
        connect, correct, protected = simulate_user(user, theta, x, n_mc, base + (i,))
        out.append(UserEvaluation(
            prob.ProbEstimate.from_count(int(connect.sum()), n_mc),
            prob.ProbEstimate.from_count(int(n_mc - correct.sum()), n_mc),
            float(p_exact[i]),
            prob.ProbEstimate.from_count(int(protected.sum()), n_mc),
        ))
    return out


@dataclass(frozen=True)
class SweepConfig:
    m_antennas: int = 4
    n_users: int = 4
    mod_order: int = 8
    sigma_z: float = 1.0
    err_var: float = 0.02
    p_hat: float = 0.9
    eta: float = 0.2
    delta: float = 0.005
    max_iter: int = 50
    snr_targets_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    n_channels: int = 100
    n_mc: int = 10_000
    seed: int = 0
    schemes: tuple[str, ...] = ("nonrobust", "sphere", "iterative")
    negate_relaxation: bool = False
    mc_probability: bool = False
    iter_mc_samples: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "snr_targets_db", tuple(float(v) for v in self.snr_targets_db))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        for name in ("m_antennas", "n_users", "n_channels", "n_mc", "max_iter", "iter_mc_samples"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        make_constellation(self.mod_order)
        if not self.sigma_z > 0:
            raise ConfigError(f"sigma_z must be > 0, got {self.sigma_z}")
        if not self.err_var >= 0:
            raise ConfigError(f"err_var must be >= 0, got {self.err_var}")
        if not 0 <= self.p_hat < 1:
            raise ConfigError(f"p_hat must lie in [0, 1), got {self.p_hat}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        if not self.snr_targets_db:
            raise ConfigError("snr_targets_db must not be empty")
        if not self.schemes:
            raise ConfigError("schemes must not be empty")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; expected a subset of {SCHEMES}")
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigError("schemes must not repeat")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_targets_db"] = list(self.snr_targets_db)
        d["schemes"] = list(self.schemes)
        return d


@dataclass(frozen=True)
class CellRecord:
    """Outcome of one scheme on one channel realization at one SNR target."""

    channel: int
    target: int
    scheme: str
    status: str
    power: float
    p_exact: tuple[float, ...]
    connect_mc: tuple[float, ...]
    connect_mc_se: tuple[float, ...]
    ser: tuple[float, ...]
    ser_se: tuple[float, ...]
    solver_iters: int
    relax_iters: int
    converged: bool
    gamma_lb: float = math.nan

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


CSV_COLUMNS = (
    "scheme",
    "snr_target_db",
    "connect_prob_exact_mean",
    "connect_prob_mc_mean",
    "connect_prob_mc_stderr",
    "ser_mean",
    "ser_stderr",
    "power_mean",
    "outage_rate",
    "solver_iters_mean",
)


@dataclass
class EvaluationReport:
    config: SweepConfig
    records: list[CellRecord] = field(default_factory=list)

    def cell(self, scheme: str, target: int) -> list[CellRecord]:
        return [r for r in self.records if r.scheme == scheme and r.target == target]

    def summary_rows(self) -> list[dict]:
        """One row per (scheme, target).

        Outage realizations count as connect failures (probability 0) and
        symbol errors (SER 1); power is averaged over feasible realizations
        only.  Standard errors pool the Monte Carlo errors of the averaged
        per-user estimates.
        """
        rows = []
        n_users = self.config.n_users
        for scheme in self.config.schemes:
            for j, snr_db in enumerate(self.config.snr_targets_db):
                cell = self.cell(scheme, j)
                feas = [r for r in cell if r.feasible]
                n_terms = len(cell) * n_users
                p_ex = sum(sum(r.p_exact) for r in feas) / n_terms
                p_mc = sum(sum(r.connect_mc) for r in feas) / n_terms
                p_se = math.sqrt(sum(sum(s * s for s in r.connect_mc_se) for r in feas)) / n_terms
                ser = (sum(sum(r.ser) for r in feas) + (len(cell) - len(feas)) * n_users) / n_terms
                ser_se = math.sqrt(sum(sum(s * s for s in r.ser_se) for r in feas)) / n_terms
                rows.append({
                    "scheme": scheme,
                    "snr_target_db": snr_db,
                    "connect_prob_exact_mean": p_ex,
                    "connect_prob_mc_mean": p_mc,
                    "connect_prob_mc_stderr": p_se,
                    "ser_mean": ser if feas else math.nan,
                    "ser_stderr": ser_se if feas else math.nan,
                    "power_mean": sum(r.power for r in feas) / len(feas) if feas else math.nan,
                    "outage_rate": 1.0 - len(feas) / len(cell),
                    "solver_iters_mean": sum(r.solver_iters for r in cell) / len(cell),
                    # conditional on feasibility; JSON only
                    "connect_prob_exact_mean_feasible": (
                        sum(sum(r.p_exact) for r in feas) / (len(feas) * n_users) if feas else math.nan
                    ),
                    "ser_mean_feasible": (
                        sum(sum(r.ser) for r in feas) / (len(feas) * n_users) if feas else math.nan
                    ),
                    "relax_converged_rate": (
                        sum(r.converged for r in feas) / len(feas) if feas else math.nan
                    ),
                    "gamma_lb_mean": (
                        sum(r.gamma_lb for r in feas) / len(feas)
                        if feas and scheme == "maxmin" else math.nan
                    ),
                })
        return rows

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.summary_rows():
            lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
        return "\r\n".join(lines) + "\r\n"

    def to_json(self) -> str:
        cfg = self.config.to_dict()
        payload = {
            "tool": "robustci",
            "version": __version__,
            "config": cfg,
            "config_sha1": config_digest(self.config),
            "rows": [{k: _json_num(v) for k, v in row.items()} for row in self.summary_rows()],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def config_digest(config: SweepConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(float(v))


def _json_num(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _build_scenario(config: SweepConfig, h: np.ndarray, symbols, gamma: float,
                    constellation: PskConstellation) -> precoder.Scenario:
    cov = np.full(config.m_antennas, float(config.err_var))
    users = tuple(
        UserScenario(h[i], symbols[i], config.sigma_z, gamma, config.p_hat, cov)
        for i in range(config.n_users)
    )
    return precoder.Scenario(users, constellation)


def _record(c, j, scheme, result: precoder.PrecodeResult, scenario, config, trial_seed,
            relax_iters=0, gamma_lb=math.nan) -> CellRecord:
    if not result.optimal:
        n = config.n_users
        nan = (math.nan,) * n
        return CellRecord(c, j, scheme, result.status, math.nan, nan, nan, nan, nan, nan,
                          result.solver_iterations, relax_iters, False, gamma_lb)
    ev = evaluate_precoder(scenario, result.x, config.n_mc, trial_seed)
    return CellRecord(
        c, j, scheme, result.status, result.power,
        tuple(u.p_exact for u in ev),
        tuple(u.connect_mc.value for u in ev),
        tuple(u.connect_mc.std_err for u in ev),
        tuple(u.ser.value for u in ev),
        tuple(u.ser.std_err for u in ev),
        result.solver_iterations, relax_iters, result.converged, gamma_lb,
    )


def run_channel(config: SweepConfig, c: int, h: np.ndarray) -> list[CellRecord]:
    """Every enabled scheme at every SNR target for realization ``c``."""
    constellation = make_constellation(config.mod_order)
    symbols = assign_symbols(constellation, config.n_users, (config.seed, _SYMBOL, c))
    records = []
    for j, snr_db in enumerate(config.snr_targets_db):
        gamma = 10.0 ** (snr_db / 10.0)
        scenario = _build_scenario(config, h, symbols, gamma, constellation)
        trial_seed = (config.seed, _TRIAL, c, j)
        for scheme in config.schemes:
            if scheme == "nonrobust":
                records.append(_record(c, j, scheme, precoder.solve_nonrobust(scenario),
                                       scenario, config, trial_seed))
            elif scheme == "sphere":
                records.append(_record(c, j, scheme, precoder.solve_sphere_bounding(scenario),
                                       scenario, config, trial_seed))
            elif scheme == "iterative":
                res = precoder.iterative_sphere_bounding(
                    scenario, config.eta, config.delta, config.max_iter,
                    negate=config.negate_relaxation, use_mc=config.mc_probability,
                    n_mc=config.iter_mc_samples, seed=(config.seed, _ITER_MC, c, j),
                )
                records.append(_record(c, j, scheme, res, scenario, config, trial_seed,
                                       relax_iters=len(res.trace)))
            else:
                # the SNR axis value is read as the power budget in dB
                bound = precoder.maxmin_snr_lower_bound(scenario, gamma)
                at_lb, res = precoder.maxmin_result(scenario, bound)
                records.append(_record(c, j, scheme, res, at_lb, config, trial_seed,
                                       gamma_lb=bound.gamma_lb))
    return records


def _run_channel_star(args):
    return run_channel(*args)


def run_sweep(config: SweepConfig, workers: int = 1) -> EvaluationReport:
    """Run every enabled scheme on every realization and SNR target.

    Realizations are distributed over ``workers`` processes; the report is
    identical for any worker count.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    channels = gen_channels(config.m_antennas, config.n_users, config.n_channels, config.seed)
    tasks = [(config, c, channels[c]) for c in range(config.n_channels)]
    if workers == 1:
        results = [_run_channel_star(t) for t in tasks]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_channel_star, tasks, chunksize=1))
    report = EvaluationReport(config)
    for recs in results:
        report.records.extend(recs)
    return report
