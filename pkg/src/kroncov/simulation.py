"""Monte Carlo studies comparing covariance estimators and mean tests.

Two data generating processes are supported:

* ``CorrectSpecConfig``: ``y_t ~ N(mu, Sigma_1 kron ... kron Sigma_v)`` with
  2x2 factors ``[[1, rho**j], [rho**j, 1]]``, so ``n = 2**v``.
* ``MisspecConfig``: ``y_t ~ N(mu, diag(lambda))`` with log-normal
  ``lambda_i`` of mean 1 and variance ``alpha2``, redrawn every replication.

Random numbers
--------------
Replication ``r`` of a study with base seed ``s`` draws everything from
``numpy.random.Generator(PCG64(SeedSequence(s, spawn_key=(r,))))``, and
normal variates come from ``Generator.standard_normal``.  Each replication
therefore owns an independent stream, and a report depends only on the
config, never on the number of worker processes or their scheduling.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np
from scipy import linalg

from .baselines import lw04_fit
from .estimator import (
    KroneckerCovEstimate,
    fit,
    kron_distance_sq,
    precision,
    quad_form_precision,
)
from .inference import gaussian_upper_quantile, standardize
from .tensorlin import FactorShape, cholesky, kron_matvec

ESTIMATORS = ("sample", "qf", "lw04")
REJECTION_RULES = ("upper", "two-sided")
LOGNORMAL_PARAMS = ("variance", "sd")
METRICS = ("mse1", "mse2", "prial1", "prial2", "size_lm", "size_wald", "power_lm", "power_wald")


class ConfigError(ValueError):
    """Invalid study configuration."""


def _check_estimators(estimators) -> tuple[str, ...]:
    estimators = tuple(estimators)
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimators {bad}; choose from {list(ESTIMATORS)}")
    if not estimators:
        raise ConfigError("estimators must not be empty")
    return estimators


def _check_common(reps, T, alpha, seed, rejection):
    if rejection not in REJECTION_RULES:
        raise ConfigError(f"rejection must be one of {list(REJECTION_RULES)}, got {rejection!r}")
    if int(reps) < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    if int(T) < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0 <= int(seed) < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")


@dataclass(frozen=True)
class CorrectSpecConfig:
    v: int
    rho: float
    T: int
    reps: int
    seed: int = 0
    estimators: tuple[str, ...] = ESTIMATORS
    alpha: float = 0.05
    power: bool = False
    rejection: str = "upper"

    kind = "correct"

    def __post_init__(self):
        if int(self.v) < 1:
            raise ConfigError(f"v must be >= 1, got {self.v}")
        if not -1 < self.rho < 1:
            raise ConfigError(f"rho must lie in (-1, 1), got {self.rho}")
        _check_common(self.reps, self.T, self.alpha, self.seed, self.rejection)
        object.__setattr__(self, "estimators", _check_estimators(self.estimators))

    @property
    def n(self) -> int:
        return 2**self.v

    @property
    def shape(self) -> FactorShape:
        return FactorShape((2,) * self.v)

    def truth(self) -> KroneckerCovEstimate:
        factors = tuple(np.array([[1.0, self.rho**j], [self.rho**j, 1.0]]) for j in range(1, self.v + 1))
        return KroneckerCovEstimate(1.0, factors, self.shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return {"kind": self.kind, **d}


@dataclass(frozen=True)
class MisspecConfig:
    n: int
    T: int
    reps: int
    alpha2: float
    shapes: tuple[FactorShape, ...]
    seed: int = 0
    estimators: tuple[str, ...] = ESTIMATORS
    alpha: float = 0.05
    power: bool = False
    rejection: str = "upper"
    lognormal_param: str = "variance"

    kind = "misspec"

    def __post_init__(self):
        if not self.alpha2 > 0:
            raise ConfigError(f"alpha2 must be positive, got {self.alpha2}")
        if self.lognormal_param not in LOGNORMAL_PARAMS:
            raise ConfigError(f"lognormal_param must be one of {list(LOGNORMAL_PARAMS)}, got {self.lognormal_param!r}")
        _check_common(self.reps, self.T, self.alpha, self.seed, self.rejection)
        shapes = tuple(FactorShape.parse(s) for s in self.shapes)
        for s in shapes:
            if s.n != self.n:
                raise ConfigError(f"shape {s} has product {s.n}, expected n={self.n}")
        estimators = _check_estimators(self.estimators)
        if "qf" in estimators and not shapes:
            raise ConfigError("estimator 'qf' needs at least one entry in shapes")
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "estimators", estimators)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [str(s) for s in self.shapes]
        d["estimators"] = list(self.estimators)
        return {"kind": self.kind, **d}


StudyConfig = Union[CorrectSpecConfig, MisspecConfig]

_FIELDS = {
    "correct": {"v", "rho", "T", "reps", "seed", "estimators", "alpha", "power", "rejection"},
    "misspec": {
        "n", "T", "reps", "alpha2", "shapes", "seed", "estimators", "alpha", "power", "rejection", "lognormal_param",
    },
}
_REQUIRED = {
    "correct": {"v", "rho", "T", "reps"},
    "misspec": {"n", "T", "reps", "alpha2"},
}


def config_from_dict(d: dict) -> StudyConfig:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _FIELDS:
        raise ConfigError(f"config key 'kind' must be one of {sorted(_FIELDS)}, got {kind!r}")
    unknown = sorted(set(d) - _FIELDS[kind])
    if unknown:
        raise ConfigError(f"unknown config keys for kind={kind!r}: {', '.join(unknown)}")
    missing = sorted(_REQUIRED[kind] - set(d))
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    try:
        if kind == "correct":
            return CorrectSpecConfig(**d)
        d.setdefault("shapes", ())
        return MisspecConfig(**d)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> StudyConfig:
    """Read a study config from a ``.toml`` or ``.json`` file."""
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        d = json.loads(raw)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            d = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(d)


def replication_stream(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(rep),))))


def sample_kronecker_gaussian(sigma2, factors, mu, T: int, stream: np.random.Generator) -> np.ndarray:
    """``T`` rows drawn i.i.d. from ``N(mu, sigma2 * kron(factors))``."""
    chol = [cholesky(F) for F in factors]
    n = math.prod(L.shape[0] for L in chol)
    Z = stream.standard_normal((T, n))
    Y = kron_matvec(chol, math.sqrt(sigma2), Z)
    if mu is not None:
        Y += np.asarray(mu, dtype=float).reshape(1, -1)
    return Y


def draw_misspec_eigenvalues(
    n: int, alpha2: float, stream: np.random.Generator, lognormal_param: str = "variance"
) -> np.ndarray:
    """Log-normal eigenvalues ``exp(-s2/2 + sqrt(s2) z)``.

    With ``lognormal_param="variance"``, ``s2 = log(1 + alpha2)`` so the
    eigenvalues have mean 1 and variance ``alpha2``.  ``"sd"`` instead uses
    ``log(1 + alpha2)`` as the standard deviation of the logarithm, keeping
    the location ``-log(1 + alpha2) / 2``; the published misspecified-case
    tables are reproduced under this variant.
    """
    a = math.log1p(alpha2)
    if lognormal_param == "variance":
        return np.exp(-0.5 * a + math.sqrt(a) * stream.standard_normal(n))
    if lognormal_param == "sd":
        return np.exp(-0.5 * a + a * stream.standard_normal(n))
    raise ValueError(f"unknown lognormal_param {lognormal_param!r}")


def sample_misspec_gaussian(
    n: int, T: int, alpha2: float, stream: np.random.Generator, mu=None, lognormal_param: str = "variance"
):
    """Draw ``(data, truth)`` with ``truth = diag(lambda)``, log-normal ``lambda``."""
    lam = draw_misspec_eigenvalues(n, alpha2, stream, lognormal_param)
    Y = stream.standard_normal((T, n)) * np.sqrt(lam)
    if mu is not None:
        Y += np.asarray(mu, dtype=float).reshape(1, -1)
    return Y, np.diag(lam)


def sparse_mean_size(n: int) -> int:
    """``floor(n ** 0.7)`` in exact integer arithmetic."""
    k = int(math.floor(n**0.7))
    while k**10 > n**7:
        k -= 1
    while (k + 1) ** 10 <= n**7:
        k += 1
    return k


def power_mean_vector(n: int, T: int, stream: np.random.Generator) -> np.ndarray:
    mu = np.zeros(n)
    k = sparse_mean_size(n)
    mu[:k] = stream.standard_normal(k) / math.sqrt(T)
    return mu


def mse_relative(errors: Sequence[float], denom) -> float:
    """Mean of ``errors / denom``; ``denom`` may be a scalar or one value per replication."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("no replications to average")
    denom = np.broadcast_to(np.asarray(denom, dtype=float), errors.shape)
    if np.any(denom <= 0):
        raise ValueError("denominator must be positive")
    return float(np.mean(errors / denom))


def prial(est_errors: Sequence[float], sample_errors: Sequence[float]) -> float:
    """``1 - mean(est_errors) / mean(sample_errors)``."""
    den = float(np.mean(np.asarray(sample_errors, dtype=float)))
    if not den > 0:
        raise ZeroDivisionError("sample-covariance loss is zero")
    return 1.0 - float(np.mean(np.asarray(est_errors, dtype=float))) / den


# -- one replication ---------------------------------------------------------------


@dataclass
class _Outcome:
    norm1: float = 0.0  # ||Sigma||_F^2 and ||Sigma^-1||_F^2 of this replication's truth
    norm2: float = 0.0
    err1: float | None = None
    err2: float | None = None
    lm: float | None = None  # standardized statistics under the null
    wald: float | None = None
    power_lm: float | None = None
    power_wald: float | None = None
    failed: bool = False


@dataclass
class _Truth:
    dense: np.ndarray
    dense_inv: np.ndarray
    kron: KroneckerCovEstimate | None = None
    kron_inv: KroneckerCovEstimate | None = None

    @property
    def norm1(self) -> float:
        return float(np.sum(self.dense * self.dense))

    @property
    def norm2(self) -> float:
        return float(np.sum(self.dense_inv * self.dense_inv))


@lru_cache(maxsize=4)
def _correct_truth(v: int, rho: float) -> _Truth:
    kron = CorrectSpecConfig(v=v, rho=rho, T=2, reps=1).truth()
    kinv = precision(kron)
    return _Truth(kron.materialize(cap=1 << 13), kinv.materialize(cap=1 << 13), kron, kinv)


def _dense_stat(M: np.ndarray, d: np.ndarray, T: int) -> float:
    c = linalg.cho_factor(M)
    return T * float(d @ linalg.cho_solve(c, d))


def _labels(config: StudyConfig) -> list[str]:
    out = []
    for e in config.estimators:
        if e == "qf" and isinstance(config, MisspecConfig):
            out.extend(f"qf({s})" for s in config.shapes)
        else:
            out.append(e)
    return out


def _qf_shapes(config: StudyConfig) -> dict[str, FactorShape]:
    if isinstance(config, CorrectSpecConfig):
        return {"qf": config.shape}
    return {f"qf({s})": s for s in config.shapes}


@dataclass
class _Moments:
    T: int
    n: int
    ybar: np.ndarray
    M: np.ndarray  # sample covariance
    M0: np.ndarray  # second moment about mu0 = 0


def _moments(Y: np.ndarray) -> _Moments:
    T, n = Y.shape
    ybar = Y.mean(axis=0)
    Z = Y - ybar
    M = Z.T @ Z / T
    M = 0.5 * (M + M.T)
    return _Moments(T, n, ybar, M, M + np.outer(ybar, ybar))


def _statistics(label, config, Y, mom: _Moments, truth: _Truth, want_errors: bool = True):
    """Fit one estimator and return (err1, err2, lm_stat, wald_stat)."""
    T, n, ybar = mom.T, mom.n, mom.ybar
    if label == "sample":
        err1 = float(np.sum((mom.M - truth.dense) ** 2)) if want_errors else None
        if n >= T:
            return err1, None, None, None
        Minv = linalg.cho_solve(linalg.cho_factor(mom.M), np.eye(n))
        err2 = float(np.sum((Minv - truth.dense_inv) ** 2)) if want_errors else None
        return err1, err2, _dense_stat(mom.M0, ybar, T), T * float(ybar @ Minv @ ybar)
    if label == "lw04":
        est = lw04_fit(Y).matrix
        est0 = lw04_fit(Y, mu=np.zeros(n)).matrix
        c = linalg.cho_factor(est)
        wald = T * float(ybar @ linalg.cho_solve(c, ybar))
        err1 = err2 = None
        if want_errors:
            err1 = float(np.sum((est - truth.dense) ** 2))
            inv = linalg.cho_solve(c, np.eye(n))
            err2 = float(np.sum((inv - truth.dense_inv) ** 2))
        return err1, err2, _dense_stat(est0, ybar, T), wald
    shape = _qf_shapes(config)[label]
    est = fit(mom.M, shape, check_psd=False)
    est0 = fit(mom.M0, shape, check_psd=False)
    err1 = err2 = None
    if want_errors:
        inv = precision(est)
        if truth.kron is not None and truth.kron.shape == shape:
            err1 = kron_distance_sq(est, truth.kron)
            err2 = kron_distance_sq(inv, truth.kron_inv)
        else:
            err1 = float(np.sum((est.materialize() - truth.dense) ** 2))
            err2 = float(np.sum((inv.materialize() - truth.dense_inv) ** 2))
    return err1, err2, T * quad_form_precision(est0, ybar), T * quad_form_precision(est, ybar)


def run_replication(config: StudyConfig, rep: int) -> dict[str, _Outcome]:
    """Simulate replication ``rep`` and evaluate every estimator on it."""
    stream = replication_stream(config.seed, rep)
    T, n = config.T, config.n
    if isinstance(config, CorrectSpecConfig):
        truth = _correct_truth(config.v, config.rho)
        Y = sample_kronecker_gaussian(1.0, truth.kron.factors, None, T, stream)
    else:
        Y, D = sample_misspec_gaussian(n, T, config.alpha2, stream, lognormal_param=config.lognormal_param)
        lam = np.diag(D)
        truth = _Truth(D, np.diag(1.0 / lam))
    Yp = None
    if config.power:
        mu = power_mean_vector(n, T, stream)
        if isinstance(config, CorrectSpecConfig):
            Yp = sample_kronecker_gaussian(1.0, truth.kron.factors, mu, T, stream)
        else:
            Yp = stream.standard_normal((T, n)) * np.sqrt(lam) + mu

    mom = _moments(Y)
    mom_p = None if Yp is None else _moments(Yp)
    out: dict[str, _Outcome] = {}
    for label in ["sample"] + [lab for lab in _labels(config) if lab != "sample"]:
        o = _Outcome(truth.norm1, truth.norm2)
        try:
            err1, err2, lm, wald = _statistics(label, config, Y, mom, truth)
            o.err1, o.err2 = err1, err2
            o.lm = None if lm is None else standardize(lm, n)
            o.wald = None if wald is None else standardize(wald, n)
            if Yp is not None:
                _, _, plm, pwald = _statistics(label, config, Yp, mom_p, truth, want_errors=False)
                o.power_lm = None if plm is None else standardize(plm, n)
                o.power_wald = None if pwald is None else standardize(pwald, n)
        except (ArithmeticError, np.linalg.LinAlgError):
            o = _Outcome(truth.norm1, truth.norm2, failed=True)
        out[label] = o
    return out


def _run_chunk(args):
    config, reps = args
    return [run_replication(config, r) for r in reps]


# -- aggregation -------------------------------------------------------------------


@dataclass
class MonteCarloReport:
    config: dict
    reps: int
    rows: dict[str, dict[str, float | None]]
    n_effective: dict[str, int]
    failures: dict[str, int]
    elapsed: float = field(default=0.0, compare=False)

    def to_csv(self) -> str:
        lines = ["estimator,metric,value,n_effective_reps"]
        for label, row in self.rows.items():
            for metric in METRICS:
                val = row.get(metric)
                text = "NA" if val is None else repr(float(val))
                lines.append(f"{label},{metric},{text},{self.n_effective[label]}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "reps": self.reps,
            "elapsed_seconds": self.elapsed,
            "estimators": {
                label: {**row, "n_effective_reps": self.n_effective[label], "failures": self.failures[label]}
                for label, row in self.rows.items()
            },
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def format_table(self) -> str:
        labels = list(self.rows)
        width = max(12, *(len(lab) + 2 for lab in labels))
        head = f"{'':<12}" + "".join(f"{lab:>{width}}" for lab in labels)
        lines = [head]
        for metric in METRICS:
            cells = []
            for lab in labels:
                val = self.rows[lab].get(metric)
                cells.append(f"{'NA' if val is None else f'{val:.3f}':>{width}}")
            lines.append(f"{metric:<12}" + "".join(cells))
        return "\n".join(lines)


def _rate(values: list[float], alpha: float, rejection: str) -> float | None:
    if not values:
        return None
    z = np.asarray(values)
    if rejection == "two-sided":
        return float(np.mean(np.abs(z) > gaussian_upper_quantile(alpha / 2)))
    return float(np.mean(z > gaussian_upper_quantile(alpha)))


def aggregate(config: StudyConfig, outcomes: list[dict[str, _Outcome]], elapsed: float = 0.0) -> MonteCarloReport:
    rows, n_eff, failures = {}, {}, {}
    for label in _labels(config):
        ok = [(i, rep[label]) for i, rep in enumerate(outcomes) if not rep[label].failed]
        failures[label] = len(outcomes) - len(ok)
        n_eff[label] = len(ok)
        row: dict[str, float | None] = dict.fromkeys(METRICS)
        if ok:
            row["mse1"] = mse_relative([o.err1 for _, o in ok], [o.norm1 for _, o in ok])
            if all(o.err2 is not None for _, o in ok):
                row["mse2"] = mse_relative([o.err2 for _, o in ok], [o.norm2 for _, o in ok])
            both = [(o, outcomes[i]["sample"]) for i, o in ok if not outcomes[i]["sample"].failed]
            if both:
                row["prial1"] = prial([o.err1 for o, _ in both], [s.err1 for _, s in both])
                if all(o.err2 is not None and s.err2 is not None for o, s in both):
                    row["prial2"] = prial([o.err2 for o, _ in both], [s.err2 for _, s in both])
            for metric, attr in (("size_lm", "lm"), ("size_wald", "wald"), ("power_lm", "power_lm"), ("power_wald", "power_wald")):
                vals = [getattr(o, attr) for _, o in ok]
                if all(x is not None for x in vals):
                    row[metric] = _rate(vals, config.alpha, config.rejection)
        rows[label] = row
    return MonteCarloReport(config.to_dict(), len(outcomes), rows, n_eff, failures, elapsed)


def run_study(config: StudyConfig, workers: int = 1, progress=None) -> MonteCarloReport:
    """Run every replication of ``config`` and aggregate the metrics.

    Parameters
    ----------
    workers : int
        Number of processes.  Output does not depend on it.
    progress : callable, optional
        Called with the number of finished replications.
    """
    t0 = time.perf_counter()
    reps = list(range(config.reps))
    if workers <= 1:
        outcomes = []
        for r in reps:
            outcomes.append(run_replication(config, r))
            if progress is not None:
                progress(len(outcomes))
    else:
        size = max(1, min(50, config.reps // (4 * workers) or 1))
        chunks = [(config, reps[i : i + size]) for i in range(0, len(reps), size)]
        outcomes = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, chunks):
                outcomes.extend(part)
                if progress is not None:
                    progress(len(outcomes))
    return aggregate(config, outcomes, time.perf_counter() - t0)
