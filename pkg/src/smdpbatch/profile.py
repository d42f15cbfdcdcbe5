"""Linear latency/energy model of a batch server and the quantities derived from it.

Units are fixed throughout the package: time in ms, energy in mJ, rates in
requests/ms. Power is then mJ/ms, i.e. W.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from .exceptions import ConfigError, DomainError, FitError, ModelViolationError

PROFILE_UNITS = {"time": "ms", "energy": "mJ"}
BUNDLED_PROFILES = ("googlenet-p4",)


@dataclass(frozen=True)
class ServiceProfile:
    """Batch processing time ``alpha*b + tau0`` and energy ``beta*b + zeta0``.

    Parameters
    ----------
    alpha : float
        Latency per request in a batch (ms/request), > 0.
    tau0 : float
        Fixed latency of one batch (ms), >= 0.
    beta : float
        Energy per request (mJ/request), > 0.
    zeta0 : float
        Fixed energy of one batch (mJ), >= 0.
    b_max : int
        Largest batch the server accepts.
    """

    alpha: float
    tau0: float
    beta: float
    zeta0: float
    b_max: int
    name: str = ""

    def __post_init__(self):
        for field in ("alpha", "tau0", "beta", "zeta0"):
            value = getattr(self, field)
            if not np.isfinite(value):
                raise ConfigError(f"{field} must be finite, got {value!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError(f"alpha and beta must be > 0, got alpha={self.alpha}, beta={self.beta}")
        if self.tau0 < 0 or self.zeta0 < 0:
            raise ConfigError(f"tau0 and zeta0 must be >= 0, got tau0={self.tau0}, zeta0={self.zeta0}")
        if int(self.b_max) != self.b_max or self.b_max < 1:
            raise ConfigError(f"b_max must be an integer >= 1, got {self.b_max!r}")
        object.__setattr__(self, "b_max", int(self.b_max))

    def latency(self, b):
        """Batch processing time tau[b] in ms (vectorised, no range check)."""
        return self.alpha * np.asarray(b, dtype=float) + self.tau0

    def energy(self, b):
        """Batch energy zeta[b] in mJ (vectorised, no range check)."""
        return self.beta * np.asarray(b, dtype=float) + self.zeta0

    @property
    def batch_sizes(self) -> np.ndarray:
        return np.arange(1, self.b_max + 1)

    @property
    def max_throughput(self) -> float:
        """mu[b_max], the largest sustainable service rate (requests/ms)."""
        return self.b_max / float(self.latency(self.b_max))

    def with_b_max(self, b_max: int) -> "ServiceProfile":
        return ServiceProfile(self.alpha, self.tau0, self.beta, self.zeta0, b_max, self.name)

    def to_dict(self) -> dict:
        out = {
            "alpha": self.alpha,
            "tau0": self.tau0,
            "beta": self.beta,
            "zeta0": self.zeta0,
            "b_max": self.b_max,
            "units": dict(PROFILE_UNITS),
        }
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceProfile":
        units = data.get("units")
        if units is None:
            raise ConfigError("profile must declare units {'time': 'ms', 'energy': 'mJ'}")
        if dict(units) != PROFILE_UNITS:
            raise ConfigError(f"unsupported profile units {units!r}; expected {PROFILE_UNITS!r}")
        missing = [k for k in ("alpha", "tau0", "beta", "zeta0", "b_max") if k not in data]
        if missing:
            raise ConfigError(f"profile is missing fields: {', '.join(missing)}")
        return cls(
            alpha=float(data["alpha"]),
            tau0=float(data["tau0"]),
            beta=float(data["beta"]),
            zeta0=float(data["zeta0"]),
            b_max=data["b_max"],
            name=str(data.get("name", "")),
        )


@dataclass(frozen=True)
class Workload:
    """Poisson arrival stream with rate ``lam`` (requests/ms)."""

    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ConfigError(f"arrival rate must be finite and > 0, got {self.lam!r}")

    @classmethod
    def from_rho(cls, profile: ServiceProfile, rho: float) -> "Workload":
        """Arrival rate giving traffic intensity ``rho`` against ``mu[b_max]``."""
        if not rho > 0:
            raise ConfigError(f"rho must be > 0, got {rho!r}")
        return cls(rho * profile.max_throughput)


@dataclass(frozen=True)
class Weights:
    """Latency weight ``w1`` and energy weight ``w2`` of the objective."""

    w1: float = 1.0
    w2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.w1) and np.isfinite(self.w2)):
            raise ConfigError("weights must be finite")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError(f"weights must be >= 0, got w1={self.w1}, w2={self.w2}")
        if self.w1 + self.w2 <= 0:
            raise ConfigError("at least one weight must be positive")


@dataclass(frozen=True)
class TrafficIntensity:
    rho: float
    stable: bool


@dataclass(frozen=True)
class ProfileFit:
    """Result of :func:`fit_linear_profile`."""

    profile: ServiceProfile
    latency_rmse: float
    energy_rmse: float


def _check_batch(profile: ServiceProfile, b) -> int:
    if int(b) != b or not 1 <= b <= profile.b_max:
        raise DomainError(f"batch size must be an integer in [1, {profile.b_max}], got {b!r}")
    return int(b)


def profile_metrics(profile: ServiceProfile, b: int) -> dict:
    """Latency, energy, throughput and energy efficiency of a batch of ``b`` requests."""
    b = _check_batch(profile, b)
    latency = float(profile.latency(b))
    energy = float(profile.energy(b))
    return {
        "latency": latency,
        "energy": energy,
        "throughput": b / latency,
        "energy_efficiency": b / energy,
    }


def traffic_intensity(profile: ServiceProfile, workload: Workload) -> TrafficIntensity:
    """``rho = lam * tau[b_max] / b_max``; rho >= 1 is reported, not rejected."""
    rho = workload.lam * float(profile.latency(profile.b_max)) / profile.b_max
    return TrafficIntensity(rho=rho, stable=rho < 1)


def _ols(b: np.ndarray, v: np.ndarray):
    design = np.column_stack([b, np.ones_like(b)])
    (slope, intercept), *_ = np.linalg.lstsq(design, v, rcond=None)
    return float(slope), float(intercept)


def _series(samples, label):
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FitError(f"{label} samples must be a sequence of (b, value) pairs")
    if len(arr) < 2:
        raise FitError(f"{label} needs at least 2 samples, got {len(arr)}")
    b, v = arr[:, 0], arr[:, 1]
    if not (np.all(np.isfinite(arr))):
        raise FitError(f"{label} samples must be finite")
    if np.any(b < 1) or np.any(v < 0):
        raise FitError(f"{label} samples need b >= 1 and values >= 0")
    if np.unique(b).size < 2:
        raise FitError(f"{label} samples need at least 2 distinct batch sizes (degenerate design)")
    return b, v


def fit_linear_profile(
    latency_samples: Sequence[tuple[float, float]],
    energy_samples: Sequence[tuple[float, float]],
    b_max: int,
) -> ProfileFit:
    """Least-squares fit of the linear latency and energy models.

    Negative intercepts are clamped to zero with a warning; a non-positive
    slope violates the model and raises :class:`ModelViolationError`.
    """
    fitted = {}
    rmse = {}
    for label, samples, slope_name, icpt_name in (
        ("latency", latency_samples, "alpha", "tau0"),
        ("energy", energy_samples, "beta", "zeta0"),
    ):
        b, v = _series(samples, label)
        slope, intercept = _ols(b, v)
        if slope <= 0:
            raise ModelViolationError(f"fitted {label} slope {slope:.6g} is not positive")
        if intercept < 0:
            warnings.warn(
                f"fitted {label} intercept {intercept:.6g} is negative; clamped to 0",
                RuntimeWarning,
                stacklevel=2,
            )
            intercept = 0.0
        fitted[slope_name] = slope
        fitted[icpt_name] = intercept
        rmse[label] = float(np.sqrt(np.mean((slope * b + intercept - v) ** 2)))
    profile = ServiceProfile(b_max=b_max, **fitted)
    return ProfileFit(profile, rmse["latency"], rmse["energy"])


def arrival_count_pmf(workload: Workload, duration: float, k_max: int):
    """Poisson probabilities of ``0..k_max`` arrivals within ``duration`` ms.

    Returns ``(pmf, tail)`` where ``tail = 1 - sum(pmf)`` is the mass above
    ``k_max``. The multiplicative recurrence is used while ``exp(-lam*t)`` is
    representable; beyond that the terms are evaluated in log space.
    """
    if duration < 0 or not np.isfinite(duration):
        raise DomainError(f"duration must be finite and >= 0, got {duration!r}")
    if int(k_max) != k_max or k_max < 0:
        raise DomainError(f"k_max must be an integer >= 0, got {k_max!r}")
    return poisson_pmf(workload.lam * duration, int(k_max))


def poisson_pmf(mean: float, k_max: int):
    """``(pmf[0..k_max], tail)`` for a Poisson variable with the given mean."""
    k_max = int(k_max)
    pmf = np.zeros(k_max + 1)
    if mean == 0:
        pmf[0] = 1.0
        return pmf, 0.0
    p0 = math.exp(-mean)
    if p0 > 1e-300:
        pmf[0] = p0
        for k in range(k_max):
            pmf[k + 1] = pmf[k] * mean / (k + 1)
    else:
        k = np.arange(k_max + 1)
        pmf = np.exp(k * math.log(mean) - mean - gammaln(k + 1))
    # upper tail through the survival function, not 1 - sum, to keep small tails accurate
    tail = float(poisson.sf(k_max, mean))
    total = pmf.sum()
    if abs(total + tail - 1.0) > 1e-12:
        tail = max(0.0, 1.0 - total)
    return pmf, tail


def load_profile(source) -> ServiceProfile:
    """Load a profile from a JSON path or the name of a bundled profile."""
    if isinstance(source, ServiceProfile):
        return source
    if isinstance(source, dict):
        return ServiceProfile.from_dict(source)
    name = str(source)
    if name in BUNDLED_PROFILES or name.removesuffix(".json") in BUNDLED_PROFILES:
        text = resources.files("smdpbatch.data").joinpath(name.removesuffix(".json") + ".json").read_text()
    else:
        path = Path(name)
        if not path.exists():
            raise ConfigError(f"profile file not found: {path}")
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"profile {name} is not valid JSON: {exc}") from exc
    return ServiceProfile.from_dict(data)


def save_profile(profile: ServiceProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n")
