"""Tree-structured Parzen Estimator search with an ask/tell API.

Completed trials are split by objective into a good set (top gamma
fraction, at least one trial) and a bad set. For every dimension
independently, a kernel mixture is fit over each set's values: truncated
Gaussians for numeric parameters (log-transformed for log-uniform ones,
rounded for integers) and smoothed category frequencies for categorical
parameters. Kernel widths are the distance to the nearest sorted
neighbor, floored at 1% of the range; good-set components are weighted
by squared rank so the best observations dominate the proposal density.
Candidates are drawn from the good-set mixture and the one maximizing
the density ratio good/bad is suggested. Until enough trials have
completed, parameters are drawn from their priors.

Objectives are maximized; wrap a minimization objective with
``negate(fn)``. Studies persist as a single JSON file written atomically
(temp file + rename) under an advisory file lock.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from filelock import FileLock
from scipy.special import logsumexp, ndtr, ndtri

NUMERIC_KINDS = ("float_uniform", "float_log_uniform", "int_uniform")
KINDS = ("categorical",) + NUMERIC_KINDS


class HpoError(Exception):
    pass


class UnknownTrial(HpoError):
    pass


class AlreadyComplete(HpoError):
    pass


class NoCompleteTrials(HpoError):
    pass


class AllTrialsFailed(HpoError):
    pass


class StorageUnavailable(HpoError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    domain: tuple  # categories, or (low, high)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.domain) == 0:
                raise ValueError(f"{self.name}: empty categorical domain")
        else:
            low, high = self.domain
            if not low < high:
                raise ValueError(f"{self.name}: need low < high, got {self.domain}")
            if self.kind == "float_log_uniform" and low <= 0:
                raise ValueError(f"{self.name}: log-uniform needs low > 0")

    def contains(self, value: Any) -> bool:
        if self.kind == "categorical":
            return value in self.domain
        low, high = self.domain
        if self.kind == "int_uniform":
            return isinstance(value, (int, np.integer)) and low <= value <= high
        return low <= value <= high


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[ParamSpec, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    def __getitem__(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_json(self) -> list[dict]:
        return [{"name": p.name, "kind": p.kind, "domain": list(p.domain)}
                for p in self.params]

    @classmethod
    def from_json(cls, data: Iterable[dict]) -> "SearchSpace":
        return cls(tuple(ParamSpec(d["name"], d["kind"], tuple(d["domain"])) for d in data))


@dataclass
class Trial:
    id: int
    params: dict[str, Any]
    objective: float | None = None
    state: str = "pending"  # pending | complete | failed


@dataclass(frozen=True)
class TpeSettings:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    min_bandwidth_frac: float = 0.01  # kernel width floor, fraction of the range


def define_space() -> SearchSpace:
    """The seven-parameter fine-tuning search space."""
    return SearchSpace((
        ParamSpec("optimizer", "categorical", ("adam", "sgd")),
        ParamSpec("dropout", "float_uniform", (0.3, 0.6)),
        ParamSpec("batch_size", "categorical", (32, 64, 128)),
        ParamSpec("scheduler_patience", "int_uniform", (5, 10)),
        ParamSpec("scheduler_factor", "float_uniform", (0.1, 0.5)),
        ParamSpec("weight_decay", "float_log_uniform", (1e-5, 1e-3)),
        ParamSpec("lr", "float_log_uniform", (1e-4, 1e-2)),
    ))


def split_good_bad(completed: Sequence[Trial], gamma: float) -> tuple[list[Trial], list[Trial]]:
    """Top max(1, ceil(gamma*n)) trials by objective, rest as the bad set."""
    n_good = max(1, math.ceil(gamma * len(completed)))
    ranked = sorted(completed, key=lambda t: (-t.objective, t.id))
    return ranked[:n_good], ranked[n_good:]


def _to_internal(spec: ParamSpec, values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if spec.kind == "float_log_uniform":
        return np.log(arr)
    return arr


def _internal_bounds(spec: ParamSpec) -> tuple[float, float]:
    low, high = spec.domain
    if spec.kind == "float_log_uniform":
        return math.log(low), math.log(high)
    return float(low), float(high)


def _from_internal(spec: ParamSpec, value: float) -> Any:
    low, high = spec.domain
    if spec.kind == "float_log_uniform":
        return float(min(max(math.exp(value), low), high))
    if spec.kind == "int_uniform":
        return int(min(max(round(value), low), high))
    return float(min(max(value, low), high))


class _ParzenMixture:
    """Weighted truncated-Gaussian mixture on an interval."""

    def __init__(self, mus: np.ndarray, sigmas: np.ndarray, low: float, high: float,
                 weights: np.ndarray | None = None):
        self.mus = mus
        self.sigmas = sigmas
        self.low = low
        self.high = high
        w = np.ones(len(mus)) if weights is None else np.asarray(weights, dtype=float)
        self.weights = w / w.sum()
        self._log_weights = np.log(self.weights)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.mus), size=n, p=self.weights)
        mu, sigma = self.mus[idx], self.sigmas[idx]
        a = ndtr((self.low - mu) / sigma)
        b = ndtr((self.high - mu) / sigma)
        u = rng.uniform(a, b)
        x = mu + sigma * ndtri(u)
        return np.clip(x, self.low, self.high)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)[:, None]
        mu, sigma = self.mus[None, :], self.sigmas[None, :]
        z = (x - mu) / sigma
        log_norm = np.log(ndtr((self.high - mu) / sigma) - ndtr((self.low - mu) / sigma))
        log_kernel = -0.5 * z * z - 0.5 * math.log(2 * math.pi) - np.log(sigma) - log_norm
        return logsumexp(log_kernel + self._log_weights[None, :], axis=1)


def _fit_mixture(values: np.ndarray, low: float, high: float, min_bw_frac: float,
                 weights: np.ndarray | None = None) -> _ParzenMixture:
    """Kernel per observation; width = max(nearest sorted-neighbor gap,
    a fixed fraction of the range), capped at the range."""
    span = high - low
    floor = min_bw_frac * span
    order = np.argsort(values)
    sorted_vals = values[order]
    n = len(values)
    if n == 1:
        spacing = np.array([span])
    else:
        gaps_left = np.diff(sorted_vals, prepend=sorted_vals[0])
        gaps_right = np.diff(sorted_vals, append=sorted_vals[-1])
        gaps_left[0] = np.inf
        gaps_right[-1] = np.inf
        spacing = np.minimum(gaps_left, gaps_right)
    sigmas = np.empty(n)
    sigmas[order] = np.clip(spacing, floor, span)
    return _ParzenMixture(values, sigmas, low, high, weights)


def _rank_weights(n: int) -> np.ndarray:
    # Squared rank ramp over objective-sorted trials: best point dominates.
    return np.linspace(n, 1, n) ** 2


def _sample_prior(spec: ParamSpec, rng: np.random.Generator) -> Any:
    if spec.kind == "categorical":
        return spec.domain[rng.integers(0, len(spec.domain))]
    low, high = spec.domain
    if spec.kind == "float_uniform":
        return float(rng.uniform(low, high))
    if spec.kind == "float_log_uniform":
        return float(math.exp(rng.uniform(math.log(low), math.log(high))))
    return int(rng.integers(low, high + 1))


def _suggest_numeric(spec: ParamSpec, good: np.ndarray, bad: np.ndarray,
                     rng: np.random.Generator, settings: TpeSettings) -> Any:
    low, high = _internal_bounds(spec)
    mix_good = _fit_mixture(good, low, high, settings.min_bandwidth_frac,
                            _rank_weights(len(good)))
    mix_bad = _fit_mixture(bad, low, high, settings.min_bandwidth_frac)
    candidates = mix_good.sample(rng, settings.n_candidates)
    score = mix_good.log_pdf(candidates) - mix_bad.log_pdf(candidates)
    return _from_internal(spec, float(candidates[int(np.argmax(score))]))


def _suggest_categorical(spec: ParamSpec, good: list, bad: list,
                         rng: np.random.Generator, settings: TpeSettings) -> Any:
    k = len(spec.domain)
    rank_w = _rank_weights(len(good))
    counts_good = np.array(
        [sum(w for v, w in zip(good, rank_w) if v == c) for c in spec.domain], dtype=float)
    counts_good *= len(good) / rank_w.sum()  # keep add-one smoothing comparable
    counts_bad = np.array([sum(v == c for v in bad) for c in spec.domain], dtype=float)
    p_good = (counts_good + 1.0) / (counts_good.sum() + k)
    p_bad = (counts_bad + 1.0) / (counts_bad.sum() + k)
    candidates = rng.choice(k, size=settings.n_candidates, p=p_good)
    score = np.log(p_good[candidates]) - np.log(p_bad[candidates])
    return spec.domain[int(candidates[int(np.argmax(score))])]


def suggest_params(space: SearchSpace, completed: Sequence[Trial], seed: int,
                   settings: TpeSettings = TpeSettings()) -> dict[str, Any]:
    """Propose one configuration given the completed-trial history.

    Deterministic in (history, seed). Falls back to prior sampling until
    ``settings.n_startup`` trials have completed.
    """
    rng = np.random.default_rng(seed)
    if len(completed) < settings.n_startup:
        return {p.name: _sample_prior(p, rng) for p in space.params}
    good_trials, bad_trials = split_good_bad(completed, settings.gamma)
    if not bad_trials:  # degenerate gamma/history; fall back to priors
        return {p.name: _sample_prior(p, rng) for p in space.params}
    params = {}
    for spec in space.params:
        good = [t.params[spec.name] for t in good_trials]
        bad = [t.params[spec.name] for t in bad_trials]
        if spec.kind == "categorical":
            params[spec.name] = _suggest_categorical(spec, good, bad, rng, settings)
        else:
            params[spec.name] = _suggest_numeric(
                spec, _to_internal(spec, good), _to_internal(spec, bad), rng, settings)
    return params


class Study:
    """Trial history plus optional JSON persistence."""

    def __init__(self, space: SearchSpace, path: Path | str | None = None,
                 settings: TpeSettings = TpeSettings()):
        self.space = space
        self.path = Path(path) if path else None
        self.settings = settings
        self.trials: list[Trial] = []

    # -- persistence ---------------------------------------------------

    @classmethod
    def load(cls, path: Path | str, settings: TpeSettings = TpeSettings()) -> "Study":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise StorageUnavailable(f"{path}: {exc}") from exc
        study = cls(SearchSpace.from_json(data["space"]), path, settings)
        study.trials = [
            Trial(id=t["id"], params=t["params"], objective=t["objective"], state=t["state"])
            for t in data["trials"]
        ]
        return study

    def to_json(self) -> dict:
        return {
            "space": self.space.to_json(),
            "trials": [
                {"id": t.id, "params": t.params, "objective": t.objective, "state": t.state}
                for t in self.trials
            ],
        }

    def save(self) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        if not self.path:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.path) + ".lock"):
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, suffix=".tmp")
            try:
                with os.fdopen(fd, "w") as fp:
                    json.dump(self.to_json(), fp, indent=1)
                os.replace(tmp, self.path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    # -- ask/tell ------------------------------------------------------

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.state == "complete"]

    def suggest(self, seed: int) -> Trial:
        params = suggest_params(self.space, self.completed(), seed, self.settings)
        trial = Trial(id=len(self.trials), params=params)
        self.trials.append(trial)
        self.save()
        return trial

    def _find(self, trial_id: int) -> Trial:
        for t in self.trials:
            if t.id == trial_id:
                return t
        raise UnknownTrial(str(trial_id))

    def tell(self, trial_id: int, objective: float) -> None:
        trial = self._find(trial_id)
        if trial.state != "pending":
            raise AlreadyComplete(f"trial {trial_id} is {trial.state}")
        trial.objective = float(objective)
        trial.state = "complete"
        self.save()

    def fail(self, trial_id: int) -> None:
        trial = self._find(trial_id)
        if trial.state != "pending":
            raise AlreadyComplete(f"trial {trial_id} is {trial.state}")
        trial.state = "failed"
        self.save()

    def best_trial(self) -> Trial:
        done = self.completed()
        if not done:
            raise NoCompleteTrials("study has no complete trials")
        return max(done, key=lambda t: (t.objective, -t.id))


def suggest(study: Study, seed: int) -> Trial:
    return study.suggest(seed)


def tell(study: Study, trial_id: int, objective: float) -> Study:
    study.tell(trial_id, objective)
    return study


def best_trial(study: Study) -> Trial:
    return study.best_trial()


def negate(fn: Callable[[dict], float]) -> Callable[[dict], float]:
    """Adapter turning a minimization objective into a maximized one."""
    def wrapped(params: dict) -> float:
        return -fn(params)
    return wrapped


def run_study(objective_fn: Callable[[dict], float], space: SearchSpace, n_trials: int,
              seed: int, path: Path | str | None = None,
              settings: TpeSettings = TpeSettings()) -> Study:
    """Sequential ask/evaluate/tell loop; objective is maximized.

    A trial whose objective raises is recorded as failed and excluded from
    density fitting. Raises AllTrialsFailed when nothing completes.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    study = Study(space, path, settings)
    for i in range(n_trials):
        trial_seed = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])
        trial = study.suggest(trial_seed)
        try:
            value = objective_fn(trial.params)
        except Exception:
            study.fail(trial.id)
            continue
        study.tell(trial.id, float(value))
    if not study.completed():
        raise AllTrialsFailed(f"all {n_trials} trials failed")
    return study
