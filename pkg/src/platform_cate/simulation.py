"""Data-generating processes and Monte Carlo replication studies.

Random numbers come from numpy's ``Philox`` counter-based generator; the
stream for replication ``r`` is keyed by ``SeedSequence([seed, r])`` so a
replication's data do not depend on how many replications run or on the
degree of parallelism.  All fractions of a study reuse the same base draws
for a replication (common random numbers).
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ContrastSpec, TrialDataset
from .exceptions import ConfigError, PlatformCateError, StudyFailureError
from .estimators import ESTIMATOR_ORDER, fit_nuisances, resolve_estimators, ESTIMATORS
from .regression import DesignSpec

GENERATOR_NAME = "numpy.random.Philox(SeedSequence([seed, rep]))"
DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_METRICS = ("bias2", "variance", "mse", "coverage")
ALL_METRICS = ("bias", "bias2", "variance", "mse", "coverage", "mean_se", "mc_sd", "mc_se_bias", "n_ok", "n_failed")
PAIR_METRICS = ("se_ratio", "var_ratio", "control_var_ratio", "control_se_ratio")
DEFAULT_PAIRS = (("OR-oc", "OR-ac"), ("DR-oc", "DR-ac"))
MAX_FAILURE_RATE = 0.10

# two-arm layout: arm 1 = A, arm 2 = B; windows on the entry-time rank (fractions of n).
# The first 10% of entrants see only control; A and B overlap on ranks [0.6, 0.7).
TWO_ARM_WINDOWS = {1: (0.1, 0.7), 2: (0.6, 1.0)}
TWO_ARM_CONTRASTS = {
    "A|VA=1": ContrastSpec(1, {1: 1}),
    "A|VA=1,VB=0": ContrastSpec(1, {1: 1, 2: 0}),
    "A|VA=1,VB=1": ContrastSpec(1, {1: 1, 2: 1}),
    "B|VB=1": ContrastSpec(2, {2: 1}),
    "B|VA=0,VB=1": ContrastSpec(2, {1: 0, 2: 1}),
    "B|VA=1,VB=1": ContrastSpec(2, {1: 1, 2: 1}),
}

KAPPA3_NOTE = "entry-time threshold value (not its quantile level)"


@dataclass
class ScenarioConfig:
    """Parameters of one simulation scenario.

    ``fractions`` is the grid of target concurrent fractions.  In
    deterministic mode exactly ``round(fraction * n)`` units are concurrent:
    the earliest entrants when ``concurrent_side="early"``, the latest when
    ``"late"``.  In stochastic mode the same entry-time threshold enters the
    availability probability.
    """

    name: str = "scenario"
    n: int = 1000
    reps: int = 2000
    seed: int = 20240101
    fractions: tuple = DEFAULT_FRACTIONS
    availability_mode: str = "deterministic"
    outcome_model: str = "correct"
    treatment_model: str = "correct"
    arms_mode: str = "single"
    effect: float = 0.8
    effects: tuple = (0.5, 1.0)
    estimators: tuple = ESTIMATOR_ORDER
    metrics: tuple = DEFAULT_METRICS
    pi_all: str = "product"
    control_drift: float = 0.0
    concurrent_side: str = "early"

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.effects = tuple(float(x) for x in self.effects)
        self.estimators = tuple(resolve_estimators(list(self.estimators)))
        self.metrics = tuple(self.metrics)
        self.validate()

    def validate(self):
        if self.n < 10:
            raise ConfigError(f"n must be at least 10, got {self.n}")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if not self.fractions or any(not 0 < f < 1 for f in self.fractions):
            raise ConfigError(f"fractions must lie in (0, 1), got {self.fractions}")
        choices = {
            "availability_mode": ("deterministic", "stochastic"),
            "outcome_model": ("correct", "intercept-only"),
            "treatment_model": ("correct", "intercept-only"),
            "arms_mode": ("single", "two-arm"),
            "pi_all": ("product", "logistic"),
            "concurrent_side": ("early", "late"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        bad = [m for m in self.metrics if m not in ALL_METRICS + PAIR_METRICS]
        if bad:
            raise ConfigError(f"unknown metrics {bad}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.arms_mode == "two-arm" and self.availability_mode != "deterministic":
            raise ConfigError("the two-arm scenario supports deterministic availability only")

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def outcome_design(self):
        return DesignSpec.full() if self.outcome_model == "correct" else DesignSpec.intercept_only()

    @property
    def treatment_design(self):
        return DesignSpec.full() if self.treatment_model == "correct" else DesignSpec.intercept_only()

    def cells(self):
        """(contrast label, fraction, ContrastSpec) for every analysis cell."""
        if self.arms_mode == "two-arm":
            return [(label, None, c) for label, c in TWO_ARM_CONTRASTS.items()]
        return [("arm1|V1=1", f, ContrastSpec(1)) for f in self.fractions]


# ---------------------------------------------------------------------------
# data-generating processes
# ---------------------------------------------------------------------------


def rng_for(seed, rep):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


@dataclass(frozen=True, eq=False)
class BaseDraws:
    E: np.ndarray
    UW: np.ndarray
    eps: np.ndarray
    uA: np.ndarray
    uV: np.ndarray
    uT: np.ndarray | None = None


def base_draws(config: ScenarioConfig, rep: int) -> BaseDraws:
    """Fixed-order draws for one replication, shared across fractions."""
    g = rng_for(config.seed, rep)
    n = config.n
    E = g.standard_normal(n)
    UW = g.standard_normal(n)
    eps = g.standard_normal(n)
    uA = g.random(n)
    uV = g.random(n)
    uT = g.random(n) if config.arms_mode == "two-arm" else None
    return BaseDraws(E, UW, eps, uA, uV, uT)


def _covariate(E, UW):
    kappa1 = np.mean(0.8 * E)
    return -kappa1 + 0.8 * E + UW


def threshold_for(E, fraction, side="early"):
    """Entry-time threshold putting exactly ``round(fraction * n)`` units on the concurrent side.

    ``side="early"`` means concurrent units have ``E < t``; ``"late"`` means ``E > t``.
    """
    n = E.shape[0]
    m = int(round(fraction * n))
    m = min(max(m, 1), n - 1)
    s = np.sort(E)
    j = m if side == "early" else n - m
    # midpoint between neighbouring order statistics
    return 0.5 * (s[j - 1] + s[j])


def generate_single_arm(config: ScenarioConfig, rep: int, fraction: float | None = None,
                        draws: BaseDraws | None = None) -> TrialDataset:
    """One dataset from the single-arm DGP.

    Steps: ``E ~ N(0,1)``; ``W = -k1 + 0.8E + N(0,1)``; availability from
    the entry-time threshold ``t`` (deterministic) or
    ``Bernoulli(expit(s * (-k4 + 0.5E)))`` with ``k4 = t + mean(0.5E)`` and
    ``s = -1`` for early, ``+1`` for late concurrency (stochastic);
    ``A ~ Bernoulli(expit(-k2 + 0.8W))`` when available, with ``k2`` the mean
    of ``0.8W`` over all ``n`` units; ``Y = 0.8W + 0.5E + N(0,1) + effect * A``.
    ``control_drift`` shifts the outcome of non-concurrent units.
    """
    fraction = config.fractions[0] if fraction is None else fraction
    d = draws if draws is not None else base_draws(config, rep)
    E = d.E
    W = _covariate(E, d.UW)
    early = config.concurrent_side == "early"
    t = threshold_for(E, fraction, config.concurrent_side)
    if config.availability_mode == "deterministic":
        V = E < t if early else E > t
    else:
        # kappa4 = threshold + mean(0.5E); early mirrors the late form under E -> -E
        sign = -1.0 if early else 1.0
        kappa4 = t + np.mean(0.5 * E)
        V = d.uV < expit(sign * (-kappa4 + 0.5 * E))
    kappa2 = np.mean(0.8 * W)
    A = V & (d.uA < expit(-kappa2 + 0.8 * W))
    Y0 = 0.8 * W + 0.5 * E + d.eps + config.control_drift * ~V
    Y = Y0 + config.effect * A
    order = np.argsort(E, kind="stable")
    avail = np.column_stack([np.ones_like(V), V]).astype(np.int8)
    return TrialDataset(
        E[order], W[order, None], avail[order], A[order].astype(int), Y[order],
        covariate_names=("w",),
        metadata={"rep": rep, "fraction": fraction, "threshold": float(t),
                  "availability_mode": config.availability_mode, "kappa3": KAPPA3_NOTE},
    )


def two_arm_probabilities(W, VA, VB):
    """Assignment probabilities (control, A, B) per unit for the two-arm DGP."""
    s = -np.mean(0.8 * W) + 0.8 * W
    p = np.zeros((W.shape[0], 3))
    p[:, 0] = 1.0
    only_a = VA & ~VB
    only_b = ~VA & VB
    both = VA & VB
    q = expit(s)
    p[only_a, 1] = q[only_a]
    p[only_b, 2] = q[only_b]
    es = np.exp(s[both])
    tau = 1.0 + 2.0 * es
    p[both, 1] = es / tau
    p[both, 2] = es / tau
    p[:, 0] = 1.0 - p[:, 1] - p[:, 2]
    return p


def generate_two_arm(config: ScenarioConfig, rep: int, draws: BaseDraws | None = None) -> TrialDataset:
    """One dataset from the two-arm DGP (arm 1 = A, arm 2 = B)."""
    d = draws if draws is not None else base_draws(config, rep)
    n = config.n
    E = d.E
    W = _covariate(E, d.UW)
    rank = np.empty(n, dtype=int)
    rank[np.argsort(E, kind="stable")] = np.arange(n)
    (a0, a1), (b0, b1) = TWO_ARM_WINDOWS[1], TWO_ARM_WINDOWS[2]
    VA = (rank >= a0 * n) & (rank < a1 * n)
    VB = (rank >= b0 * n) & (rank < b1 * n)
    p = two_arm_probabilities(W, VA, VB)
    cum = np.cumsum(p, axis=1)
    u = d.uT if d.uT is not None else d.uA
    T = (u[:, None] >= cum[:, :2]).sum(axis=1)
    dA, dB = config.effects
    Y = 0.8 * W + 0.5 * E + d.eps + dA * (T == 1) + dB * (T == 2)
    order = np.argsort(E, kind="stable")
    avail = np.column_stack([np.ones(n), VA, VB]).astype(np.int8)
    return TrialDataset(E[order], W[order, None], avail[order], T[order], Y[order],
                        covariate_names=("w",), metadata={"rep": rep})


def generate(config: ScenarioConfig, rep: int, fraction=None, draws=None) -> TrialDataset:
    if config.arms_mode == "two-arm":
        return generate_two_arm(config, rep, draws)
    return generate_single_arm(config, rep, fraction, draws)


def true_estimand(config: ScenarioConfig, contrast: ContrastSpec | None = None) -> float:
    """Analytic cATE: the effects are homogeneous, so every conditioning pattern gives the same value."""
    if config.arms_mode == "two-arm":
        k = 1 if contrast is None else contrast.treated_arm
        return float(config.effects[k - 1])
    return float(config.effect)


# ---------------------------------------------------------------------------
# replication study
# ---------------------------------------------------------------------------


@dataclass
class StudyResult:
    """Raw per-replication output and its aggregation.

    ``raw[(cell_label, fraction, estimator)]`` maps field name to an array of
    length ``reps`` (NaN where the replication failed).
    """

    config: ScenarioConfig
    raw: dict
    truth: dict
    failures: dict
    wall_time: float = 0.0
    metrics: "MetricsTable" = None


RAW_FIELDS = ("point", "se", "covered", "mu0", "control_se")


def _analyze_rep(config: ScenarioConfig, rep: int):
    """All cells and estimators for one replication; returns {(label, frac, est): tuple}."""
    draws = base_draws(config, rep)
    out = {}
    avail = "fitted" if config.availability_mode == "stochastic" else "deterministic"
    for label, frac, contrast in config.cells():
        truth = true_estimand(config, contrast)
        try:
            ds = generate(config, rep, frac, draws)
            nz = None
            if any(e != "naive" for e in config.estimators):
                nz = fit_nuisances(ds, contrast, config.outcome_design, config.treatment_design,
                                   availability=avail, pi_all=config.pi_all)
        except PlatformCateError as exc:
            for est in config.estimators:
                out[(label, frac, est)] = type(exc).__name__
            continue
        for est in config.estimators:
            try:
                r = ESTIMATORS[est](ds, contrast, nz)
                out[(label, frac, est)] = (
                    r.point, r.se, float(r.covers(truth)),
                    r.extras.get("mu0", np.nan), r.extras.get("control_se", np.nan),
                )
            except PlatformCateError as exc:
                out[(label, frac, est)] = type(exc).__name__
    return out


def _analyze_chunk(args):
    config, reps = args
    return [_analyze_rep(config, r) for r in reps]


def default_jobs():
    try:
        return max(1, int(os.environ.get("PLATFORM_CATE_JOBS", "1")))
    except ValueError:
        return 1


def run_study(config: ScenarioConfig, estimators=None, jobs: int | None = None) -> StudyResult:
    """Replicate, estimate and aggregate.

    Replication ``r`` is a pure function of ``(config, r)``, so results are
    identical for any ``jobs``.  Estimator failures are counted per cell; a
    cell whose failure rate exceeds 10% aborts the study.
    """
    if estimators is not None:
        config = dataclasses.replace(config, estimators=tuple(resolve_estimators(estimators)))
    if config.reps < 2:
        raise ConfigError("reps >= 2 required")
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    t0 = time.perf_counter()
    reps = list(range(config.reps))
    if jobs == 1:
        per_rep = [_analyze_rep(config, r) for r in reps]
    else:
        chunks = [reps[i::jobs] for i in range(jobs)]
        per_rep = [None] * config.reps
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for chunk, res in zip(chunks, ex.map(_analyze_chunk, [(config, c) for c in chunks])):
                for r, v in zip(chunk, res):
                    per_rep[r] = v
    raw, failures, truth = {}, {}, {}
    for label, frac, contrast in config.cells():
        truth[(label, frac)] = true_estimand(config, contrast)
        for est in config.estimators:
            key = (label, frac, est)
            arr = np.full((config.reps, len(RAW_FIELDS)), np.nan)
            fails = {}
            for r, res in enumerate(per_rep):
                v = res[key]
                if isinstance(v, str):
                    fails[v] = fails.get(v, 0) + 1
                else:
                    arr[r] = v
            raw[key] = {f: arr[:, j] for j, f in enumerate(RAW_FIELDS)}
            failures[key] = fails
            n_fail = sum(fails.values())
            if n_fail > MAX_FAILURE_RATE * config.reps:
                raise StudyFailureError(
                    f"{est} failed in {n_fail} of {config.reps} replications at {label}, "
                    f"fraction {frac}: {fails}"
                )
    result = StudyResult(config, raw, truth, failures, time.perf_counter() - t0)
    result.metrics = MetricsTable.from_study(result)
    return result


@dataclass
class MetricsTable:
    """Aggregated performance metrics.

    ``rows`` is a list of ``(scenario, contrast, fraction, estimator, metric, value)``.
    Pair metrics use the estimator label ``"A/B"``.
    """

    scenario: str
    rows: list = field(default_factory=list)

    @classmethod
    def from_study(cls, study: StudyResult, pairs=DEFAULT_PAIRS):
        cfg = study.config
        t = cls(cfg.name)
        for label, frac, _ in cfg.cells():
            truth = study.truth[(label, frac)]
            for est in cfg.estimators:
                raw = study.raw[(label, frac, est)]
                for m, v in cell_metrics(raw, truth, sum(study.failures[(label, frac, est)].values())).items():
                    t.rows.append((cfg.name, label, frac, est, m, v))
            for a, b in pairs:
                if a in cfg.estimators and b in cfg.estimators:
                    ra, rb = study.raw[(label, frac, a)], study.raw[(label, frac, b)]
                    for m, v in pair_metrics(ra, rb).items():
                        t.rows.append((cfg.name, label, frac, f"{a}/{b}", m, v))
        return t

    def get(self, estimator, metric, fraction=None, contrast=None):
        for sc, c, f, e, m, v in self.rows:
            if e == estimator and m == metric and (contrast is None or c == contrast) and (
                fraction is None or f == fraction
            ):
                return v
        raise KeyError((estimator, metric, fraction, contrast))

    def series(self, estimator, metric, contrast=None):
        """Values over the fraction grid, in grid order."""
        return [v for sc, c, f, e, m, v in self.rows
                if e == estimator and m == metric and (contrast is None or c == contrast)]

    def select(self, metrics):
        return MetricsTable(self.scenario, [r for r in self.rows if r[4] in metrics])

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.rows, columns=["scenario", "contrast", "fraction", "estimator", "metric", "value"])

    def csv_text(self, metrics=None):
        rows = self.rows if metrics is None else [r for r in self.rows if r[4] in metrics]
        lines = ["scenario,contrast,fraction,estimator,metric,value"]
        for sc, c, f, e, m, v in rows:
            fs = "" if f is None else f"{f:g}"
            lines.append(f"{sc},{c},{fs},{e},{m},{v!r}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path, metrics=None):
        text = self.csv_text(metrics)
        Path(path).write_text(text, encoding="utf-8")
        return text.count("\n") - 1


def cell_metrics(raw, truth, n_failed=0):
    ok = ~np.isnan(raw["point"])
    x = raw["point"][ok]
    se = raw["se"][ok]
    R = x.shape[0]
    bias = float(x.mean() - truth)
    var = float(np.mean((x - x.mean()) ** 2))
    return {
        "bias": bias,
        "bias2": bias**2,
        "variance": var,
        "mse": float(np.mean((x - truth) ** 2)),
        "coverage": float(raw["covered"][ok].mean()),
        "mean_se": float(se.mean()),
        "mc_sd": math.sqrt(var),
        "mc_se_bias": math.sqrt(var / R),
        "n_ok": float(R),
        "n_failed": float(n_failed),
    }


def pair_metrics(ra, rb):
    ok = ~np.isnan(ra["point"]) & ~np.isnan(rb["point"])
    out = {
        "se_ratio": float(ra["se"][ok].mean() / rb["se"][ok].mean()),
        "var_ratio": float(np.var(ra["point"][ok]) / np.var(rb["point"][ok])),
    }
    ca, cb = ra["control_se"][ok], rb["control_se"][ok]
    if not (np.isnan(ca).any() or np.isnan(cb).any()):
        out["control_var_ratio"] = float(np.mean(ca**2) / np.mean(cb**2))
        out["control_se_ratio"] = float(ca.mean() / cb.mean())
    return out


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

_INT_KEYS = {"n", "reps", "seed"}
_FLOAT_KEYS = {"effect", "control_drift"}
_TUPLE_FLOAT_KEYS = {"fractions", "effects"}
_TUPLE_STR_KEYS = {"estimators", "metrics"}
_STR_KEYS = {"name", "availability_mode", "outcome_model", "treatment_model", "arms_mode", "pi_all",
             "concurrent_side"}


def parse_scenario(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Errors cite line numbers."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _TUPLE_FLOAT_KEYS:
                out[key] = tuple(float(v) for v in value.split(",") if v.strip())
            elif key in _TUPLE_STR_KEYS:
                out[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key in _STR_KEYS:
                out[key] = value
            else:
                raise ConfigError(f"unknown key {key!r}", line=lineno)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}", line=lineno) from None
    return out


def load_scenario(path, **overrides) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    values = parse_scenario(path.read_text(encoding="utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**values)


# ---------------------------------------------------------------------------
# synthetic case-study data
# ---------------------------------------------------------------------------


def generate_actt_like(n=1000, seed=7, effect=-1.3, drift=0.0, stage_split=0.45):
    """Synthetic two-stage trial with the case-study column layout.

    Columns: ``entry_day, age, sex, race, bmi, region, severity, arm, recovery_days``.
    Arm 1 is available only for ``entry_day`` after the stage split, so
    earlier controls are non-concurrent.  ``drift`` adds a nonlinear shift
    to the outcome of stage-one participants.

    Returns
    -------
    frame : pandas.DataFrame
    threshold : float
        Entry day separating the stages.
    """
    import pandas as pd

    g = rng_for(seed, 0)
    day = np.sort(g.uniform(0, 120, n)).round(2)
    threshold = float(np.quantile(day, stage_split))
    age = np.clip(g.normal(58, 14, n) + 0.03 * day, 18, 95).round(0)
    sex = g.choice(["F", "M"], n, p=[0.36, 0.64])
    race = g.choice(["asian", "black", "other", "white"], n, p=[0.12, 0.2, 0.18, 0.5])
    bmi = np.clip(g.normal(31, 6, n), 16, 60).round(1)
    region = g.choice(["eu", "us", "other"], n, p=[0.25, 0.6, 0.15])
    severity = g.choice(["4", "5", "6", "7"], n, p=[0.15, 0.4, 0.25, 0.2])
    sev = severity.astype(int)
    concurrent = day > threshold
    lin = -0.3 + 0.01 * (age - 58) - 0.15 * (sev - 5)
    arm = np.where(concurrent & (g.random(n) < expit(lin)), 1, 0)
    base = 8 + 0.05 * (age - 58) + 2.0 * (sev - 4) + 0.06 * (bmi - 31) + 0.8 * (sex == "M") - 0.01 * day
    stage1 = ~concurrent
    base = base + drift * stage1 * (1 + ((day - threshold / 2) / max(threshold, 1)) ** 2)
    y = base + effect * arm + g.normal(0, 3, n)
    frame = pd.DataFrame({
        "entry_day": day, "age": age, "sex": sex, "race": race, "bmi": bmi,
        "region": region, "severity": severity, "arm": arm, "recovery_days": y.round(3),
    })
    return frame, threshold


def actt_schema(threshold):
    from .data import Schema

    return Schema(
        entry_time="entry_day", arm="arm", outcome="recovery_days",
        covariates=["age", "bmi"], categorical=["sex", "race", "region", "severity"],
        thresholds={1: threshold},
    )
