"""Batch harness: config parsing, seeded Monte Carlo sweeps, replica sweeps, CSV output.

Config files are flat ``key = value`` text with section prefixes::

    kind = compare
    seed = 7
    trials = 50
    system.K = 500
    system.L = 2
    system.sigma2 = 0.01
    amp.T_max = 300
    replica.mc_samples = 100000
    sweep.param = system.M
    sweep.values = 30, 40, 50

``#`` starts a comment.  ``timing = on`` fills the ``wall_ms`` column; it is
left at 0 by default so that the CSV is a pure function of file and seed.  ``sweep.param`` names a field of one of the
sections; ``replica.alpha`` overrides the ``M / K`` ratio for replica-only
runs.  Every random draw of trial ``t`` at sweep index ``i`` comes from
``stream(seed, i, t, purpose)``, so output does not depend on thread count.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .amp import AmpConfig, NumericalFailure, map_threshold, run_decoder
from .replica import (
    ReplicaConfig,
    default_d_grid,
    eval_free_entropy,
    mmse_from_d,
    predict_pe,
    scan_extremes,
)
from .rng import stream
from .system_model import (
    SystemConfig,
    build_index_matrix,
    inject_csi_error,
    mse,
    per_user_error,
    sample_channel,
    sample_messages,
    transmit_and_despread,
)

logger = logging.getLogger(__name__)

KINDS = ("replica-curve", "phase-diagram", "amp-mse-sweep", "e2e-pe-sweep", "compare")

TRIAL_HEADER = ("sweep_param", "sweep_value", "trial", "pe", "mse", "iters", "converged", "sigma2_hat", "wall_ms")
COMPARE_HEADER = (
    "sweep_value", "phi_bayes_d", "phi_amp_d", "mse_bayes", "mse_amp",
    "pe_pred", "mse_emp", "pe_emp", "se_mse", "se_pe",
)
CURVE_HEADER = ("sweep_param", "sweep_value", "d", "phi", "se", "extremum")
PHASE_HEADER = ("sweep_param", "sweep_value", "n_local_max", "bayes_d", "amp_d", "mse_bayes", "mse_amp", "pe_pred")


class ConfigError(ValueError):
    """Malformed experiment configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ReplicaSettings:
    """Replica knobs that are not derived from the system configuration."""

    alpha: float | None = None
    mc_samples: int = 100_000
    d_max: float = 1.0
    d_min: float = 1e-7
    points: int = 400
    convention: str = "complex"


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    system: SystemConfig
    amp: AmpConfig = field(default_factory=AmpConfig)
    replica: ReplicaSettings = field(default_factory=ReplicaSettings)
    sweep_param: str | None = None
    sweep_values: tuple[float, ...] = ()
    trials: int = 1
    seed: int = 0
    out: str | None = None
    timing: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1 (got {self.trials})")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative (got {self.seed})")
        if self.sweep_param is not None:
            _split_param(self.sweep_param)
        elif self.sweep_values:
            raise ConfigError("sweep.values given without sweep.param")

    def points(self) -> list[tuple[float | None, "ExperimentSpec"]]:
        """``(value, spec)`` per sweep point; a single ``(None, self)`` without a sweep."""
        if self.sweep_param is None:
            return [(None, self)]
        return [(v, self.with_value(self.sweep_param, v)) for v in self.sweep_values]

    def with_value(self, param: str, value) -> "ExperimentSpec":
        section, name = _split_param(param)
        target = getattr(self, section)
        try:
            updated = dataclasses.replace(target, **{name: _coerce(target, name, value)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{param} = {value!r}: {exc}") from exc
        return dataclasses.replace(self, **{section: updated})

    def replica_config(self) -> ReplicaConfig:
        s, r = self.system, self.replica
        alpha = r.alpha if r.alpha is not None else s.alpha
        return ReplicaConfig(
            alpha=alpha,
            sigma2=s.sigma2,
            L=s.L,
            J_minus_1=s.J_minus_1,
            d_grid=default_d_grid(r.d_max, r.points, r.d_min),
            mc_samples=r.mc_samples,
            seed=self.seed,
            convention=r.convention,
        )


_SECTIONS = {"system": SystemConfig, "amp": AmpConfig, "replica": ReplicaSettings}


def _split_param(param: str) -> tuple[str, str]:
    section, _, name = param.partition(".")
    cls = _SECTIONS.get(section)
    if cls is None or name not in {f.name for f in dataclasses.fields(cls)}:
        raise ConfigError(f"{param!r} does not name a config field")
    return section, name


def _coerce(obj_or_cls, name: str, value):
    """Convert ``value`` (string or number) to the type of field ``name``."""
    ftype = {f.name: f.type for f in dataclasses.fields(obj_or_cls)}[name]
    ftype = str(ftype)
    if isinstance(value, str):
        text = value.strip()
        if text.lower() in ("none", "null", ""):
            return None
        if "bool" in ftype:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if "tuple" in ftype:
            return tuple(float(x) for x in text.split(","))
        if "int" in ftype and "float" not in ftype:
            return _as_int(float(text))
        if "float" in ftype:
            return float(text)
        return text
    if "int" in ftype and "float" not in ftype:
        return _as_int(value)
    return value


def _as_int(x) -> int:
    if float(x) != int(x):
        raise ValueError(f"expected an integer, got {x}")
    return int(x)


def parse_config(text: str, **overrides) -> ExperimentSpec:
    """Parse the flat ``key = value`` format into an :class:`ExperimentSpec`.

    Keyword overrides (``kind``, ``seed``, ``out``) take precedence over the file.
    """
    top: dict[str, str] = {}
    sections: dict[str, dict[str, str]] = {k: {} for k in (*_SECTIONS, "sweep")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        prefix, dot, name = key.partition(".")
        if dot:
            if prefix not in sections:
                raise ConfigError(f"line {lineno}: unknown section {prefix!r}")
            sections[prefix][name] = value
        else:
            top[key] = value

    for key, value in overrides.items():
        if value is not None:
            top[key] = str(value)

    unknown = set(top) - {"kind", "seed", "trials", "out", "timing"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "kind" not in top:
        raise ConfigError("missing 'kind'")

    sweep = sections["sweep"]
    swept = sweep.get("param") or None
    if swept:
        sec, fname = _split_param(swept)
        # the swept field may be required (system.M); give the base config a value
        first = sweep.get("values", "").split(",")[0].strip()
        sections[sec].setdefault(fname, first or "1")

    built = {}
    for name, cls in _SECTIONS.items():
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(sections[name]) - known
        if bad:
            raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        try:
            kwargs = {k: _coerce(cls, k, v) for k, v in sections[name].items()}
            built[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc

    bad = set(sweep) - {"param", "values"}
    if bad:
        raise ConfigError(f"unknown sweep keys: {sorted(bad)}")
    values: tuple[float, ...] = ()
    if sweep.get("values", "").strip():
        try:
            values = tuple(float(v) for v in sweep["values"].split(","))
        except ValueError as exc:
            raise ConfigError(f"sweep.values: {exc}") from exc
    try:
        timing = _coerce(ExperimentSpec, "timing", top.get("timing", "off"))
        spec = ExperimentSpec(
            kind=top["kind"],
            system=built["system"],
            amp=built["amp"],
            replica=built["replica"],
            sweep_param=sweep.get("param") or None,
            sweep_values=values,
            trials=int(top.get("trials", 1)),
            seed=int(top.get("seed", 0)),
            out=top.get("out"),
            timing=timing,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    # validate every sweep point up front so bad values fail before any work
    spec.points()
    return spec


def load_config(path, **overrides) -> ExperimentSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class TrialResult:
    sweep_value: float | None
    trial: int
    pe: float
    mse: float
    iterations: int
    converged: bool
    sigma2_hat: float
    wall_ms: float
    user_errors: np.ndarray | None = field(default=None, repr=False, compare=False)
    failed: bool = False


def _failed(value, trial, start) -> TrialResult:
    return TrialResult(value, trial, math.nan, math.nan, 0, False, math.nan, _ms(start), failed=True)


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1e3


def run_amp_trial(
    system: SystemConfig, amp: AmpConfig, rng: np.random.Generator, *, sweep_value=None, trial: int = 0
) -> TrialResult:
    """Decode a single sub-block; ``pe`` is the fraction of wrongly decoded rows."""
    start = time.perf_counter()
    S = sample_channel(system, rng)
    S_hat = inject_csi_error(S, system.csi_error_var, rng)
    msgs = rng.integers(0, system.n_codewords, size=system.K)
    X = build_index_matrix(msgs, system.rho_vec, system.L)
    Y = transmit_and_despread(X, S.S, system.sigma2, rng).Y
    try:
        res = run_decoder(system, amp, Y, S_hat.S)
    except NumericalFailure as exc:
        logger.warning("trial %d at %s failed: %s", trial, sweep_value, exc)
        return _failed(sweep_value, trial, start)
    X_dec = map_threshold(res.x_hat, system.rho_vec)
    errs = np.any(X_dec.entries != X.entries, axis=1)
    d = res.diagnostics
    return TrialResult(
        sweep_value, trial, float(errs.mean()), mse(res.x_hat, X),
        d.iterations, d.converged, d.sigma2_hat, _ms(start), errs,
    )


def run_e2e_trial(
    system: SystemConfig, amp: AmpConfig, rng: np.random.Generator, *, sweep_value=None, trial: int = 0
) -> TrialResult:
    """Full second phase: one channel, ``J - 1`` sub-blocks, per-user error over all of them.

    ``mse``, ``iterations`` and ``sigma2_hat`` are averaged over sub-blocks;
    ``converged`` holds only if every sub-block converged.
    """
    start = time.perf_counter()
    S = sample_channel(system, rng)
    S_hat = inject_csi_error(S, system.csi_error_var, rng)
    messages = sample_messages(system, rng)
    decoded, truth = [], []
    mses, iters, s2, conv = [], [], [], True
    for b in range(system.J_minus_1):
        X = build_index_matrix(messages[:, b], system.rho_vec, system.L)
        Y = transmit_and_despread(X, S.S, system.sigma2, rng).Y
        try:
            res = run_decoder(system, amp, Y, S_hat.S)
        except NumericalFailure as exc:
            logger.warning("trial %d at %s, block %d failed: %s", trial, sweep_value, b, exc)
            return _failed(sweep_value, trial, start)
        decoded.append(map_threshold(res.x_hat, system.rho_vec))
        truth.append(X)
        mses.append(mse(res.x_hat, X))
        iters.append(res.diagnostics.iterations)
        s2.append(res.diagnostics.sigma2_hat)
        conv &= res.diagnostics.converged
    if not truth:
        return TrialResult(sweep_value, trial, 0.0, 0.0, 0, True, math.nan, _ms(start), np.zeros(system.K, bool))
    wrong = np.zeros(system.K, dtype=bool)
    for dec, tru in zip(decoded, truth):
        wrong |= np.any(dec.entries != tru.entries, axis=1)
    return TrialResult(
        sweep_value, trial, per_user_error(decoded, truth), float(np.mean(mses)),
        int(round(np.mean(iters))), conv, float(np.mean(s2)), _ms(start), wrong,
    )


def run_two_group_trial(
    system: SystemConfig, amp: AmpConfig, rng: np.random.Generator, *, sweep_value=None, trial: int = 0
) -> TrialResult:
    """Users pick one of two groups at random; each group is an independent instance.

    The group sizes are ``Binomial(K, 1/2)``; results are pooled per user.
    """
    start = time.perf_counter()
    k1 = int(rng.binomial(system.K, 0.5))
    parts = []
    for g, k in enumerate((k1, system.K - k1)):
        if k == 0:
            continue
        rho = None if system.rho is None else system.rho[:k] if g == 0 else system.rho[k1:]
        sub = dataclasses.replace(system, K=k, rho=rho)
        parts.append((k, run_e2e_trial(sub, amp, stream_child(rng), sweep_value=sweep_value, trial=trial)))
    if any(p.failed for _, p in parts):
        return _failed(sweep_value, trial, start)
    w = np.array([k for k, _ in parts], dtype=float) / system.K
    res = [p for _, p in parts]
    return TrialResult(
        sweep_value, trial,
        float(sum(wi * r.pe for wi, r in zip(w, res))),
        float(sum(wi * r.mse for wi, r in zip(w, res))),
        max(r.iterations for r in res),
        all(r.converged for r in res),
        float(np.mean([r.sigma2_hat for r in res])),
        _ms(start),
        np.concatenate([r.user_errors for r in res]),
    )


def stream_child(rng: np.random.Generator) -> np.random.Generator:
    """Independent generator derived from ``rng`` (consumes one draw)."""
    return np.random.Generator(np.random.Philox(int(rng.integers(0, 2**63))))


# ---------------------------------------------------------------------------
# sweeps


def _run_grid(
    spec: ExperimentSpec, fn: Callable, purpose: str, threads: int
) -> list[TrialResult]:
    jobs = [
        (i, t, value, point)
        for i, (value, point) in enumerate(spec.points())
        for t in range(spec.trials)
    ]

    def work(job):
        i, t, value, point = job
        rng = stream(spec.seed, i, t, purpose)
        return fn(point.system, point.amp, rng, sweep_value=value, trial=t)

    if threads <= 1:
        return [work(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map preserves submission order, so output order is fixed
        return list(pool.map(work, jobs))


def aggregate(results: Sequence[TrialResult]) -> dict[str, float]:
    """Means and standard errors over non-failed trials."""
    ok = [r for r in results if not r.failed]
    out = {"n": len(ok), "failed": len(results) - len(ok)}
    for name in ("pe", "mse", "iterations", "sigma2_hat", "wall_ms"):
        vals = np.array([getattr(r, name) for r in ok], dtype=float)
        out[name] = float(vals.mean()) if vals.size else math.nan
        out["se_" + name] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
    out["converged"] = float(np.mean([r.converged for r in ok])) if ok else math.nan
    return out


def fmt(x) -> str:
    """Fixed CSV number format: 17 significant digits, integers without a point."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return format(x, ".17g")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return buf.getvalue()


@dataclass
class SweepOutput:
    csv: str
    failures: int = 0
    results: list = field(default_factory=list)


def run_sweep(spec: ExperimentSpec, *, threads: int = 1) -> SweepOutput:
    """Monte Carlo sweep; trial rows followed by one aggregate row per sweep value.

    ``amp-mse-sweep`` decodes one sub-block per trial, ``e2e-pe-sweep`` runs the
    full second phase.  Aggregate rows carry ``trial = mean`` and the means of
    each column; ``converged`` there is the converged fraction.
    """
    if spec.kind == "amp-mse-sweep":
        fn, purpose = run_amp_trial, "amp"
    elif spec.kind == "e2e-pe-sweep":
        fn, purpose = run_e2e_trial, "e2e"
    else:
        raise ConfigError(f"run_sweep does not handle kind {spec.kind!r}")
    param = spec.sweep_param or ""
    results = _run_grid(spec, fn, purpose, threads)
    wall = (lambda x: x) if spec.timing else (lambda x: 0)
    rows = [
        (param, r.sweep_value, r.trial, r.pe, r.mse, r.iterations, r.converged, r.sigma2_hat, wall(r.wall_ms))
        for r in results
    ]
    for value, _ in spec.points():
        agg = aggregate([r for r in results if r.sweep_value == value])
        rows.append((param, value, "mean", agg["pe"], agg["mse"], agg["iterations"],
                     agg["converged"], agg["sigma2_hat"], wall(agg["wall_ms"])))
    return SweepOutput(_csv(TRIAL_HEADER, rows), sum(r.failed for r in results), results)


def run_compare(spec: ExperimentSpec, *, threads: int = 1) -> SweepOutput:
    """Join replica predictions with single-sub-block decoder statistics.

    ``pe_emp`` converts the empirical section error rate ``p`` of the decoded
    sub-blocks into a per-user rate ``1 - (1 - p)^(J-1)``, the same
    independence step used by the prediction; ``se_pe`` follows by the delta
    method.
    """
    results = _run_grid(spec, run_amp_trial, "amp", threads)
    rows = []
    for value, point in spec.points():
        rcfg = point.replica_config()
        curve = scan_extremes(rcfg)
        mse_bayes = mmse_from_d(curve.bayes_optimal_d, rcfg.L)[1]
        mse_amp = mmse_from_d(curve.amp_d, rcfg.L)[1]
        pe_pred = predict_pe(curve.amp_d, rcfg)
        agg = aggregate([r for r in results if r.sweep_value == value])
        p, se_p = agg["pe"], agg["se_pe"]
        J = rcfg.J_minus_1
        pe_emp = 1 - (1 - p) ** J if J else 0.0
        se_pe = J * (1 - p) ** (J - 1) * se_p if J else 0.0
        rows.append((value if value is not None else "", curve.bayes_optimal_d, curve.amp_d,
                     mse_bayes, mse_amp, pe_pred, agg["mse"], pe_emp, agg["se_mse"], se_pe))
    return SweepOutput(_csv(COMPARE_HEADER, rows), sum(r.failed for r in results), results)


def run_replica_curve(spec: ExperimentSpec, *, threads: int = 1) -> SweepOutput:
    """Sampled free entropy per sweep point, followed by the refined extrema."""
    param = spec.sweep_param or ""
    points = spec.points()

    def work(item):
        value, point = item
        rcfg = point.replica_config()
        curve = scan_extremes(rcfg)
        rows = [(param, value, d, phi, se, "") for d, phi, se in curve.points]
        for d, kind in curve.extrema:
            phi, se = eval_free_entropy(d, rcfg)
            rows.append((param, value, d, phi, se, kind))
        return rows

    blocks = _map(work, points, threads)
    return SweepOutput(_csv(CURVE_HEADER, [r for b in blocks for r in b]))


def run_phase_diagram(spec: ExperimentSpec, *, threads: int = 1) -> SweepOutput:
    """Extremum count and predicted MSE per sweep point."""
    param = spec.sweep_param or ""

    def work(item):
        value, point = item
        rcfg = point.replica_config()
        curve = scan_extremes(rcfg)
        return (param, value, curve.n_local_max, curve.bayes_optimal_d, curve.amp_d,
                mmse_from_d(curve.bayes_optimal_d, rcfg.L)[1],
                mmse_from_d(curve.amp_d, rcfg.L)[1],
                predict_pe(curve.amp_d, rcfg))

    rows = _map(work, spec.points(), threads)
    return SweepOutput(_csv(PHASE_HEADER, rows))


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def find_transitions(values: Sequence[float], n_max: Sequence[int]) -> tuple[float | None, float | None]:
    """Onset and end of the bistable window along an increasing sweep.

    Returns ``(alpha_1, alpha_2)``: the first value with two or more maxima,
    and the first value after it with a single maximum.  Either is ``None``
    if not observed.
    """
    a1 = a2 = None
    for v, c in zip(values, n_max):
        if a1 is None and c >= 2:
            a1 = v
        elif a1 is not None and c == 1:
            a2 = v
            break
    return a1, a2


RUNNERS: dict[str, Callable[..., SweepOutput]] = {
    "replica-curve": run_replica_curve,
    "phase-diagram": run_phase_diagram,
    "amp-mse-sweep": run_sweep,
    "e2e-pe-sweep": run_sweep,
    "compare": run_compare,
}


def run(spec: ExperimentSpec, *, threads: int = 1) -> SweepOutput:
    return RUNNERS[spec.kind](spec, threads=threads)


def read_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
