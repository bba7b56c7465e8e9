"""Experiment harness: simulated datasets, approximation reports and studies.

Everything here is deterministic given the seed.  Replicate streams are
seeded with ``numpy.random.default_rng([seed, ...])`` keyed by grid point
and replicate, so a grid point's data never depends on which other points
are run or in which order.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bipartition import write_catalog_csv
from .config import Config, ConfigError
from .glmm import (
    FAMILIES,
    Condition2Report,
    GlmmModel,
    Hierarchy,
    MultilevelModel,
    build_g,
    check_condition2,
    get_family,
    original_model,
    reparameterize_multilevel,
    simulate_multilevel,
    simulate_two_level,
    structured_inverse,
    two_level_model,
    unbalanced_sizes,
)
from .laplace_engine import ExpLinearG, GFunction, LaplaceExpansion, laplace_order_k
from .oracle import (
    OracleInfeasible,
    OracleResult,
    exact_log_integral_tensor,
    exact_loglik_tensor,
    exact_loglik_two_level,
    log_integral_1d,
)
from .tensor_core import ContractionTooLarge

ORACLE_MODES = ("auto", "factorized", "tensor", "none")


def _fmt(x) -> str:
    """Shortest round-trip text for a float; stable across runs."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


# -- simulation ---------------------------------------------------------------


@dataclass
class SimulationSettings:
    family: str
    beta: list[float]
    sigma2: list[float]
    sizes: list[int]
    hierarchy: list[list[int]] = field(default_factory=list)
    seed: int = 1
    design: str = "custom"

    @property
    def levels(self) -> int:
        return 2 + len(self.hierarchy)

    @property
    def d(self) -> int:
        return len(self.sizes)


def _sizes_from_config(cfg: Config) -> tuple[list[int], str]:
    if "sizes" in cfg:
        return cfg.integers("sizes", minimum=1), "custom"
    design = cfg.choice("design", {"balanced", "unbalanced"})
    d = cfg.integer("d", minimum=2)
    if design == "balanced":
        return [cfg.integer("n_j", minimum=1)] * d, design
    n_total = cfg.integer("n_total", minimum=1) if "n_total" in cfg else None
    try:
        sizes = unbalanced_sizes(d, n_total)
    except ValueError as exc:
        raise cfg.error("n_total", str(exc)) from None
    return [int(s) for s in sizes], design


def _hierarchy_from_config(cfg: Config, d: int) -> list[list[int]]:
    if "groups" in cfg and "hierarchy" in cfg:
        raise cfg.error("groups", "give either 'groups' or 'hierarchy', not both")
    if "groups" in cfg:
        groups = cfg.get("groups")
        if not isinstance(groups, list) or not all(isinstance(g, list) and g for g in groups):
            raise cfg.error("groups", "expected a list of non-empty lists of cluster ids")
        try:
            h = Hierarchy.from_groups(groups, [1] * d)
        except (ValueError, IndexError, TypeError) as exc:
            raise cfg.error("groups", str(exc)) from None
        members = sorted(i for g in groups for i in g)
        if members != list(range(d)):
            raise cfg.error("groups", f"every cluster 0..{d - 1} must appear exactly once")
        return [list(map(int, c)) for c in h.cluster_of]
    if "hierarchy" in cfg:
        maps = cfg.get("hierarchy")
        if not isinstance(maps, list) or not all(isinstance(m, list) for m in maps):
            raise cfg.error("hierarchy", "expected a list of per-level cluster maps")
        try:
            Hierarchy(maps, [1] * d)
        except (ValueError, TypeError) as exc:
            raise cfg.error("hierarchy", str(exc)) from None
        return [list(map(int, m)) for m in maps]
    return []


def simulation_settings(cfg: Config, seed: int | None = None) -> SimulationSettings:
    family = cfg.choice("family", set(FAMILIES) | {"poisson", "bernoulli", "gaussian"})
    sizes, design = _sizes_from_config(cfg)
    hierarchy = _hierarchy_from_config(cfg, len(sizes))
    beta = cfg.numbers("beta", default=[1.0])
    sigma2 = cfg.numbers("sigma2", default=[1.0], nonnegative=True)
    if len(sigma2) != 1 + len(hierarchy):
        raise cfg.error("sigma2", f"need one variance per level 2..L ({1 + len(hierarchy)} values)")
    if sigma2[0] <= 0:
        raise cfg.error("sigma2", "the level-2 variance must be positive")
    if seed is None:
        seed = cfg.integer("seed", default=1, minimum=0)
    return SimulationSettings(get_family(family).name, beta, sigma2, sizes, hierarchy, int(seed), design)


@dataclass
class Dataset:
    y: np.ndarray
    clusters: np.ndarray  # (n, L - 1): level-2 id, level-3 id, ...
    covariates: np.ndarray  # (n, p), intercept excluded
    meta: dict

    @property
    def columns(self) -> list[str]:
        names = ["y"] + [f"cluster_l{l}" for l in range(2, 2 + self.clusters.shape[1])]
        return names + [f"x{j}" for j in range(1, self.covariates.shape[1] + 1)]


def simulate(settings: SimulationSettings) -> Dataset:
    """Draw per-level intercepts, then covariates, then responses."""
    rng = np.random.default_rng(settings.seed)
    family = get_family(settings.family)
    sizes = np.asarray(settings.sizes, dtype=int)
    hierarchy = Hierarchy(settings.hierarchy, sizes)
    cluster = np.repeat(np.arange(hierarchy.d), sizes)
    v = rng.normal(0.0, math.sqrt(settings.sigma2[0]), size=hierarchy.d)
    for level in range(3, hierarchy.levels + 1):
        effects = rng.normal(0.0, math.sqrt(settings.sigma2[level - 2]), size=hierarchy.n_clusters(level))
        v = v + effects[hierarchy.level_map(level)]
    n = cluster.shape[0]
    p = len(settings.beta) - 1
    covariates = rng.normal(size=(n, p))
    eta = settings.beta[0] + covariates @ np.asarray(settings.beta[1:]) + v[cluster]
    y = family.sample(eta, rng)
    clusters = np.column_stack([hierarchy.level_map(l)[cluster] for l in range(2, hierarchy.levels + 1)])
    meta = {
        "family": family.name,
        "beta": settings.beta,
        "sigma2": settings.sigma2,
        "sizes": [int(s) for s in sizes],
        "hierarchy": settings.hierarchy,
        "seed": settings.seed,
        "design": settings.design,
        "n": int(n),
        "d": int(hierarchy.d),
        "levels": int(hierarchy.levels),
    }
    return Dataset(y, clusters, covariates, meta)


def write_dataset(ds: Dataset, out_dir, stem: str = "dataset") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, meta_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    rows = (
        [_fmt(y)] + [str(int(c)) for c in cl] + [_fmt(x) for x in xs]
        for y, cl, xs in zip(ds.y, ds.clusters, ds.covariates)
    )
    _write_csv(csv_path, ds.columns, rows)
    meta = dict(ds.meta, columns=ds.columns)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def read_dataset(csv_path) -> Dataset:
    """Load a dataset CSV and its ``.json`` sidecar."""
    csv_path = Path(csv_path)
    meta_path = csv_path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
    if not header or header[0] != "y":
        raise ValueError(f"{csv_path}: first column must be 'y'")
    cl_cols = [i for i, h in enumerate(header) if h.startswith("cluster_l")]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    if not cl_cols:
        raise ValueError(f"{csv_path}: no cluster_l* columns")
    return Dataset(body[:, 0], body[:, cl_cols].astype(int), body[:, x_cols], meta)


def dataset_models(ds: Dataset, family, beta, sigma2, parameterization: str = "collapsed"):
    """``(GlmmModel, MultilevelModel or None)`` for a dataset.

    Level-2 clusters must be numbered ``0..d-1`` in the CSV; rows need not be
    sorted.
    """
    family = get_family(family)
    beta = np.asarray(beta, dtype=float)
    n = ds.y.shape[0]
    X = np.column_stack([np.ones(n), ds.covariates])
    if X.shape[1] != beta.shape[0]:
        raise ValueError(f"beta has {beta.shape[0]} entries but the data have {X.shape[1] - 1} covariates")
    sigma2 = np.asarray(sigma2, dtype=float).reshape(-1)
    levels = ds.clusters.shape[1] + 1
    if sigma2.shape[0] != levels - 1:
        raise ValueError(f"need {levels - 1} variances for a {levels}-level dataset")
    cluster = ds.clusters[:, 0]
    d = int(cluster.max()) + 1
    if levels == 2:
        return two_level_model(family, ds.y, cluster, sigma2[0], d=d, X=X, beta=beta), None
    maps = []
    for col in range(1, ds.clusters.shape[1]):
        m = np.full(d, -1)
        m[cluster] = ds.clusters[:, col]
        maps.append(m)
    sizes = np.bincount(cluster, minlength=d)
    order = np.argsort(cluster, kind="stable")
    mm = MultilevelModel(family, ds.y[order], cluster[order], Hierarchy(maps, sizes), sigma2, X[order], beta)
    if parameterization == "original":
        return original_model(mm), mm
    return reparameterize_multilevel(mm), mm


# -- oracles ------------------------------------------------------------------


def run_oracle(g: GFunction, model: GlmmModel | None, mode: str) -> tuple[str, OracleResult]:
    """Exact log-integral by the requested route; raises :class:`OracleInfeasible`."""
    if mode == "none":
        raise OracleInfeasible("oracle disabled")
    if model is None:
        if mode in ("auto", "factorized") and isinstance(g, ExpLinearG):
            return "log-gamma closed form", OracleResult(g.exact_log_integral(), 0.0, 0, None)
        if mode in ("auto", "factorized") and g.dim == 1:
            return "adaptive Gauss-Hermite (1-D)", log_integral_1d(g)
        return "adaptive Gauss-Hermite (tensor)", exact_log_integral_tensor(g)
    if mode == "factorized":
        return "adaptive Gauss-Hermite (per cluster)", exact_loglik_two_level(model)
    if mode == "tensor":
        return "adaptive Gauss-Hermite (tensor)", exact_loglik_tensor(model)
    try:
        return "adaptive Gauss-Hermite (per cluster)", exact_loglik_two_level(model)
    except OracleInfeasible:
        return "adaptive Gauss-Hermite (tensor)", exact_loglik_tensor(model)


# -- approx -------------------------------------------------------------------


@dataclass
class ApproxReport:
    label: str
    d: int
    n: int | None
    order: int
    expansion: LaplaceExpansion
    condition2: Condition2Report | None = None
    condition2_note: str = ""
    oracle_name: str | None = None
    oracle: OracleResult | None = None
    oracle_note: str = ""

    @property
    def ell_tilde(self) -> dict[int, float]:
        return {k: self.expansion.order_k(k) for k in range(1, self.order + 1)}

    @property
    def epsilon(self) -> dict[int, float]:
        if self.oracle is None:
            return {}
        return {k: v - self.oracle.value for k, v in self.ell_tilde.items()}

    def rows(self) -> list[tuple]:
        out = [("ell_tilde", k, v) for k, v in self.ell_tilde.items()]
        out += [("e_level", l, self.expansion.e_levels[l]) for l in range(1, self.order)]
        if self.oracle is not None:
            out.append(("ell", 0, self.oracle.value))
            out.append(("oracle_error", 0, self.oracle.error_estimate))
            out += [("epsilon", k, v) for k, v in self.epsilon.items()]
        if self.condition2 is not None:
            out += [("ostar_f", k, v) for k, v in self.condition2.array_norms.items()]
            out.append(("ostar_inverse_f2", 2, self.condition2.inverse_norm))
        return out

    def to_text(self) -> str:
        u = self.expansion.u_hat
        lines = [f"model: {self.label}", f"dimension d = {self.d}" + (f", observations n = {self.n}" if self.n else "")]
        lines.append(
            "u_hat: min {:.6g}, median {:.6g}, max {:.6g}, |u_hat| = {:.6g}".format(
                u.min(), float(np.median(u)), u.max(), float(np.linalg.norm(u))
            )
        )
        lines.append("")
        lines.append("order-k approximations")
        for k, v in self.ell_tilde.items():
            lines.append(f"  ell_tilde_{k} = {v:.12g}")
        for l in range(1, self.order):
            lines.append(f"  e_{l} = {self.expansion.e_levels[l]:.6e}")
        lines.append("")
        if self.oracle is not None:
            lines.append(f"exact log-integral ({self.oracle_name})")
            lines.append(f"  ell = {self.oracle.value:.12g}  (refinement error {self.oracle.error_estimate:.2e})")
            for k, v in self.epsilon.items():
                lines.append(f"  epsilon_{k} = {v:.6e}")
            if not self.oracle.reliable:
                lines.append("  warning: refinement error above 1e-6, oracle flagged unreliable")
        else:
            lines.append(f"exact log-integral: not available ({self.oracle_note})")
        lines.append("")
        if self.condition2 is not None:
            lines.append("O*-norms of normalized arrays")
            for k, v in self.condition2.array_norms.items():
                lines.append(f"  f^({k}): {v:.6g}")
            lines.append(f"  [f^(2)]^-1: {self.condition2.inverse_norm:.6g}")
        else:
            lines.append(f"O*-norms: not available ({self.condition2_note})")
        return "\n".join(lines) + "\n"


def approx_report(g: GFunction, order: int, model: GlmmModel | None = None, oracle_mode: str = "auto", label: str = "", normalizers=None) -> ApproxReport:
    """Order-``order`` approximation plus diagnostics and, when possible, ``epsilon_k``."""
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    expansion = laplace_order_k(g, order)
    report = ApproxReport(label, g.dim, None if model is None else model.n, order, expansion)
    try:
        n = normalizers if normalizers is not None else (g.default_normalizers() if model is not None else np.ones(g.dim))
        if isinstance(g, ExpLinearG) and normalizers is None:
            n = np.array([g.n])
        report.condition2 = check_condition2(g, n=n, expansion=expansion)
    except ContractionTooLarge as exc:
        report.condition2_note = str(exc)
    try:
        report.oracle_name, report.oracle = run_oracle(g, model, oracle_mode)
    except OracleInfeasible as exc:
        report.oracle_note = str(exc)
    return report


def approx_from_config(cfg: Config, order: int, oracle_mode: str, seed: int | None = None):
    """Build the objective described by an approx config and report on it.

    Three forms are accepted: ``{"model": "stirling", "n": ...}``,
    ``{"dataset": "file.csv", ...}`` (model settings default to the
    dataset's sidecar metadata) and an inline simulation config.
    """
    if cfg.get("model") == "stirling":
        n = cfg.number("n", positive=True)
        return approx_report(ExpLinearG(n), order, None, oracle_mode, label=f"g(u) = n (exp(u) - u), n = {n:g}")
    if "model" in cfg:
        raise cfg.error("model", "only 'stirling' is a named model; use 'dataset' or a simulation config")
    parameterization = cfg.choice("parameterization", {"collapsed", "original"}, default="collapsed")
    if "dataset" in cfg:
        path = Path(cfg.require("dataset"))
        if not path.is_absolute():
            path = cfg.base_dir / path
        try:
            ds = read_dataset(path)
        except (OSError, ValueError) as exc:
            raise cfg.error("dataset", f"cannot read dataset: {exc}") from None
        meta = ds.meta
        family = cfg.get("family", meta.get("family"))
        if family is None:
            raise ConfigError(f"{cfg.path}:1: missing 'family' (not in the dataset metadata either)")
        beta = cfg.numbers("beta", default=meta.get("beta", [1.0]))
        sigma2 = cfg.numbers("sigma2", default=meta.get("sigma2", [1.0]), positive=True)
        label_src = path.name
    else:
        settings = simulation_settings(cfg, seed)
        ds = simulate(settings)
        family, beta, sigma2 = settings.family, settings.beta, settings.sigma2
        label_src = f"simulated, seed {settings.seed}"
    try:
        model, _ = dataset_models(ds, family, beta, sigma2, parameterization)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{cfg.path}:1: {exc}") from None
    levels = ds.clusters.shape[1] + 1
    shape = f"{levels} levels, {parameterization}" if levels > 2 else "2 levels"
    label = f"{get_family(family).name} GLMM, {shape} ({label_src})"
    return approx_report(build_g(model), order, model, oracle_mode, label=label)


# -- scaling study ------------------------------------------------------------


@dataclass(frozen=True)
class ScalingRow:
    d: int
    n_pattern: str
    sizes_summary: str
    replicate: int
    k: int
    epsilon_k: float
    predicted_bound: float
    oracle_error: float
    seed: int
    wall_time: float
    flagged: bool

    @property
    def usable(self) -> bool:
        return not self.flagged


SCALING_COLUMNS = [
    "d",
    "n_pattern",
    "sizes_summary",
    "replicate",
    "k",
    "epsilon_k",
    "predicted_bound",
    "oracle_error",
    "seed",
    "flagged",
]
TIMING_COLUMNS = ["d", "n_pattern", "replicate", "wall_time"]


@dataclass
class ScalingSettings:
    family: str = "poisson"
    sigma2: float = 1.5
    beta0: float = 1.0
    design: str = "balanced"
    d: list[int] = field(default_factory=lambda: [20])
    n_j: list[int] = field(default_factory=lambda: [10, 20, 40, 80])
    n_factor: int = 10
    replicates: int = 10
    orders: list[int] = field(default_factory=lambda: [1, 2])
    seed: int = 1

    def grid(self) -> list[tuple[int, int]]:
        """``(d, n_j)`` pairs; ``n_j = 0`` stands for the unbalanced pattern."""
        if self.design == "balanced":
            return [(d, nj) for d in self.d for nj in self.n_j]
        return [(d, 0) for d in self.d]

    def sizes(self, d: int, nj: int) -> np.ndarray:
        if nj:
            return np.full(d, nj)
        small = math.ceil(math.log(d))
        return unbalanced_sizes(d, self.n_factor * d * small)


def scaling_settings(cfg: Config, seed: int | None = None) -> ScalingSettings:
    design = cfg.choice("design", {"balanced", "unbalanced"}, default="balanced")
    defaults = ScalingSettings()
    s = ScalingSettings(
        family=get_family(cfg.choice("family", set(FAMILIES) | {"poisson", "bernoulli", "gaussian"}, default="poisson")).name,
        sigma2=cfg.number("sigma2", default=defaults.sigma2, positive=True),
        beta0=cfg.number("beta0", default=defaults.beta0),
        design=design,
        d=cfg.integers("d", default=defaults.d if design == "balanced" else [20, 50, 100, 200], minimum=2),
        n_j=cfg.integers("n_j", default=defaults.n_j, minimum=1),
        n_factor=cfg.integer("n_factor", default=defaults.n_factor, minimum=2),
        replicates=cfg.integer("replicates", default=defaults.replicates, minimum=1),
        orders=cfg.integers("orders", default=defaults.orders, minimum=1),
        seed=cfg.integer("seed", default=1, minimum=0) if seed is None else int(seed),
    )
    if max(s.orders) > 3:
        raise cfg.error("orders", "orders above 3 are not supported")
    return s


def _scaling_task(args) -> list[ScalingRow]:
    settings, d, nj, rep = args
    start = time.perf_counter()
    sizes = settings.sizes(d, nj)
    rng = np.random.default_rng([settings.seed, d, nj, rep])
    model = simulate_two_level(settings.family, sizes, settings.sigma2, settings.beta0, rng)
    expansion = laplace_order_k(build_g(model), max(settings.orders))
    oracle = exact_loglik_two_level(model)
    errors = expansion.errors(oracle.value)
    wall = time.perf_counter() - start
    pattern = f"balanced-{nj}" if nj else "unbalanced"
    summary = f"{sizes.min()}/{int(np.median(sizes))}/{sizes.max()}"
    rows = []
    for k in settings.orders:
        eps = errors[k]
        flagged = not (np.isfinite(eps) and oracle.reliable and oracle.error_estimate < abs(eps) / 10)
        bound = float(np.sum(sizes.astype(float) ** -k))
        rows.append(ScalingRow(d, pattern, summary, rep, k, eps, bound, oracle.error_estimate, settings.seed, wall, flagged))
    return rows


@dataclass
class SlopeFit:
    k: int
    against: str  # "log n_j" or "log d"
    fixed: str
    slope: float
    points: int
    excluded: int


@dataclass
class ScalingResult:
    settings: ScalingSettings
    rows: list[ScalingRow]
    slopes: list[SlopeFit]

    @property
    def excluded(self) -> int:
        return sum(r.flagged for r in self.rows)

    def medians(self) -> list[tuple]:
        """``(d, n_pattern, n_small, k, median |eps|, bound, used)`` per grid point."""
        out = []
        for d, nj in self.settings.grid():
            pattern = f"balanced-{nj}" if nj else "unbalanced"
            n_small = nj if nj else math.ceil(math.log(d))
            for k in self.settings.orders:
                sel = [r for r in self.rows if r.d == d and r.n_pattern == pattern and r.k == k]
                used = [abs(r.epsilon_k) for r in sel if r.usable]
                med = float(np.median(used)) if used else float("nan")
                out.append((d, pattern, n_small, k, med, sel[0].predicted_bound, len(used)))
        return out


def _fit(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    ok = np.isfinite(ys)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(xs[ok], ys[ok], 1)[0])


def fit_slopes(settings: ScalingSettings, rows: list[ScalingRow]) -> list[SlopeFit]:
    """Least-squares slopes of log median |eps_k| against log n_j and log d."""
    result = ScalingResult(settings, rows, [])
    med = result.medians()
    fits = []
    for k in settings.orders:
        pts = [m for m in med if m[3] == k]
        if settings.design == "balanced":
            for d in settings.d:
                sel = [m for m in pts if m[0] == d]
                if len(sel) >= 2:
                    excl = sum(r.flagged for r in rows if r.k == k and r.d == d)
                    fits.append(SlopeFit(k, "log n_j", f"d={d}", _fit([np.log(m[2]) for m in sel], [np.log(m[4]) for m in sel]), len(sel), excl))
            for nj in settings.n_j:
                sel = [m for m in pts if m[2] == nj]
                if len(sel) >= 2:
                    excl = sum(r.flagged for r in rows if r.k == k and r.n_pattern == f"balanced-{nj}")
                    fits.append(SlopeFit(k, "log d", f"n_j={nj}", _fit([np.log(m[0]) for m in sel], [np.log(m[4]) for m in sel]), len(sel), excl))
        elif len(pts) >= 2:
            excl = sum(r.flagged for r in rows if r.k == k)
            fits.append(SlopeFit(k, "log d", "unbalanced", _fit([np.log(m[0]) for m in pts], [np.log(m[4]) for m in pts]), len(pts), excl))
    return fits


def run_scaling(settings: ScalingSettings, threads: int = 1) -> ScalingResult:
    tasks = [(settings, d, nj, rep) for d, nj in settings.grid() for rep in range(settings.replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_scaling_task, tasks))
    else:
        chunks = [_scaling_task(t) for t in tasks]
    rows = sorted((r for c in chunks for r in c), key=lambda r: (r.d, r.n_pattern, r.replicate, r.k))
    return ScalingResult(settings, rows, fit_slopes(settings, rows))


def scaling_text(result: ScalingResult) -> str:
    s = result.settings
    lines = [f"scaling study: {s.family}, sigma2 = {s.sigma2:g}, beta0 = {s.beta0:g}, {s.replicates} replicates, seed {s.seed}"]
    if s.design == "balanced":
        lines.append(f"balanced design: d in {s.d}, n_j in {s.n_j}")
    else:
        lines.append(
            "unbalanced design: d - 1 clusters of size ceil(log d) and one large cluster; "
            f"total n = {s.n_factor} d ceil(log d) so the large cluster always holds at least d ceil(log d) observations"
        )
    lines.append("|epsilon_k| is summarized by the median over replicates; rows whose oracle error is not below |epsilon_k|/10 are flagged and left out")
    lines.append("")
    lines.append(f"{'d':>5} {'pattern':>14} {'k':>2} {'median|eps|':>12} {'sum n_j^-k':>12} {'used':>5}")
    for d, pattern, _, k, med, bound, used in result.medians():
        lines.append(f"{d:>5} {pattern:>14} {k:>2} {med:>12.4e} {bound:>12.4e} {used:>5}")
    lines.append("")
    lines.append("fitted slopes of log median |epsilon_k|")
    for f in result.slopes:
        lines.append(f"  k={f.k} vs {f.against} ({f.fixed}): {f.slope:.3f} over {f.points} points, {f.excluded} rows excluded")
    lines.append(f"rows excluded from fits: {result.excluded} of {len(result.rows)}")
    if s.design == "unbalanced":
        for k in s.orders:
            meds = [m[4] for m in result.medians() if m[3] == k]
            trend = all(b > a for a, b in zip(meds, meds[1:]))
            lines.append(f"median |epsilon_{k}| strictly increasing in d: {'yes' if trend else 'no'}")
    return "\n".join(lines) + "\n"


GNUPLOT_TEMPLATE = """# gnuplot script for {medians}
set datafile separator ","
set logscale xy
set key top right
set xlabel "{xlabel}"
set ylabel "median |epsilon_k|"
plot for [k in "{orders}"] "{medians}" using {xcol}:(column("k") == k + 0 ? column("median_abs_epsilon") : 1/0) \\
     skip 1 with linespoints title "k = ".k
"""


def write_scaling_outputs(result: ScalingResult, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "rows": out_dir / "scaling.csv",
        "timings": out_dir / "scaling_timings.csv",
        "medians": out_dir / "scaling_medians.csv",
        "slopes": out_dir / "scaling_slopes.csv",
        "report": out_dir / "scaling_report.txt",
        "plot": out_dir / "plot_scaling.gp",
    }
    _write_csv(
        paths["rows"],
        SCALING_COLUMNS,
        ([r.d, r.n_pattern, r.sizes_summary, r.replicate, r.k, r.epsilon_k, r.predicted_bound, r.oracle_error, r.seed, r.flagged] for r in result.rows),
    )
    seen = {}
    for r in result.rows:
        seen.setdefault((r.d, r.n_pattern, r.replicate), r.wall_time)
    _write_csv(paths["timings"], TIMING_COLUMNS, ([d, p, rep, t] for (d, p, rep), t in seen.items()))
    _write_csv(
        paths["medians"],
        ["d", "n_pattern", "n_small", "k", "median_abs_epsilon", "predicted_bound", "rows_used"],
        result.medians(),
    )
    _write_csv(
        paths["slopes"],
        ["k", "against", "fixed", "slope", "points", "rows_excluded"],
        ([f.k, f.against, f.fixed, f.slope, f.points, f.excluded] for f in result.slopes),
    )
    paths["report"].write_text(scaling_text(result))
    balanced = result.settings.design == "balanced" and len(result.settings.n_j) > 1
    paths["plot"].write_text(
        GNUPLOT_TEMPLATE.format(
            medians=paths["medians"].name,
            xlabel="n_j" if balanced else "d",
            xcol='"n_small"' if balanced else '"d"',
            orders=" ".join(str(k) for k in result.settings.orders),
        )
    )
    return paths


# -- grouping comparison --------------------------------------------------------


@dataclass
class HierarchySettings:
    family: str = "poisson"
    sizes: list[int] = field(default_factory=lambda: [20, 20, 20, 20])
    sigma2: list[float] = field(default_factory=lambda: [1.0, 1.0])
    beta0: float = 1.0
    groupings: list = field(default_factory=lambda: [[[0, 1], [2, 3]], [[0, 1, 2], [3]]])
    replicates: int = 5
    seed: int = 1
    max_ratio: float = 3.0


def hierarchy_settings(cfg: Config, seed: int | None = None) -> HierarchySettings:
    defaults = HierarchySettings()
    s = HierarchySettings(
        family=get_family(cfg.choice("family", set(FAMILIES) | {"poisson", "bernoulli", "gaussian"}, default="poisson")).name,
        sizes=cfg.integers("sizes", default=defaults.sizes, minimum=1),
        sigma2=cfg.numbers("sigma2", default=defaults.sigma2, nonnegative=True),
        beta0=cfg.number("beta0", default=defaults.beta0),
        groupings=cfg.get("groupings", defaults.groupings),
        replicates=cfg.integer("replicates", default=defaults.replicates, minimum=1),
        seed=cfg.integer("seed", default=1, minimum=0) if seed is None else int(seed),
        max_ratio=cfg.number("max_ratio", default=defaults.max_ratio, positive=True),
    )
    d = len(s.sizes)
    if len(s.sigma2) != 2 or s.sigma2[0] <= 0:
        raise cfg.error("sigma2", "need [level-2 variance > 0, level-3 variance >= 0]")
    if not isinstance(s.groupings, list) or len(s.groupings) < 2:
        raise cfg.error("groupings", "need at least two alternative groupings")
    for grouping in s.groupings:
        try:
            members = sorted(int(i) for g in grouping for i in g)
        except (TypeError, ValueError):
            raise cfg.error("groupings", "each grouping is a list of lists of cluster ids") from None
        if members != list(range(d)):
            raise cfg.error("groupings", f"each grouping must place clusters 0..{d - 1} exactly once")
    return s


@dataclass
class HierarchyComparison:
    settings: HierarchySettings
    epsilon1: list[list[float]]  # per grouping, per replicate
    oracle_errors: list[list[float]]
    singleton_gap: float
    zero_variance_gap: float
    structured_inverse_gap: float
    original_vs_collapsed_gap: float | None

    @property
    def medians(self) -> list[float]:
        return [float(np.median(np.abs(e))) for e in self.epsilon1]

    @property
    def ratio(self) -> float:
        m = self.medians
        return max(m) / min(m)

    @property
    def passed(self) -> bool:
        return self.ratio <= self.settings.max_ratio

    def to_text(self) -> str:
        s = self.settings
        lines = [
            f"grouping comparison: {s.family}, sizes {s.sizes}, sigma2 {s.sigma2}, beta0 {s.beta0:g}, "
            f"{s.replicates} replicates, seed {s.seed}",
            "collapsed parameterization, exact log-likelihood by tensor-product quadrature",
            "",
        ]
        for grouping, eps, med in zip(s.groupings, self.epsilon1, self.medians):
            label = "+".join(str(len(g)) for g in grouping)
            lines.append(f"  grouping {label:>7} {grouping}: median |epsilon_1| = {med:.4e}")
            lines.append("      epsilon_1 by replicate: " + ", ".join(f"{e:.3e}" for e in eps))
        lines.append(f"max/min ratio of median |epsilon_1|: {self.ratio:.3f} (limit {s.max_ratio:g}): {'PASS' if self.passed else 'FAIL'}")
        lines.append("")
        lines.append("reductions (replicate 0 of the first grouping)")
        lines.append(f"  singleton groups vs two-level model with summed variance: |delta epsilon_1| = {self.singleton_gap:.2e}")
        lines.append(f"  level-3 variance 0 vs two-level model: |delta epsilon_1| = {self.zero_variance_gap:.2e}")
        lines.append(f"  structured inverse vs dense inverse: max abs difference = {self.structured_inverse_gap:.2e}")
        if self.original_vs_collapsed_gap is not None:
            lines.append(f"  exact log-likelihood, original vs collapsed: |difference| = {self.original_vs_collapsed_gap:.2e}")
        else:
            lines.append("  exact log-likelihood, original vs collapsed: skipped (original dimension above 6)")
        return "\n".join(lines) + "\n"


def _epsilon1(model: GlmmModel, oracle: str = "tensor") -> tuple[float, float]:
    expansion = laplace_order_k(build_g(model), 1)
    result = exact_loglik_tensor(model) if oracle == "tensor" else exact_loglik_two_level(model)
    return expansion.ell1 - result.value, result.error_estimate


def run_hierarchy_compare(settings: HierarchySettings) -> HierarchyComparison:
    sizes = np.asarray(settings.sizes)
    eps_all, err_all = [], []
    first_mm = None
    for grouping in settings.groupings:
        h = Hierarchy.from_groups(grouping, sizes)
        eps, errs = [], []
        for rep in range(settings.replicates):
            mm = simulate_multilevel(settings.family, h, settings.sigma2, settings.beta0, np.random.default_rng([settings.seed, rep]))
            if first_mm is None:
                first_mm = mm
            e, err = _epsilon1(reparameterize_multilevel(mm))
            eps.append(e)
            errs.append(err)
        eps_all.append(eps)
        err_all.append(errs)

    mm = first_mm
    var = settings.sigma2
    two_level_sum = two_level_model(mm.family, mm.y, mm.cluster, var[0] + var[1], d=mm.hierarchy.d, X=mm.X, beta=mm.beta)
    singleton = Hierarchy.from_groups([[j] for j in range(mm.hierarchy.d)], sizes)
    mm_single = MultilevelModel(mm.family, mm.y, mm.cluster, singleton, var, mm.X, mm.beta)
    singleton_gap = abs(_epsilon1(reparameterize_multilevel(mm_single))[0] - _epsilon1(two_level_sum, "factorized")[0])

    two_level = two_level_model(mm.family, mm.y, mm.cluster, var[0], d=mm.hierarchy.d, X=mm.X, beta=mm.beta)
    mm_zero = MultilevelModel(mm.family, mm.y, mm.cluster, mm.hierarchy, [var[0], 0.0], mm.X, mm.beta)
    zero_gap = abs(_epsilon1(reparameterize_multilevel(mm_zero))[0] - _epsilon1(two_level, "factorized")[0])

    collapsed = reparameterize_multilevel(mm)
    expansion = laplace_order_k(build_g(collapsed), 1)
    si = structured_inverse(mm, expansion.u_hat)
    inv_gap = float(np.max(np.abs(si.hessian_inverse - expansion.inverse2)))

    original_gap = None
    if var[1] > 0:
        orig = original_model(mm)
        if orig.dim <= 6:
            original_gap = abs(exact_loglik_tensor(orig).value - exact_loglik_tensor(collapsed).value)
    return HierarchyComparison(settings, eps_all, err_all, singleton_gap, zero_gap, inv_gap, original_gap)


def write_hierarchy_outputs(result: HierarchyComparison, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"rows": out_dir / "hierarchy_compare.csv", "report": out_dir / "hierarchy_report.txt"}
    rows = []
    for gi, (grouping, eps, errs) in enumerate(zip(result.settings.groupings, result.epsilon1, result.oracle_errors)):
        label = "+".join(str(len(g)) for g in grouping)
        rows += [[gi, label, rep, e, err, result.settings.seed] for rep, (e, err) in enumerate(zip(eps, errs))]
    _write_csv(paths["rows"], ["grouping", "pattern", "replicate", "epsilon_1", "oracle_error", "seed"], rows)
    paths["report"].write_text(result.to_text())
    return paths


def write_bipartitions(out_dir, levels) -> tuple[Path, int]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "bipartitions.csv"
    return path, write_catalog_csv(path, levels)


__all__ = [
    "ORACLE_MODES",
    "SimulationSettings",
    "simulation_settings",
    "Dataset",
    "simulate",
    "write_dataset",
    "read_dataset",
    "dataset_models",
    "run_oracle",
    "ApproxReport",
    "approx_report",
    "approx_from_config",
    "ScalingRow",
    "SCALING_COLUMNS",
    "ScalingSettings",
    "scaling_settings",
    "ScalingResult",
    "SlopeFit",
    "fit_slopes",
    "run_scaling",
    "scaling_text",
    "write_scaling_outputs",
    "HierarchySettings",
    "hierarchy_settings",
    "HierarchyComparison",
    "run_hierarchy_compare",
    "write_hierarchy_outputs",
    "write_bipartitions",
]
