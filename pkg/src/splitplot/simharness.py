"""Synthetic populations, replicated (re)randomization studies, and metric tables."""

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adjustment import adjusted_estimate, analysis_moments, fit_ag_lin, fit_wls_lin, projection_estimate
from .design import DesignSpec, PopulationData, ValidatedDesign, randomize, validate_design
from .errors import ConfigError, SplitPlotError
from .estimators import EFFECTS, G, arm_estimate_z
from .inference import RANDOMIZED, RERANDOMIZED, LimitLawSampler, NoisePool, normal_intervals, mc_intervals
from .moments import CovariateMoments, estimated_tt, sigma_estimated
from .numkernels import RngStream, chi2_quantile
from .rerandomization import build_criterion, rerandomize

METRIC_COLUMNS = ["estimator", "scheme", "effect", "bias", "sd", "ese", "coverage", "mean_length", "acceptance_rate"]
ALL_CELLS = ["ht.rnd", "ht", "ht.P", "ht.L", "ht.L.a", "haj.rnd", "haj", "haj.P", "haj.L"]
SCENARIO_ALIASES = {
    "sim1_wholeplot": "Sim1_WholePlot",
    "sim1-wholeplot": "Sim1_WholePlot",
    "sim1_varying": "Sim1_Varying",
    "sim1-varying": "Sim1_Varying",
    "supps1": "SuppS1",
    "supp-s1": "SuppS1",
    "supp_s1": "SuppS1",
    "custom": "Custom",
}

# stream ids under the study seed
_POPULATION_STREAM = 1
_RANDOMIZED_STREAM = 2
_RERAND_STREAM = {"ht": 3, "haj": 4}
_NOISE_STREAM = 5


@dataclass(frozen=True)
class ScenarioParams:
    """Generator constants. `outcome_form` is "unit" (subplot covariates enter
    the outcome) or "averaged" (plot mean of v_1 and population mean of v_2)."""

    W: int
    W1: int
    lam0: float
    lam1: float
    v_mean: Tuple[float, float] = (0.6, 0.6)
    v_var: float = 0.8
    delta_var: float = 0.0
    x_cols: Tuple[int, ...] = (0,)
    outcome_form: str = "unit"
    theta_var: float = 0.2
    min_size: int = 2


SCENARIOS: Dict[str, ScenarioParams] = {
    "Sim1_WholePlot": ScenarioParams(W=600, W1=180, lam0=5, lam1=3),
    "Sim1_Varying": ScenarioParams(W=600, W1=180, lam0=5, lam1=3, delta_var=0.5),
    "SuppS1": ScenarioParams(W=1200, W1=1080, lam0=3, lam1=8, delta_var=2.0, x_cols=(0, 1), outcome_form="averaged"),
}
DEFAULT_CELLS = {
    "Sim1_WholePlot": ALL_CELLS,
    "Sim1_Varying": ALL_CELLS,
    "SuppS1": ["ht.rnd", "ht", "ht.P", "ht.L"],
    "Custom": ALL_CELLS,
}


def canonical_scenario(name: str) -> str:
    if name in SCENARIOS or name == "Custom":
        return name
    key = str(name).strip().lower()
    if key in SCENARIO_ALIASES:
        return SCENARIO_ALIASES[key]
    raise ConfigError(f"unknown scenario {name!r}", {"known": sorted(set(SCENARIO_ALIASES.values()))})


@dataclass
class StudyConfig:
    scenario: str
    seed: int
    replications: int = 2000
    alpha: float = 0.01
    xi: float = 0.05
    mc_size: int = 100_000
    estimators: Optional[List[str]] = None
    threads: int = 1
    max_draws: int = 10**6
    params: Optional[ScenarioParams] = None
    output: Optional[str] = None
    strict_psd: bool = False  # when False, indefinite residual blocks are projected and counted

    def __post_init__(self):
        self.scenario = canonical_scenario(self.scenario)
        if self.params is None:
            if self.scenario == "Custom":
                raise ConfigError("the Custom scenario needs explicit generator parameters")
            self.params = SCENARIOS[self.scenario]
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if not 0 < self.alpha <= 1 or not 0 < self.xi < 1:
            raise ConfigError("alpha must be in (0, 1] and xi in (0, 1)")
        if self.estimators is None:
            self.estimators = list(DEFAULT_CELLS[self.scenario])
        bad = [e for e in self.estimators if e not in ALL_CELLS]
        if bad:
            raise ConfigError(f"unknown estimator(s): {bad}", {"known": ALL_CELLS})


@dataclass
class Population:
    design: ValidatedDesign
    data: PopulationData
    tau: np.ndarray
    digest: str


def generate_population(params: ScenarioParams, rng: RngStream) -> Population:
    """Draw plot sizes, covariates and the potential-outcome table once.

    Order of draws: M_w0, M_w1, v_w, within-plot deviations, theta_w, epsilon.
    """
    gen = rng.generator
    W = params.W
    m0 = np.maximum(params.min_size, gen.poisson(params.lam0, W))
    m1 = np.maximum(params.min_size, gen.poisson(params.lam1, W))
    m = m0 + m1
    design = validate_design(DesignSpec.from_arrays(params.W1, m, m1))
    vw = np.asarray(params.v_mean) + math.sqrt(params.v_var) * gen.standard_normal((W, 2))
    v = vw[design.plot_of_unit]
    if params.delta_var > 0:
        v = v + math.sqrt(params.delta_var) * gen.standard_normal((design.N, 2))
    # theta_w is centred at 2 * max_w(M_w) / M_w, the max taken over the population
    theta = 2.0 * m.max() / m + math.sqrt(params.theta_var) * gen.standard_normal(W)
    eps = gen.uniform(-1.0, 1.0, design.N)
    th = theta[design.plot_of_unit]
    if params.outcome_form == "unit":
        s1, s2 = v[:, 0] ** 2, v[:, 1] ** 2
    elif params.outcome_form == "averaged":
        plot_v1 = np.add.reduceat(v[:, 0], design.offsets[:-1]) / m
        s1 = plot_v1[design.plot_of_unit] ** 2
        s2 = np.full(design.N, v[:, 1].mean() ** 2)
    else:
        raise ConfigError(f"unknown outcome form {params.outcome_form!r}")
    Y = np.column_stack(
        [
            th + 0.5 + 2 * s1 + 2 * s2 + eps,
            -0.5 * th + 1 + s1 + s2 + eps,
            0.5 * th + 1 - s1 - s2 + eps,
            th + 2 + 2 * s1 + 2 * s2 + eps,
        ]
    )
    x = v[:, list(params.x_cols)]
    C = np.eye(2)[list(params.x_cols)]
    data = PopulationData(x=x, v=v, C=C, potential=Y)
    digest = hashlib.sha256(np.ascontiguousarray(Y).tobytes() + np.ascontiguousarray(v).tobytes()).hexdigest()
    return Population(design, data, G @ Y.mean(axis=0), digest)


@dataclass
class MetricRow:
    estimator: str
    scheme: str
    effect: str
    bias: Optional[float]
    sd: Optional[float]
    ese: Optional[float]
    coverage: Optional[float]
    mean_length: Optional[float]
    acceptance_rate: Optional[float]
    n: int = 0
    sd_mcse: Optional[float] = None


@dataclass
class StudyMetrics:
    rows: List[MetricRow]
    failures: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    estimates: Dict[str, np.ndarray] = field(default_factory=dict)
    population_digest: str = ""
    tau: Optional[np.ndarray] = None
    psd_projections: Dict[str, int] = field(default_factory=dict)

    def get(self, cell: str, effect: str) -> MetricRow:
        est, scheme = _cell_parts(cell)
        for r in self.rows:
            if r.estimator == est and r.scheme == scheme and r.effect == effect:
                return r
        raise KeyError((cell, effect))


def _cell_parts(cell: str) -> Tuple[str, str]:
    if cell.endswith(".rnd"):
        return cell[: -len(".rnd")], RANDOMIZED
    return cell, RERANDOMIZED


class _Study:
    def __init__(self, config: StudyConfig):
        self.config = config
        self.root = RngStream(config.seed)
        self.pop = generate_population(config.params, self.root.child(_POPULATION_STREAM))
        d = self.pop.design
        self.design = d
        self.cov_x = CovariateMoments.from_x(d, self.pop.data.x)
        self.cov_v = analysis_moments(d, self.pop.data.v)
        cells = config.estimators
        self.rnd_flavors = [f for f in ("ht", "haj") if f"{f}.rnd" in cells]
        self.rr_cells = {f: [c for c in cells if not c.endswith(".rnd") and c.split(".")[0] == f] for f in ("ht", "haj")}
        self.criteria = {}
        for f, cs in self.rr_cells.items():
            if cs:
                if config.alpha < 1:
                    self.criteria[f] = build_criterion(d, self.cov_x, f, config.alpha)
                else:
                    self.criteria[f] = build_criterion(d, self.cov_x, f, threshold=math.inf)
        self.pool = None
        if self.criteria:
            k = self.cov_x.k
            thr = chi2_quantile(k, config.alpha) if config.alpha < 1 else math.inf
            self.pool = NoisePool.draw(k, thr, config.mc_size, self.root.child(_NOISE_STREAM))

    def randomized_rep(self, r: int):
        d = self.design
        asg = randomize(d, self.root.child(_RANDOMIZED_STREAM, r))
        y = self.pop.data.observe(d, asg)
        z = asg.z(d)
        out = {}
        for f in self.rnd_flavors:
            cell = f"{f}.rnd"
            try:
                yhat = arm_estimate_z(y, z, d, f).values[:, 0]
                tau = G @ yhat
                stt = estimated_tt(d, asg, y, f, arm_means=yhat)
                out[cell] = (tau, normal_intervals(tau, stt, d.W, self.config.xi), False)
            except SplitPlotError as exc:
                out[cell] = exc
        return out, 1

    def rerandomized_rep(self, flavor: str, r: int):
        d = self.design
        cfg = self.config
        crit = self.criteria[flavor]
        res = rerandomize(d, crit, self.root.child(_RERAND_STREAM[flavor], r), cfg.max_draws)
        asg = res.assignment
        y = self.pop.data.observe(d, asg)
        v = self.pop.data.v
        strict = cfg.strict_psd
        out = {}
        for cell in self.rr_cells[flavor]:
            try:
                kind = cell[len(flavor):]
                if kind == "":
                    blocks = sigma_estimated(d, asg, y, self.cov_x, flavor, strict)
                    tau = G @ arm_estimate_z(y, asg.z(d), d, flavor).values[:, 0]
                elif kind == ".P":
                    est = projection_estimate(d, asg, y, self.cov_v, flavor, strict)
                    blk = est.sigma_blocks
                    out[cell] = (est.tau_hat, normal_intervals(est.tau_hat, blk.perp, d.W, cfg.xi), blk.projected)
                    continue
                else:
                    if flavor == "ht":
                        fit = fit_ag_lin(d, asg, y, v, include_alpha=(kind == ".L.a"))
                    else:
                        fit = fit_wls_lin(d, asg, y, v)
                    est = adjusted_estimate(fit, d, asg, y, v, self.cov_x, strict)
                    blocks, tau = est.sigma_blocks, est.tau_hat
                sampler = LimitLawSampler.from_blocks(blocks, crit.threshold_d, cfg.mc_size, pool=self.pool)
                out[cell] = (tau, mc_intervals(tau, sampler, d.W, cfg.xi), blocks.projected)
            except SplitPlotError as exc:
                out[cell] = exc
        return out, res.draws_used

    def run(self) -> StudyMetrics:
        cfg = self.config
        t0 = time.perf_counter()
        jobs = []
        if self.rnd_flavors:
            jobs.append((RANDOMIZED, None))
        for f in ("ht", "haj"):
            if self.rr_cells[f]:
                jobs.append((RERANDOMIZED, f))
        results: Dict[str, list] = {}
        proposals: Dict[str, int] = {}
        failures: List[dict] = []
        for scheme, flavor in jobs:
            if scheme == RANDOMIZED:
                fn = self.randomized_rep
            else:
                def fn(r, _f=flavor):
                    return self.rerandomized_rep(_f, r)
            reps = _map(fn, range(cfg.replications), cfg.threads, failures, scheme, flavor)
            key = flavor or "rnd"
            proposals[key] = sum(n for _, n in reps if n)
            accepted = sum(1 for out, _ in reps if out is not None)
            proposals[key + ":accepted"] = accepted
            for r, (out, _) in enumerate(reps):
                if out is None:
                    continue
                for cell, val in out.items():
                    if isinstance(val, Exception):
                        failures.append({"replication": r, "cell": cell, "code": getattr(val, "code", "error"), "message": str(val)})
                        continue
                    results.setdefault(cell, []).append(val)
        projections = {cell: sum(1 for v in results.get(cell, []) if v[2]) for cell in cfg.estimators}
        rows = []
        estimates = {}
        for cell in cfg.estimators:
            est, scheme = _cell_parts(cell)
            vals = results.get(cell, [])
            if scheme == RANDOMIZED:
                rate = 1.0
            else:
                fl = est.split(".")[0]
                rate = proposals[fl + ":accepted"] / proposals[fl] if proposals.get(fl) else None
            taus = np.array([v[0] for v in vals]).reshape(-1, 3)
            estimates[cell] = taus
            for j, eff in enumerate(EFFECTS):
                rows.append(_aggregate(est, scheme, eff, taus[:, j], [v[1] for v in vals], j, self.pop.tau[j], rate))
        return StudyMetrics(rows, failures, time.perf_counter() - t0, estimates, self.pop.digest, self.pop.tau, projections)


def _map(fn, reps, threads, failures, scheme, flavor):
    def safe(r):
        try:
            return fn(r)
        except SplitPlotError as exc:
            failures.append({"replication": r, "cell": f"{scheme}:{flavor or 'rnd'}", "code": exc.code, "message": str(exc)})
            return None, 0

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(safe, reps))
    else:
        out = [safe(r) for r in reps]
    failures.sort(key=lambda f: (f["replication"], f["cell"]))
    return out


def _aggregate(est, scheme, eff, taus, intervals, j, truth, rate) -> MetricRow:
    n = len(taus)
    if n == 0:
        return MetricRow(est, scheme, eff, None, None, None, None, None, rate, 0)
    bias = float(taus.mean() - truth)
    se = np.array([iv.se[j] for iv in intervals])
    cover = np.array([iv.lower[j] <= truth <= iv.upper[j] for iv in intervals])
    length = np.array([iv.length[j] for iv in intervals])
    sd = float(taus.std(ddof=1)) if n > 1 else None
    ese = float(se.mean() - sd) if sd is not None else None
    mcse = sd / math.sqrt(2 * (n - 1)) if sd is not None else None
    return MetricRow(est, scheme, eff, bias, sd, ese, float(cover.mean()), float(length.mean()), rate, n, mcse)


def run_study(config: StudyConfig) -> StudyMetrics:
    return _Study(config).run()


# ---------------------------------------------------------------- export


def _fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def metrics_to_csv(metrics: StudyMetrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in metrics.rows:
        writer.writerow([r.estimator, r.scheme, r.effect] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS[3:]])
    return buf.getvalue()


def metrics_to_json(metrics: StudyMetrics) -> str:
    rows = []
    for r in metrics.rows:
        rec = {c: getattr(r, c) for c in METRIC_COLUMNS[:3]}
        for c in METRIC_COLUMNS[3:]:
            val = getattr(r, c)
            rec[c] = None if val is None else _fmt(val)
        rows.append(rec)
    doc = {"columns": METRIC_COLUMNS, "rows": rows, "failures": metrics.failures, "psd_projections": metrics.psd_projections}
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def export_metrics(metrics: StudyMetrics, path: str, format: str = "csv") -> None:
    if format == "csv":
        text = metrics_to_csv(metrics)
    elif format == "json":
        text = metrics_to_json(metrics)
    else:
        raise ConfigError(f"unknown metrics format {format!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_metrics(path: str, format: str = "csv") -> List[MetricRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if format == "json":
        recs = json.loads(text)["rows"]
    else:
        recs = list(csv.DictReader(io.StringIO(text)))
    out = []
    for rec in recs:
        nums = [None if rec[c] in ("", None) else float(rec[c]) for c in METRIC_COLUMNS[3:]]
        out.append(MetricRow(rec["estimator"], rec["scheme"], rec["effect"], *nums))
    return out
