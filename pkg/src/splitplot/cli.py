"""Command-line surface: config parsing, CSV ingestion, subcommands and error reporting."""

import argparse
import csv
import io
import json
import sys
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import yaml

from .adjustment import adjusted_estimate, analysis_moments, fit_ag_lin, fit_wls_lin, projection_estimate
from .design import Assignment, DesignSpec, PopulationData, ValidatedDesign, randomize, validate_design
from .errors import ConfigError, CountMismatch, DegenerateWholePlot, RejectionBudgetExceeded, SchemaError, SplitPlotError
from .estimators import EFFECTS, FLAVORS, G, arm_estimate_z
from .inference import (
    DEFAULT_MC_SIZE,
    RANDOMIZED,
    RERANDOMIZED,
    LimitLawSampler,
    NoisePool,
    joint_region,
    per_effect_intervals,
)
from .moments import CovariateMoments, sigma_estimated
from .numkernels import RngStream
from .oracle import oracle_from_dict
from .rerandomization import DEFAULT_MAX_DRAWS, build_criterion, mahalanobis, rerandomize
from .simharness import ALL_CELLS, StudyConfig, canonical_scenario, export_metrics, metrics_to_csv, metrics_to_json, run_study

SUBCOMMANDS = ("randomize", "rerandomize", "analyze", "simulate", "oracle-check")
ADJUSTMENTS = ("none", "L", "L.a", "P")
FORMATS = ("csv", "json")

# allowed keys per section; None marks a leaf
SCHEMA: Dict[str, Any] = {
    "subcommand": None,
    "seed": None,
    "alpha": None,
    "xi": None,
    "mc_size": None,
    "flavor": None,
    "scheme": None,
    "adjust": None,
    "max_draws": None,
    "project_psd": None,
    "design": {"W1": None, "M": None, "M1": None, "potential": None, "x": None, "seed": None, "L": None},
    "data": {
        "path": None,
        "x": None,
        "v": None,
        "outcome": None,
        "potential": None,
        "a": None,
        "b": None,
        "m1": None,
        "W1": None,
        "sidecar": None,
        "drop_degenerate": None,
    },
    "simulate": {"scenario": None, "replications": None, "estimators": None, "threads": None, "strict_psd": None},
    "output": {"path": None, "format": None},
}


# ---------------------------------------------------------------- config


@dataclass
class DataSource:
    path: str
    x: List[str] = field(default_factory=list)
    v: List[str] = field(default_factory=list)
    outcome: Optional[str] = None
    potential: Optional[List[str]] = None
    a: str = "a"
    b: str = "b"
    m1: Optional[str] = None
    W1: Optional[int] = None
    sidecar: Optional[str] = None
    drop_degenerate: bool = False


@dataclass
class RunConfig:
    subcommand: str
    seed: Optional[int]
    alpha: float = 0.01
    xi: float = 0.05
    mc_size: int = DEFAULT_MC_SIZE
    flavor: str = "ht"
    scheme: str = RANDOMIZED
    adjust: str = "none"
    max_draws: int = DEFAULT_MAX_DRAWS
    project_psd: bool = False
    design: Optional[dict] = None
    data: Optional[DataSource] = None
    scenario: Optional[str] = None
    replications: int = 2000
    estimators: Optional[List[str]] = None
    threads: int = 1
    strict_psd: bool = False
    output_path: Optional[str] = None
    output_format: str = "csv"

    def study_config(self) -> StudyConfig:
        return StudyConfig(
            scenario=self.scenario,
            seed=self.seed,
            replications=self.replications,
            alpha=self.alpha,
            xi=self.xi,
            mc_size=self.mc_size,
            estimators=self.estimators,
            threads=self.threads,
            max_draws=self.max_draws,
            output=self.output_path,
            strict_psd=self.strict_psd,
        )


def _key_lines(node, prefix=()) -> Dict[Tuple[str, ...], int]:
    """1-based line of every mapping key in a composed YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            out.update(_key_lines(v, path))
    return out


def _load_text(text: str) -> Tuple[dict, Dict[Tuple[str, ...], int]]:
    # YAML parses JSON documents as well
    try:
        doc = yaml.safe_load(text)
        lines = _key_lines(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        ctx = {"line": mark.line + 1, "column": mark.column + 1} if mark is not None else {}
        raise ConfigError(f"config is not valid YAML/JSON: {getattr(exc, 'problem', exc)}", ctx) from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level", {"line": 1})
    return doc, lines


def _check_keys(doc: dict, schema: dict, lines, prefix=()) -> None:
    for key, val in doc.items():
        path = prefix + (str(key),)
        if key not in schema:
            raise ConfigError(f"unknown key {'.'.join(path)!r}", {"field": ".".join(path), "line": lines.get(path)})
        sub = schema[key]
        if isinstance(sub, dict):
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError(f"{'.'.join(path)!r} must be a mapping", {"field": ".".join(path), "line": lines.get(path)})
            _check_keys(val, sub, lines, path)


class _Fields:
    """Typed accessors that report the offending field and line."""

    def __init__(self, doc: dict, lines):
        self.doc = doc
        self.lines = lines

    def err(self, path: Tuple[str, ...], msg: str) -> ConfigError:
        return ConfigError(msg, {"field": ".".join(path), "line": self.lines.get(path)})

    def get(self, *path, default=None):
        cur = self.doc
        for p in path:
            if not isinstance(cur, dict) or cur.get(p) is None:
                return default
            cur = cur[p]
        return cur

    def integer(self, *path, default=None, minimum=None):
        val = self.get(*path, default=default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, int):
            raise self.err(path, f"{'.'.join(path)} must be an integer")
        if minimum is not None and val < minimum:
            raise self.err(path, f"{'.'.join(path)} must be at least {minimum}")
        return int(val)

    def number(self, *path, default=None, low=None, high=None, high_open=True):
        val = self.get(*path, default=default)
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise self.err(path, f"{'.'.join(path)} must be a number")
        val = float(val)
        bad_high = high is not None and (val >= high if high_open else val > high)
        if (low is not None and val <= low) or bad_high:
            raise self.err(path, f"{'.'.join(path)} = {val} is out of range")
        return val

    def choice(self, options, *path, default=None):
        val = self.get(*path, default=default)
        if val not in options:
            raise self.err(path, f"{'.'.join(path)} must be one of {list(options)}")
        return val

    def boolean(self, *path, default=False):
        val = self.get(*path, default=default)
        if not isinstance(val, bool):
            raise self.err(path, f"{'.'.join(path)} must be true or false")
        return val

    def names(self, *path):
        val = self.get(*path, default=[])
        if isinstance(val, str):
            val = [val]
        if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
            raise self.err(path, f"{'.'.join(path)} must be a list of column names")
        return list(val)


def build_run_config(doc: dict, lines: Optional[dict] = None) -> RunConfig:
    """Validate a config mapping against the schema; nothing is computed here."""
    lines = lines or {}
    _check_keys(doc, SCHEMA, lines)
    f = _Fields(doc, lines)
    sub = f.choice(SUBCOMMANDS, "subcommand")
    seed = f.integer("seed", minimum=0)
    if seed is None and sub != "oracle-check":
        raise f.err(("seed",), "a seed is required for reproducibility")
    cfg = RunConfig(subcommand=sub, seed=seed)
    cfg.alpha = f.number("alpha", default=0.01, low=0.0, high=1.0, high_open=False)
    cfg.xi = f.number("xi", default=0.05, low=0.0, high=1.0)
    cfg.mc_size = f.integer("mc_size", default=DEFAULT_MC_SIZE, minimum=100)
    cfg.flavor = f.choice(FLAVORS, "flavor", default="ht")
    cfg.scheme = f.choice((RANDOMIZED, RERANDOMIZED), "scheme", default=RANDOMIZED)
    cfg.adjust = f.choice(ADJUSTMENTS, "adjust", default="none")
    cfg.max_draws = f.integer("max_draws", default=DEFAULT_MAX_DRAWS, minimum=1)
    cfg.project_psd = f.boolean("project_psd")
    cfg.output_path = f.get("output", "path")
    cfg.output_format = f.choice(FORMATS, "output", "format", default="csv")
    if f.get("design") is not None:
        design = dict(f.get("design"))
        for key in ("W1", "M", "M1"):
            if key not in design:
                raise f.err(("design", key), f"design.{key} is required")
        cfg.design = design
    if f.get("data") is not None:
        if f.get("data", "path") is None:
            raise f.err(("data", "path"), "data.path is required")
        pot = f.names("data", "potential") or None
        if pot is not None and len(pot) != 4:
            raise f.err(("data", "potential"), "data.potential needs four columns (00, 01, 10, 11)")
        cfg.data = DataSource(
            path=str(f.get("data", "path")),
            x=f.names("data", "x"),
            v=f.names("data", "v"),
            outcome=f.get("data", "outcome"),
            potential=pot,
            a=str(f.get("data", "a", default="a")),
            b=str(f.get("data", "b", default="b")),
            m1=f.get("data", "m1"),
            W1=f.integer("data", "W1", minimum=1),
            sidecar=f.get("data", "sidecar"),
            drop_degenerate=f.boolean("data", "drop_degenerate"),
        )
    if sub == "simulate":
        name = f.get("simulate", "scenario")
        if name is None:
            raise f.err(("simulate", "scenario"), "simulate.scenario is required")
        try:
            cfg.scenario = canonical_scenario(name)
        except ConfigError as exc:
            raise f.err(("simulate", "scenario"), str(exc)) from None
        if cfg.scenario == "Custom":
            raise f.err(("simulate", "scenario"), "the Custom scenario is only available through the library")
        cfg.replications = f.integer("simulate", "replications", default=2000, minimum=1)
        cfg.threads = f.integer("simulate", "threads", default=1, minimum=1)
        cfg.strict_psd = f.boolean("simulate", "strict_psd")
        est = f.get("simulate", "estimators")
        if est is not None:
            est = f.names("simulate", "estimators")
            bad = [e for e in est if e not in ALL_CELLS]
            if bad:
                raise f.err(("simulate", "estimators"), f"unknown estimator(s) {bad}; known: {ALL_CELLS}")
        cfg.estimators = est
    elif sub == "randomize":
        if cfg.design is None and cfg.data is None:
            raise f.err(("design",), "randomize needs an inline design or a data file")
    elif sub in ("rerandomize", "analyze"):
        if cfg.data is None:
            raise f.err(("data",), f"{sub} needs a data file")
        if sub == "rerandomize" and not cfg.data.x:
            raise f.err(("data", "x"), "rerandomize needs design covariate columns")
        if sub == "analyze":
            if cfg.data.outcome is None:
                raise f.err(("data", "outcome"), "analyze needs an outcome column")
            if cfg.scheme == RERANDOMIZED and not cfg.data.x:
                raise f.err(("data", "x"), "the rerandomized scheme needs the design covariates")
            if cfg.adjust != "none" and not cfg.data.v:
                raise f.err(("data", "v"), f"adjustment {cfg.adjust} needs analysis covariates")
            if cfg.adjust == "L.a" and cfg.flavor != "ht":
                raise f.err(("adjust",), "the whole-plot size adjustment applies to the ht flavor only")
            if cfg.adjust == "P" and cfg.scheme != RERANDOMIZED:
                raise f.err(("adjust",), "the projection estimator applies to the rerandomized scheme")
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse YAML or JSON text into a validated RunConfig."""
    doc, lines = _load_text(text)
    return build_run_config(doc, lines)


# ---------------------------------------------------------------- CSV ingestion


class Ingested(NamedTuple):
    spec: DesignSpec
    data: PopulationData
    assignment: Optional[Assignment]
    plot_ids: List[str]
    subplot_ids: List[str]
    dropped: List[str]


def _floats(rows, col: str, lineno: List[int]) -> np.ndarray:
    out = np.empty(len(rows))
    for i, r in enumerate(rows):
        try:
            out[i] = float(r[col])
        except (TypeError, ValueError):
            raise SchemaError(f"column {col!r} has a non-numeric value", {"line": lineno[i], "value": r[col]}) from None
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise SchemaError(f"column {col!r} has a non-finite value", {"line": lineno[bad]})
    return out


def _binary(values: np.ndarray, col: str) -> np.ndarray:
    if not np.all((values == 0) | (values == 1)):
        raise SchemaError(f"column {col!r} must hold 0/1 levels")
    return values.astype(np.int8)


def _plot_constant(values: np.ndarray, groups: List[np.ndarray], col: str, plot_ids) -> np.ndarray:
    out = []
    for pid, idx in zip(plot_ids, groups):
        vals = values[idx]
        if np.any(vals != vals[0]):
            raise CountMismatch(f"column {col!r} varies within whole plot {pid!r}")
        out.append(vals[0])
    return np.array(out)


def ingest_csv(path: str, schema: DataSource) -> Ingested:
    """Read a plot-major unit table. Rows are grouped by whole_plot_id in
    order of first appearance; file order is kept within a plot."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            header = list(reader.fieldnames or [])
            rows, lineno = [], []
            for r in reader:
                rows.append(r)
                lineno.append(reader.line_num)
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc.strerror}", {"path": path}) from None
    need = ["whole_plot_id", "subplot_id"] + schema.x + schema.v
    if schema.outcome:
        need.append(schema.outcome)
    if schema.potential:
        need += schema.potential
    if schema.m1:
        need.append(schema.m1)
    missing = [c for c in need if c not in header]
    if missing:
        raise SchemaError(f"missing column(s) {missing}", {"path": path, "header": header})
    if not rows:
        raise SchemaError("data file has no rows", {"path": path})

    order: Dict[str, List[int]] = {}
    for i, r in enumerate(rows):
        order.setdefault(r["whole_plot_id"], []).append(i)
    sidecar = _read_sidecar(schema.sidecar) if schema.sidecar else {}
    plot_ids, dropped, notes = [], [], []
    for pid, idx in order.items():
        subs = [rows[i]["subplot_id"] for i in idx]
        if len(set(subs)) != len(subs):
            raise SchemaError(f"duplicate subplot_id within whole plot {pid!r}", {"line": lineno[idx[0]]})
        if len(idx) == 1:
            if not schema.drop_degenerate:
                raise DegenerateWholePlot(
                    f"whole plot {pid!r} has a single subplot; such plots are left out of split-plot analyses "
                    "(rerun with --drop-degenerate to drop them)",
                    {"whole_plot_id": pid, "line": lineno[idx[0]]},
                )
            dropped.append(pid)
            continue
        plot_ids.append(pid)
    if dropped:
        notes.append(f"dropped {len(dropped)} single-subplot whole plot(s): {dropped}")
        warnings.warn(notes[-1], stacklevel=2)
    keep = [i for pid in plot_ids for i in order[pid]]
    rows = [rows[i] for i in keep]
    lineno = [lineno[i] for i in keep]
    sizes = [len(order[pid]) for pid in plot_ids]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    groups = [np.arange(starts[w], starts[w + 1]) for w in range(len(plot_ids))]

    if "M" in sidecar:
        want = _per_plot(sidecar["M"], plot_ids, "M")
        bad = [pid for pid, m, s in zip(plot_ids, want, sizes) if m != s]
        if bad:
            raise CountMismatch("row counts disagree with the design sidecar", {"plots": bad[:10]})

    b = None
    if schema.b in header:
        b = _binary(_floats(rows, schema.b, lineno), schema.b)
        m1 = np.array([int(b[g].sum()) for g in groups])
    elif schema.m1:
        m1 = _plot_constant(_floats(rows, schema.m1, lineno), groups, schema.m1, plot_ids).astype(int)
    elif "M1" in sidecar:
        m1 = np.array(_per_plot(sidecar["M1"], plot_ids, "M1"))
    else:
        raise SchemaError("subplot arm sizes need a b column, an m1 column or a design sidecar")

    a = None
    if schema.a in header:
        a = _plot_constant(_binary(_floats(rows, schema.a, lineno), schema.a), groups, schema.a, plot_ids).astype(np.int8)
        W1 = int(a.sum())
        if schema.W1 is not None and schema.W1 != W1:
            raise CountMismatch("W1 disagrees with the factor-A column", {"W1": schema.W1, "column": W1})
    elif schema.W1 is not None:
        W1 = schema.W1
    elif "W1" in sidecar:
        W1 = int(sidecar["W1"])
    else:
        raise SchemaError("the factor-A arm size needs an a column, data.W1 or a design sidecar")

    spec = DesignSpec.from_arrays(W1, sizes, m1.tolist())
    x = np.column_stack([_floats(rows, c, lineno) for c in schema.x]) if schema.x else np.zeros((len(rows), 0))
    v = np.column_stack([_floats(rows, c, lineno) for c in schema.v]) if schema.v else None
    C = None
    if v is not None and schema.x and all(c in schema.v for c in schema.x):
        C = np.eye(len(schema.v))[[schema.v.index(c) for c in schema.x]]
    observed = _floats(rows, schema.outcome, lineno) if schema.outcome else None
    potential = np.column_stack([_floats(rows, c, lineno) for c in schema.potential]) if schema.potential else None
    data = PopulationData(x=x, v=v, C=C, observed=observed, potential=potential)
    asg = Assignment(a, b) if a is not None and b is not None else None
    return Ingested(spec, data, asg, plot_ids, [r["subplot_id"] for r in rows], dropped)


def _read_sidecar(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise SchemaError(f"cannot read sidecar {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise SchemaError(f"sidecar {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("design sidecar must be a mapping")
    unknown = set(doc) - {"W1", "M", "M1"}
    if unknown:
        raise SchemaError(f"unknown sidecar key(s) {sorted(unknown)}")
    return doc


def _per_plot(values, plot_ids: List[str], name: str) -> List[int]:
    """Sidecar per-plot values, keyed by plot id or listed in plot order."""
    if isinstance(values, dict):
        keyed = {str(k): int(v) for k, v in values.items()}
        missing = [p for p in plot_ids if p not in keyed]
        if missing:
            raise CountMismatch(f"sidecar {name} lacks whole plot(s) {missing[:10]}")
        return [keyed[p] for p in plot_ids]
    values = [int(v) for v in values]
    if len(values) != len(plot_ids):
        raise CountMismatch(f"sidecar {name} has {len(values)} entries for {len(plot_ids)} whole plots")
    return values


# ---------------------------------------------------------------- outputs


def assignment_csv(design: ValidatedDesign, asg: Assignment, plot_ids=None, subplot_ids=None) -> str:
    plot_ids = plot_ids or [str(w) for w in range(design.W)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["whole_plot_id", "subplot_id", "a", "b"])
    for u in range(design.N):
        w = int(design.plot_of_unit[u])
        sid = subplot_ids[u] if subplot_ids else str(u - int(design.offsets[w]))
        writer.writerow([plot_ids[w], sid, int(asg.a[w]), int(asg.b[u])])
    return buf.getvalue()


def _write(path: Optional[str], text: str, stdout) -> None:
    if path is None or path == "-":
        stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _finite(obj):
    """Non-finite floats become null so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _dump(doc: dict) -> str:
    return json.dumps(_finite(doc), indent=2, allow_nan=False) + "\n"


def _effects(vec) -> Dict[str, float]:
    return {e: float(x) for e, x in zip(EFFECTS, vec)}


# ---------------------------------------------------------------- subcommands


def _design_from(cfg: RunConfig):
    """(validated design, ingested table or None)."""
    if cfg.data is not None:
        ing = ingest_csv(cfg.data.path, cfg.data)
        return validate_design(ing.spec), ing
    d = cfg.design
    try:
        spec = DesignSpec.from_arrays(d["W1"], d["M"], d["M1"])
    except (TypeError, ValueError):
        raise ConfigError("design.W1 must be an integer and design.M / design.M1 integer lists", {"field": "design"}) from None
    return validate_design(spec), None


def cmd_randomize(cfg: RunConfig, stdout) -> int:
    design, ing = _design_from(cfg)
    asg = randomize(design, RngStream(cfg.seed))
    ids = (ing.plot_ids, ing.subplot_ids) if ing else (None, None)
    _write(cfg.output_path, assignment_csv(design, asg, *ids), stdout)
    return 0


def cmd_rerandomize(cfg: RunConfig, stdout) -> int:
    design, ing = _design_from(cfg)
    ing.data.check(design)
    crit = build_criterion(design, ing.data.x, cfg.flavor, cfg.alpha)
    try:
        res = rerandomize(design, crit, RngStream(cfg.seed), cfg.max_draws)
    except RejectionBudgetExceeded as exc:
        best, dist = exc.best
        exc.context["best_distance"] = dist
        if cfg.output_path and cfg.output_path != "-":
            best_path = cfg.output_path + ".best.csv"
            _write(best_path, assignment_csv(design, best, ing.plot_ids, ing.subplot_ids), stdout)
            exc.context["best_assignment_path"] = best_path
        else:
            exc.context["best_assignment"] = {"a": best.a.tolist(), "b": best.b.tolist()}
        raise
    _write(cfg.output_path, assignment_csv(design, res.assignment, ing.plot_ids, ing.subplot_ids), stdout)
    summary = {"flavor": cfg.flavor, "threshold": crit.threshold_d, "k": crit.k, "draws_used": res.draws_used, "distance": res.distance}
    if cfg.output_path and cfg.output_path != "-":
        stdout.write(_dump(summary))
    return 0


def analyze(cfg: RunConfig, design: ValidatedDesign, ing: Ingested) -> dict:
    """Point estimate, per-effect intervals and the joint region for one realized assignment."""
    if ing.assignment is None:
        raise SchemaError("analyze needs the realized a and b columns")
    asg = ing.assignment
    asg.check(design)
    data = ing.data
    data.check(design)
    y = data.observed
    v = data.v
    flavor = cfg.flavor
    strict = not cfg.project_psd
    cov_x = CovariateMoments.from_x(design, data.x) if cfg.scheme == RERANDOMIZED else None
    sampler = None
    if cfg.adjust == "P":
        est = projection_estimate(design, asg, y, analysis_moments(design, v), flavor, strict)
        tau, blocks = est.tau_hat, est.sigma_blocks
    elif cfg.adjust in ("L", "L.a"):
        fit = fit_ag_lin(design, asg, y, v, include_alpha=cfg.adjust == "L.a") if flavor == "ht" else fit_wls_lin(design, asg, y, v)
        est = adjusted_estimate(fit, design, asg, y, v, cov_x, strict)
        tau, blocks = est.tau_hat, est.sigma_blocks
    else:
        tau = G @ arm_estimate_z(y, asg.z(design), design, flavor).values[:, 0]
        blocks = sigma_estimated(design, asg, y, cov_x, flavor, strict)
    out: Dict[str, Any] = {"flavor": flavor, "scheme": cfg.scheme, "adjust": cfg.adjust, "W": design.W, "N": design.N, "xi": cfg.xi}
    if cfg.scheme == RERANDOMIZED:
        crit = build_criterion(design, cov_x, flavor, cfg.alpha)
        out["threshold"] = crit.threshold_d
        out["distance_realized"] = mahalanobis(crit, asg, design)
        if out["distance_realized"] > crit.threshold_d:
            design.warnings.append("the realized assignment does not meet the balance criterion")
        if cfg.adjust != "P":
            stream = RngStream(cfg.seed).child(5)
            pool = NoisePool.draw(crit.k, crit.threshold_d, cfg.mc_size, stream)
            sampler = LimitLawSampler.from_blocks(blocks, crit.threshold_d, cfg.mc_size, pool=pool)
    ints = per_effect_intervals(tau, sampler if sampler is not None else blocks, cfg.scheme, cfg.xi, design.W)
    region = joint_region(tau, blocks, cfg.scheme, cfg.xi, design.W, sampler)
    out.update(
        {
            "tau_hat": _effects(tau),
            "se": _effects(ints.se),
            "lower": _effects(ints.lower),
            "upper": _effects(ints.upper),
            "region": {"kind": region.kind, "radius": region.radius, "statistic_at_zero": region.statistic(np.zeros(3))},
            "psd_projected": bool(blocks.projected),
            "warnings": list(design.warnings),
        }
    )
    return out


def cmd_analyze(cfg: RunConfig, stdout) -> int:
    design, ing = _design_from(cfg)
    _write(cfg.output_path, _dump(analyze(cfg, design, ing)), stdout)
    return 0


def cmd_simulate(cfg: RunConfig, stdout) -> int:
    metrics = run_study(cfg.study_config())
    if cfg.output_path and cfg.output_path != "-":
        export_metrics(metrics, cfg.output_path, cfg.output_format)
    else:
        stdout.write(metrics_to_csv(metrics) if cfg.output_format == "csv" else metrics_to_json(metrics))
    return 0


def cmd_oracle(cfg: RunConfig, stdout) -> int:
    checks = oracle_from_dict(cfg.design)
    for c in checks:
        stdout.write(c.line() + "\n")
    return 0 if all(c.passed for c in checks) else 3


COMMANDS = {
    "randomize": cmd_randomize,
    "rerandomize": cmd_rerandomize,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "oracle-check": cmd_oracle,
}


# ---------------------------------------------------------------- argv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, {"argv": True})


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitplot", description="Randomize, rerandomize, analyze and simulate 2x2 split-plot experiments.")
    p.add_argument("--json-errors", action="store_true", help="print errors as JSON on stderr")
    subs = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS)
        if data:
            sp.add_argument("--data", help="unit-level CSV")
            sp.add_argument("--x", nargs="+", help="design covariate columns")
            sp.add_argument("--v", nargs="+", help="analysis covariate columns")
            sp.add_argument("--sidecar", help="design sidecar (W1, M1)")
            sp.add_argument("--drop-degenerate", action="store_true", default=None)

    sp = subs.add_parser("randomize", help="draw one split-plot assignment")
    common(sp)
    sp.add_argument("--design", help="inline design file with W1, M, M1")

    sp = subs.add_parser("rerandomize", help="draw until the covariate balance criterion holds")
    common(sp)
    sp.add_argument("--flavor", choices=FLAVORS)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--max-draws", type=int)

    sp = subs.add_parser("analyze", help="estimate effects for a realized assignment")
    common(sp)
    sp.add_argument("--outcome")
    sp.add_argument("--flavor", choices=FLAVORS)
    sp.add_argument("--scheme", choices=(RANDOMIZED, RERANDOMIZED))
    sp.add_argument("--adjust", choices=ADJUSTMENTS)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--xi", type=float)
    sp.add_argument("--mc-size", type=int)
    sp.add_argument("--project-psd", action="store_true", default=None, help="project an indefinite residual covariance onto the PSD cone")

    sp = subs.add_parser("simulate", help="replicated simulation study")
    common(sp, data=False)
    sp.add_argument("--scenario")
    sp.add_argument("--replications", type=int)
    sp.add_argument("--estimators", nargs="+")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--format", choices=FORMATS)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--xi", type=float)
    sp.add_argument("--mc-size", type=int)
    sp.add_argument("--max-draws", type=int)
    sp.add_argument("--strict-psd", action="store_true", default=None)

    sp = subs.add_parser("oracle-check", help="enumeration invariants on a small design")
    sp.add_argument("--design", help="design file with W1, M, M1 (default: built-in toy design)")
    sp.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS)
    return p


def _load_file(path: str) -> Tuple[dict, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", {"path": path}) from None
    return _load_text(text)


def _overlay(args: argparse.Namespace) -> Tuple[dict, dict]:
    """Config file (if any) with command-line flags layered on top."""
    doc, lines = _load_file(args.config) if getattr(args, "config", None) else ({}, {})
    if doc.get("subcommand") not in (None, args.subcommand):
        raise ConfigError("config subcommand differs from the command line", {"field": "subcommand", "line": lines.get(("subcommand",))})
    doc["subcommand"] = args.subcommand

    def put(path, val):
        if val is None:
            return
        cur = doc
        for p in path[:-1]:
            if cur.get(p) is None:
                cur[p] = {}
            cur = cur[p]
        cur[path[-1]] = val

    g = lambda name: getattr(args, name, None)  # noqa: E731
    put(("seed",), g("seed"))
    put(("alpha",), g("alpha"))
    put(("xi",), g("xi"))
    put(("mc_size",), g("mc_size"))
    put(("flavor",), g("flavor"))
    put(("scheme",), g("scheme"))
    put(("adjust",), g("adjust"))
    put(("max_draws",), g("max_draws"))
    put(("project_psd",), g("project_psd"))
    put(("output", "path"), g("out"))
    put(("output", "format"), g("format"))
    put(("data", "path"), g("data"))
    put(("data", "x"), g("x"))
    put(("data", "v"), g("v"))
    put(("data", "outcome"), g("outcome"))
    put(("data", "sidecar"), g("sidecar"))
    put(("data", "drop_degenerate"), g("drop_degenerate"))
    put(("simulate", "scenario"), g("scenario"))
    put(("simulate", "replications"), g("replications"))
    put(("simulate", "estimators"), g("estimators"))
    put(("simulate", "threads"), g("threads"))
    put(("simulate", "strict_psd"), g("strict_psd"))
    if g("design"):
        ddoc, _ = _load_file(args.design)
        put(("design",), ddoc)
    return doc, lines


def _report(exc: SplitPlotError, as_json: bool, stderr) -> None:
    if as_json:
        stderr.write(json.dumps(exc.to_dict(), default=_json_default) + "\n")
        return
    stderr.write(f"error [{exc.code}]: {exc.message}\n")
    for k, v in exc.context.items():
        if k != "best_assignment":
            stderr.write(f"  {k}: {v}\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def main(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    """Run one subcommand; returns 0, 2 (input/config error) or 3 (numerical failure)."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = _parser().parse_args(argv)
        doc, lines = _overlay(args)
        cfg = build_run_config(doc, lines)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: stderr.write(f"warning: {msg}\n")
            return COMMANDS[cfg.subcommand](cfg, stdout)
    except SplitPlotError as exc:
        _report(exc, as_json, stderr)
        return exc.exit_code if exc.exit_code in (2, 3) else 3


def console_main() -> None:
    sys.exit(main())
