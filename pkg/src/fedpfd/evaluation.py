"""Cross-validated comparison of single-machine, vanilla FL, clustering FL and
personalised FL, plus per-fault-type and per-fault-rate summaries."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dsp import DESK, FeatureTable, Profile, featurize_records, index_vector
from .errors import ConfigurationError, DataError
from .fedclust import CentroidExport, GroupAssignment
from .fedcore import (FEDAVG, PERSONALIZED, FederationConfig, build_agents, feature_moments,
                      merge_feature_moments, run_training)
from .model import DiagnosisModel, build_model, metrics, predict

log = logging.getLogger(__name__)

SINGLE = "single_machine"
VANILLA = "vanilla_fl"
CLUSTERING = "clustering_fl"
PERSONAL = "personalized_fl"
METHODS = (SINGLE, VANILLA, CLUSTERING, PERSONAL)

RATE_BANDS = ((0.0, 0.05, "0-5%"), (0.05, 0.15, "5-15%"), (0.15, 0.30, "15-30%"),
              (0.30, 0.50, "30-50%"), (0.50, 1.01, ">50%"))


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    """Raw features and labels per machine plus the scenario metadata."""

    tables: dict[int, FeatureTable]
    labels: dict[int, np.ndarray]
    factory_of: dict[int, int]
    fault_types: tuple[str, ...]
    profile: Profile

    @property
    def machine_ids(self) -> list[int]:
        return sorted(self.tables)

    def fault_rate(self, machine_id: int, fault: int) -> float:
        return float(self.labels[machine_id][:, fault].mean())


def prepare(config, dataset: Mapping[int, Sequence], profile: Profile = DESK) -> PreparedData:
    rates = [c.sampling_rate for c in config.channels]
    tables, labels = {}, {}
    for m in config.machines:
        recs = dataset[m.machine_id]
        tables[m.machine_id] = featurize_records(recs, rates, profile)
        labels[m.machine_id] = np.array([r.labels for r in recs], dtype=np.int8)
    return PreparedData(tables, labels, {m.machine_id: m.factory_id for m in config.machines},
                        tuple(config.fault_types), profile)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Per machine, ``folds`` disjoint arrays of record indices."""

    folds: int
    seed: int
    assignment: dict[int, np.ndarray]     # record -> fold id

    def test_rows(self, machine_id: int, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment[machine_id] == fold)

    def train_rows(self, machine_id: int, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment[machine_id] != fold)


def stratified_assignment(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy multi-label stratification.

    Records carrying the rarest faults are placed first, each into the fold
    with the largest unmet demand for its faults; ties go to the smaller fold,
    then the lower fold id.
    """
    labels = np.asarray(labels).astype(bool)
    n, n_faults = labels.shape
    pos = labels.sum(axis=0)
    want = pos / folds
    have = np.zeros((folds, n_faults))
    size = np.zeros(folds)
    rarity = np.where(labels, pos[None, :], np.inf).min(axis=1)
    order = rng.permutation(n)
    order = order[np.argsort(rarity[order], kind="stable")]
    out = np.empty(n, dtype=np.int64)
    for i in order:
        f = labels[i]
        demand = (want[f][None, :] - have[:, f]).sum(axis=1) if f.any() else np.zeros(folds)
        score = np.lexsort((np.arange(folds), size, -demand))
        k = int(score[0])
        out[i] = k
        have[k, f] += 1
        size[k] += 1
    return out


def make_folds(labels: Mapping[int, np.ndarray], folds: int = 5, seed: int = 0) -> FoldPlan:
    if folds < 2:
        raise ConfigurationError("need at least two folds")
    assignment = {}
    for mid in sorted(labels):
        lab = np.asarray(labels[mid])
        if lab.shape[0] < folds:
            raise DataError(f"machine {mid} has {lab.shape[0]} records, fewer than {folds} folds")
        rng = np.random.default_rng([seed, mid])
        assignment[mid] = stratified_assignment(lab, folds, rng)
    return FoldPlan(folds, seed, assignment)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

ROW_FIELDS = ("method", "seed", "fold", "machine_id", "fault", "f1", "accuracy", "precision",
              "recall", "positives", "records")


@dataclass
class ResultTable:
    """Per-fold metric rows; rows exist only where the test fold has positives."""

    rows: list[dict] = field(default_factory=list)

    def extend(self, rows: Sequence[dict]) -> None:
        self.rows.extend(rows)

    def methods(self) -> list[str]:
        seen = {r["method"] for r in self.rows}
        return [m for m in METHODS if m in seen] + sorted(seen - set(METHODS))

    def filter(self, **kw) -> "ResultTable":
        return ResultTable([r for r in self.rows if all(r[k] == v for k, v in kw.items())])

    def per_pair(self, method: str, metric: str = "f1") -> dict[tuple[int, int], float]:
        """Fold (and seed) macro-average per (machine, fault)."""
        acc: dict[tuple[int, int], list[float]] = {}
        for r in self.rows:
            if r["method"] == method:
                acc.setdefault((r["machine_id"], r["fault"]), []).append(r[metric])
        return {k: float(np.mean(v)) for k, v in sorted(acc.items())}

    def mean(self, method: str, metric: str = "f1") -> float:
        vals = list(self.per_pair(method, metric).values())
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_model(model: DiagnosisModel, data: FeatureTable, labels: np.ndarray, *,
                   method: str, seed: int, fold: int, machine_id: int) -> list[dict]:
    m = metrics(predict(model, data.inputs), labels)
    rows = []
    for i in range(labels.shape[1]):
        if m.positives[i] == 0:
            continue
        rows.append({"method": method, "seed": seed, "fold": fold, "machine_id": machine_id,
                     "fault": i, "f1": float(m.f1[i]), "accuracy": float(m.accuracy[i]),
                     "precision": float(m.precision[i]), "recall": float(m.recall[i]),
                     "positives": int(m.positives[i]), "records": int(labels.shape[0])})
    return rows


# ---------------------------------------------------------------------------
# Method runners (one fold)
# ---------------------------------------------------------------------------


def _federation_stats(data: PreparedData, plan: FoldPlan, fold: int, machines: Sequence[int]):
    return merge_feature_moments([
        feature_moments(data.tables[m].take(plan.train_rows(m, fold))) for m in machines])


def _train_federation(data: PreparedData, plan: FoldPlan, fold: int, machines: Sequence[int],
                      group_of: Mapping[int, int], factory_of: Mapping[int, int],
                      config: FederationConfig):
    """Train one federation on the training rows of ``machines``; returns (outcome, stats)."""
    stats = _federation_stats(data, plan, fold, machines)
    tables = {m: stats.apply(data.tables[m].take(plan.train_rows(m, fold))) for m in machines}
    labels = {m: data.labels[m][plan.train_rows(m, fold)] for m in machines}
    template = build_model(data.profile, len(data.fault_types), config.seed)
    agents = build_agents(tables, labels, factory_of, group_of, template)
    return run_training(agents, config), stats, template


def _evaluate_machines(data: PreparedData, plan: FoldPlan, fold: int, machines, outcome, stats,
                       template, group_of, method, seed) -> list[dict]:
    rows = []
    for m in machines:
        model = template.copy()
        model.params.load(outcome.server.params_for(group_of[m]))
        test = plan.test_rows(m, fold)
        rows += evaluate_model(model, stats.apply(data.tables[m].take(test)), data.labels[m][test],
                               method=method, seed=seed, fold=fold, machine_id=m)
    return rows


def run_single_machine(data: PreparedData, plan: FoldPlan, fold: int, config: FederationConfig,
                       seed: int = 0) -> list[dict]:
    """One model per machine on its own data; same round/epoch budget as an agent."""
    cfg = replace(config, mode=FEDAVG)
    rows = []
    for m in data.machine_ids:
        out, stats, tmpl = _train_federation(data, plan, fold, [m], {m: 0}, {m: 0}, cfg)
        rows += _evaluate_machines(data, plan, fold, [m], out, stats, tmpl, {m: 0}, SINGLE, seed)
    return rows


def run_vanilla_fl(data: PreparedData, plan: FoldPlan, fold: int, config: FederationConfig,
                   seed: int = 0) -> list[dict]:
    """One agent per factory, uniform averaging of every parameter."""
    cfg = replace(config, mode=FEDAVG)
    machines = data.machine_ids
    groups = {m: 0 for m in machines}
    out, stats, tmpl = _train_federation(data, plan, fold, machines, groups, data.factory_of, cfg)
    return _evaluate_machines(data, plan, fold, machines, out, stats, tmpl, groups, VANILLA, seed)


def run_clustering_fl(data: PreparedData, plan: FoldPlan, fold: int, groups: GroupAssignment,
                      config: FederationConfig, seed: int = 0) -> list[dict]:
    """An independent uniform-averaging federation per machine group."""
    cfg = replace(config, mode=FEDAVG)
    rows = []
    for g in sorted(set(groups.groups.values())):
        machines = [m for m in data.machine_ids if groups.groups[m] == g]
        gmap = {m: g for m in machines}
        out, stats, tmpl = _train_federation(data, plan, fold, machines, gmap, data.factory_of, cfg)
        rows += _evaluate_machines(data, plan, fold, machines, out, stats, tmpl, gmap,
                                   CLUSTERING, seed)
    return rows


def run_personalized_fl(data: PreparedData, plan: FoldPlan, fold: int, groups: GroupAssignment,
                        config: FederationConfig, seed: int = 0) -> list[dict]:
    """Global common block plus per-group heads; each machine uses its group's heads."""
    cfg = replace(config, mode=PERSONALIZED)
    machines = data.machine_ids
    gmap = {m: groups.groups[m] for m in machines}
    out, stats, tmpl = _train_federation(data, plan, fold, machines, gmap, data.factory_of, cfg)
    return _evaluate_machines(data, plan, fold, machines, out, stats, tmpl, gmap, PERSONAL, seed)


def run_method(method: str, data: PreparedData, plan: FoldPlan, fold: int,
               groups: GroupAssignment | None, config: FederationConfig, seed: int = 0) -> list[dict]:
    if method == SINGLE:
        return run_single_machine(data, plan, fold, config, seed)
    if method == VANILLA:
        return run_vanilla_fl(data, plan, fold, config, seed)
    if groups is None:
        raise ConfigurationError(f"{method} needs a group assignment")
    if method == CLUSTERING:
        return run_clustering_fl(data, plan, fold, groups, config, seed)
    if method == PERSONAL:
        return run_personalized_fl(data, plan, fold, groups, config, seed)
    raise ConfigurationError(f"unknown method {method!r}")


_SHARED: dict = {}


def _run_job(job):
    method, fold = job
    s = _SHARED
    return run_method(method, s["data"], s["plan"], fold, s["groups"], s["config"], s["seed"])


def cross_validate(data: PreparedData, groups: GroupAssignment | None, config: FederationConfig,
                   methods: Sequence[str] = METHODS, folds: int = 5, seed: int = 0,
                   workers: int = 1, fold_ids: Sequence[int] | None = None) -> ResultTable:
    """Every method on every fold of one plan; rows come back in job order.

    ``fold_ids`` restricts the run to some folds of the ``folds``-way plan.
    """
    plan = make_folds(data.labels, folds, seed)
    fold_ids = range(folds) if fold_ids is None else list(fold_ids)
    if any(not 0 <= k < folds for k in fold_ids):
        raise ConfigurationError(f"fold ids {list(fold_ids)} outside 0..{folds - 1}")
    jobs = [(m, k) for m in methods for k in fold_ids]
    _SHARED.update(data=data, plan=plan, groups=groups, config=config, seed=seed)
    try:
        if workers > 1 and len(jobs) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
                results = list(ex.map(_run_job, jobs))
        else:
            results = [_run_job(j) for j in jobs]
    finally:
        _SHARED.clear()
    table = ResultTable()
    for r in results:
        table.extend(r)
    return table


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def fault_type_summary(table: ResultTable, fault_types: Sequence[str]) -> dict[str, dict[str, float]]:
    """Mean F1 per fault type per method over (machine, fault) pairs."""
    out = {}
    for method in table.methods():
        pairs = table.per_pair(method)
        out[method] = {}
        for i, name in enumerate(fault_types):
            vals = [v for (m, f), v in pairs.items() if f == i]
            if vals:
                out[method][name] = float(np.mean(vals))
    return out


def band_of(rate: float) -> str:
    for lo, hi, name in RATE_BANDS:
        if lo <= rate < hi:
            return name
    raise DataError(f"fault rate {rate} outside [0, 1]")


def fault_rate_bands(table: ResultTable, data: PreparedData) -> dict[str, dict[str, float]]:
    """Mean F1 per fault-rate band per method; empty bands are left out."""
    out = {}
    for method in table.methods():
        acc: dict[str, list[float]] = {}
        for (m, f), v in table.per_pair(method).items():
            acc.setdefault(band_of(data.fault_rate(m, f)), []).append(v)
        out[method] = {name: float(np.mean(acc[name])) for _, _, name in RATE_BANDS if name in acc}
    return out


# ---------------------------------------------------------------------------
# Deployment: a new machine joins
# ---------------------------------------------------------------------------


@dataclass
class NewMachineAssignment:
    group_id: int
    theta_file: str | None


def assign_new_machine(index_vectors: np.ndarray, export: CentroidExport,
                       bundle_manifest: Mapping | None = None) -> NewMachineAssignment:
    """Group of a new machine by nearest-centroid majority over its records."""
    vecs = np.atleast_2d(np.asarray(index_vectors, dtype=np.float64))
    if vecs.size == 0 or vecs.shape[0] == 0:
        raise DataError("a new machine needs at least one record")
    g = export.group_of(vecs)
    theta = None
    if bundle_manifest is not None:
        entry = bundle_manifest.get("groups", {}).get(str(g))
        theta = entry["file"] if entry else None
    return NewMachineAssignment(g, theta)


def machine_index_vectors(records: Sequence, sampling_rates: Sequence[float]) -> np.ndarray:
    return np.array([index_vector(r.channels, sampling_rates, r.rotating_freq) for r in records])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_rows_csv(path: str | Path, table: ResultTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in table.rows:
            w.writerow({k: _fmt(r[k]) for k in ROW_FIELDS})


def write_pair_csv(path: str | Path, table: ResultTable, fault_types: Sequence[str]) -> None:
    """Per (machine, fault) F1/accuracy/precision/recall for each method."""
    methods = table.methods()
    metric_names = ("f1", "accuracy", "precision", "recall")
    per = {(me, mt): table.per_pair(me, mt) for me in methods for mt in metric_names}
    keys = sorted({k for me in methods for k in per[(me, "f1")]})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["machine_id", "fault"] + [f"{me}_{mt}" for me in methods for mt in metric_names])
        for m, f in keys:
            w.writerow([m, fault_types[f]] + [_fmt(per[(me, mt)].get((m, f), float("nan")))
                                              for me in methods for mt in metric_names])


def write_summary_csv(path: str | Path, summary: Mapping[str, Mapping[str, float]],
                      key_name: str) -> None:
    methods = list(summary)
    keys = []
    for me in methods:
        keys += [k for k in summary[me] if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key_name] + methods)
        for k in keys:
            w.writerow([k] + [_fmt(summary[me].get(k, float("nan"))) for me in methods])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_reports(out_dir: str | Path, table: ResultTable, data: PreparedData,
                  meta: Mapping) -> dict:
    """CSV tables plus ``summary.json``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out / "rows.csv", table)
    write_pair_csv(out / "machine_fault.csv", table, data.fault_types)
    types = fault_type_summary(table, data.fault_types)
    bands = fault_rate_bands(table, data)
    write_summary_csv(out / "fault_types.csv", types, "fault_type")
    write_summary_csv(out / "fault_rate_bands.csv", bands, "band")
    summary = {"meta": dict(meta), "config_hash": config_hash(dict(meta)),
               "mean_f1": {m: table.mean(m) for m in table.methods()},
               "fault_types": types, "fault_rate_bands": bands}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
