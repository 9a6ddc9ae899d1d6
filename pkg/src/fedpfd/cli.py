"""Command-line entry point: ``python -m fedpfd <command> [options]``.

Every command writes into a temporary sibling directory and renames it to
``--out`` only after all files are complete, so a failed run never leaves
partial outputs behind.  Exit codes: 0 success, 1 failure, 2 usage error,
3 finished but an iterative stage hit its round limit without converging.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import PROFILES, get_profile
from .errors import ConfigurationError, FedPFDError
from .evaluation import (METHODS, PERSONAL, assign_new_machine, cross_validate,
                         machine_index_vectors, prepare, write_reports)
from .fedclust import (DEFAULT_EPS, DEFAULT_K, DEFAULT_MAX_ROUNDS, CentroidExport,
                       GroupAssignment, clients_from_dataset, cluster_machines)
from .fedcore import FederationConfig, build_agents, run_training, save_bundle, write_round_log
from .fedcore import feature_moments, merge_feature_moments, load_bundle
from .model import build_model, write_epoch_log
from .synth import ScenarioConfig, default_scenario, generate_scenario, read_dataset, write_dataset

log = logging.getLogger("fedpfd")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
WORKERS_ENV = "FEDPFD_WORKERS"


@dataclass
class RunConfig:
    """Options shared by all commands; loaded from ``--config`` and overridden by flags."""

    scenario: str | None = None
    data_dir: str | None = None
    clusters_dir: str | None = None
    bundle_dir: str | None = None
    profile: str = "desk"
    seed: int = 0
    folds: int = 5
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    k: int = DEFAULT_K
    eps: float = DEFAULT_EPS
    cluster_rounds: int = DEFAULT_MAX_ROUNDS
    sample_scale: float | None = None
    federation: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        base = Path(path).parent
        for key in ("scenario", "data_dir", "clusters_dir", "bundle_dir"):
            if raw.get(key) is not None:
                raw[key] = str(base / raw[key])
        return cls(**raw)

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}")
        return self

    def federation_config(self, n_factory: int, n_group: int) -> FederationConfig:
        fc = FederationConfig.from_dict({**self.federation, "seed": self.seed}) \
            if self.federation else FederationConfig(seed=self.seed)
        return replace(fc, n_factory=n_factory, n_group=n_group).validate()

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _manifest(stage: str, cfg: RunConfig, extra: dict | None = None) -> dict:
    return {"stage": stage, "seed": cfg.seed, "config": cfg.to_dict(),
            "config_hash": _hash(cfg.to_dict()),
            "versions": {"fedpfd": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            **(extra or {})}


class _AtomicDir:
    """Build outputs in a temporary directory; move into place on success."""

    def __init__(self, out: str | Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        os.replace(self.tmp, self.out)
        return False


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _need(value, what: str):
    if value is None:
        raise ConfigurationError(f"missing {what}")
    return value


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    if cfg.scenario is not None:
        scenario = ScenarioConfig.load(cfg.scenario)
    else:
        kw = {} if cfg.sample_scale is None else {"sample_scale": cfg.sample_scale}
        scenario = default_scenario(cfg.seed, **kw)
    dataset = generate_scenario(scenario)
    with _AtomicDir(out) as tmp:
        write_dataset(tmp, scenario, dataset)
    print(f"wrote {sum(len(v) for v in dataset.values())} records for "
          f"{len(dataset)} machines to {out}")
    return EXIT_OK


def _load_groups(cfg: RunConfig) -> tuple[CentroidExport, GroupAssignment]:
    root = Path(_need(cfg.clusters_dir, "clusters directory (--clusters)"))
    export = CentroidExport.load(root / "centroids.json")
    try:
        groups = GroupAssignment.from_dict(json.loads((root / "groups.json").read_text()))
    except FileNotFoundError:
        raise ConfigurationError(f"no groups.json in {root}") from None
    return export, groups


def cmd_cluster(cfg: RunConfig, out: Path) -> int:
    scenario, dataset = read_dataset(_need(cfg.data_dir, "data directory (--data)"))
    res = cluster_machines(clients_from_dataset(scenario, dataset), cfg.k, cfg.eps,
                           cfg.cluster_rounds, cfg.seed)
    with _AtomicDir(out) as tmp:
        res.export.save(tmp / "centroids.json")
        _write_json(tmp / "groups.json", res.assignment.to_dict())
        _write_json(tmp / "manifest.json", _manifest("cluster", cfg, {
            "rounds": res.export.centroids.round, "converged": res.export.centroids.converged}))
    for g in sorted(set(res.assignment.groups.values())):
        print(f"group {g}: machines {res.assignment.members(g)}")
    if not res.export.centroids.converged:
        print(f"warning: federated k-means did not converge in {cfg.cluster_rounds} rounds",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    """Personalised federated training on every record; writes the deployable bundle."""
    scenario, dataset = read_dataset(_need(cfg.data_dir, "data directory (--data)"))
    _, groups = _load_groups(cfg)
    profile = get_profile(cfg.profile)
    data = prepare(scenario, dataset, profile)
    stats = merge_feature_moments([feature_moments(t) for t in data.tables.values()])
    tables = {m: stats.apply(t) for m, t in data.tables.items()}
    fc = cfg.federation_config(len(set(data.factory_of.values())),
                               len(set(groups.groups.values())))
    template = build_model(profile, len(data.fault_types), fc.seed)
    agents = build_agents(tables, data.labels, data.factory_of, groups.groups, template)
    outcome = run_training(agents, fc)
    with _AtomicDir(out) as tmp:
        write_round_log(tmp / "round_log.csv", outcome.log_rows)
        write_epoch_log(tmp / "epoch_log.csv", [r for a in agents for r in a.epoch_log],
                        data.fault_types)
        np.savez(tmp / "feature_norm.npz",
                 **{f"mean{i}": m for i, m in enumerate(stats.means)},
                 **{f"std{i}": s for i, s in enumerate(stats.stds)})
        save_bundle(tmp, outcome.server, {
            "profile": profile.name, "fault_types": list(data.fault_types),
            "best_round": outcome.best_round, "rounds_run": outcome.rounds_run,
            "converged": outcome.converged, "federation": fc.to_dict(),
            "centroids_sha256": hashlib.sha256(
                (Path(cfg.clusters_dir) / "centroids.json").read_bytes()).hexdigest()})
        _write_json(tmp / "manifest.json", _manifest("train", cfg))
    print(f"trained {outcome.rounds_run} rounds; best round {outcome.best_round} with mean F1 "
          f"{outcome.server.mean_f1_history[-1]:.4f}")
    if not outcome.converged:
        print("warning: training stopped at max_rounds before F1 stopped improving",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cross_validate(cfg: RunConfig, methods, workers: int):
    scenario, dataset = read_dataset(_need(cfg.data_dir, "data directory (--data)"))
    _, groups = _load_groups(cfg)
    data = prepare(scenario, dataset, get_profile(cfg.profile))
    fc = cfg.federation_config(len(set(data.factory_of.values())),
                               len(set(groups.groups.values())))
    table = cross_validate(data, groups, fc, methods, cfg.folds, cfg.seed, workers)
    return table, data, fc


def _report(cfg: RunConfig, out: Path, methods, workers: int, stage: str) -> int:
    table, data, fc = _cross_validate(cfg, methods, workers)
    with _AtomicDir(out) as tmp:
        summary = write_reports(tmp, table, data, {"stage": stage, "seed": cfg.seed,
                                                   "folds": cfg.folds, "methods": list(methods),
                                                   "federation": fc.to_dict()})
        _write_json(tmp / "manifest.json", _manifest(stage, cfg))
    for m, v in summary["mean_f1"].items():
        print(f"{m}: mean F1 {v:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, workers: int = 1) -> int:
    methods = cfg.methods if cfg.methods != list(METHODS) else [PERSONAL]
    return _report(cfg, out, methods, workers, "evaluate")


def cmd_compare(cfg: RunConfig, out: Path, workers: int = 1) -> int:
    return _report(cfg, out, list(METHODS), workers, "compare")


def cmd_assign(cfg: RunConfig, out: Path) -> int:
    """Group of every machine in ``--data`` using the exported centroids."""
    scenario, dataset = read_dataset(_need(cfg.data_dir, "data directory (--data)"))
    export, _ = _load_groups(cfg)
    manifest = load_bundle(cfg.bundle_dir)[1] if cfg.bundle_dir else None
    rates = [c.sampling_rate for c in scenario.channels]
    result = {}
    for mid in sorted(dataset):
        a = assign_new_machine(machine_index_vectors(dataset[mid], rates), export, manifest)
        result[str(mid)] = {"group_id": a.group_id, "theta_file": a.theta_file}
        print(f"machine {mid}: group {a.group_id}")
    with _AtomicDir(out) as tmp:
        _write_json(tmp / "assignment.json", result)
        _write_json(tmp / "manifest.json", _manifest("assign", cfg))
    return EXIT_OK


COMMANDS = ("synth", "cluster", "train", "evaluate", "compare", "assign")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpfd", description="Federated multi-task fault diagnosis")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--profile", choices=sorted(PROFILES), help="feature/model size profile")
    p.add_argument("--workers", type=int, help=f"worker processes (env {WORKERS_ENV})")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--clusters", help="clustering output directory")
    p.add_argument("--bundle", help="trained bundle directory")
    p.add_argument("--scenario", help="scenario JSON for synth")
    p.add_argument("--folds", type=int)
    p.add_argument("--methods", help="comma-separated methods")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> tuple[RunConfig, int]:
    cfg = RunConfig.load(args.config)
    for flag, key in (("seed", "seed"), ("profile", "profile"), ("data", "data_dir"),
                      ("clusters", "clusters_dir"), ("bundle", "bundle_dir"),
                      ("scenario", "scenario"), ("folds", "folds")):
        if getattr(args, flag) is not None:
            setattr(cfg, key, getattr(args, flag))
    if args.methods:
        cfg.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    workers = args.workers
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        try:
            workers = int(env) if env else 1
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    if workers < 1:
        raise ConfigurationError("worker count must be positive")
    return cfg.validate(), workers


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg, workers = _resolve(args)
        out = Path(args.out)
        if stage == "synth":
            return cmd_synth(cfg, out)
        if stage == "cluster":
            return cmd_cluster(cfg, out)
        if stage == "train":
            return cmd_train(cfg, out)
        if stage == "evaluate":
            return cmd_evaluate(cfg, out, workers)
        if stage == "compare":
            return cmd_compare(cfg, out, workers)
        return cmd_assign(cfg, out)
    except (FedPFDError, OSError, KeyError, ValueError) as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
