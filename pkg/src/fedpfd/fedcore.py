"""Personalised federated training with adaptive aggregation weights.

Agents are (factory, group) pairs.  Every round each agent loads the global
common block and its group's heads, trains locally, and uploads its
parameters with one F1 score.  The server then averages the common block over
all agents and each group's heads over that group's agents, both weighted by
the adaptive F1-based coefficients.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dsp import FeatureTable, NormStats
from .errors import ConfigurationError, DataError, ProtocolError
from .model import (DEFAULT_LR, F1_FLOOR, DiagnosisModel, TaskState, build_model,
                    train_local)
from .nn import ParamSet, load_checkpoint, params_to_bytes

log = logging.getLogger(__name__)

PERSONALIZED = "personalized"
FEDAVG = "fedavg"
MODES = (PERSONALIZED, FEDAVG)


@dataclass(frozen=True)
class FederationConfig:
    """Round-loop settings shared by every federated and single-machine run."""

    n_factory: int = 3
    n_group: int = 2
    epochs_per_round: int = 2
    max_rounds: int = 30
    patience: int = 5
    lr: float = DEFAULT_LR
    batch_size: int = 16
    seed: int = 0
    threshold: float = 1e-3
    momentum: float = 0.9
    mode: str = PERSONALIZED

    def validate(self) -> "FederationConfig":
        for name in ("n_factory", "n_group", "epochs_per_round", "max_rounds", "patience",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.patience >= self.max_rounds and self.max_rounds > 1:
            raise ConfigurationError("patience must be smaller than max_rounds")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown aggregation mode {self.mode!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FederationConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown federation fields {sorted(extra)}")
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# Adaptive weights and aggregation
# ---------------------------------------------------------------------------


def adaptive_weights(f1_scores: Sequence[float], floor: float = F1_FLOOR) -> np.ndarray:
    """c_k = sum_m F_m / F_k**2 after flooring each F at ``floor``."""
    f = np.maximum(np.asarray(f1_scores, dtype=np.float64), floor)
    if f.size == 0:
        raise ProtocolError("adaptive weights need at least one score")
    return f.sum() / (f * f)


def normalized(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.any(w > 0):
        raise ProtocolError(f"aggregation weights must be >= 0 and not all zero: {w}")
    return w / w.sum()


def aggregate(param_sets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Weighted mean sum_k a_k c_k / sum_k c_k, accumulated in float64.

    A single input, or identical inputs, come back unchanged bit for bit.
    """
    if not param_sets or len(param_sets) != len(weights):
        raise ProtocolError("need one weight per parameter set")
    first = param_sets[0]
    for p in param_sets[1:]:
        if not p.same_structure(first):
            raise ProtocolError("parameter sets differ in structure")
    w = normalized(weights)
    out = ParamSet()
    for name, ref in first.items():
        stack = [p[name] for p in param_sets]
        if all(a.tobytes() == ref.tobytes() for a in stack[1:]):
            out.add(name, ref.copy(), first.tag(name))
            continue
        acc = np.zeros(ref.shape, dtype=np.float64)
        for a, wk in zip(stack, w):
            acc += wk * a
        out.add(name, acc.astype(ref.dtype), first.tag(name))
    return out


# ---------------------------------------------------------------------------
# Feature normalisation from moment sums
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMoments:
    """Per-dimension count, sum and sum of squares of every model input."""

    count: int
    sums: tuple[np.ndarray, ...]
    sumsq: tuple[np.ndarray, ...]


def feature_moments(table: FeatureTable) -> FeatureMoments:
    return FeatureMoments(len(table),
                          tuple(a.sum(axis=0, dtype=np.float64) for a in table.inputs),
                          tuple(np.square(a, dtype=np.float64).sum(axis=0) for a in table.inputs))


def merge_feature_moments(reports: Sequence[FeatureMoments]) -> NormStats:
    """Z-score stats of the union of all reporting tables."""
    n = sum(r.count for r in reports)
    if n == 0:
        raise DataError("no records to normalise")
    means, stds = [], []
    for i in range(len(reports[0].sums)):
        s = np.sum([r.sums[i] for r in reports], axis=0)
        ss = np.sum([r.sumsq[i] for r in reports], axis=0)
        m = s / n
        sd = np.sqrt(np.maximum(ss / n - m * m, 0.0))
        sd[sd <= 1e-12] = 1.0
        means.append(m.astype(np.float32))
        stds.append(sd.astype(np.float32))
    return NormStats(tuple(means), tuple(stds))


# ---------------------------------------------------------------------------
# Agents and server
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentUpload:
    """Everything an agent sends to the server in one round."""

    agent_id: tuple[int, int]
    params: ParamSet
    f1: float


UPLOAD_FIELDS = ("agent_id", "params", "f1")


def check_upload(msg) -> None:
    if not isinstance(msg, AgentUpload) or tuple(f.name for f in fields(msg)) != UPLOAD_FIELDS:
        raise ProtocolError(f"invalid agent upload {type(msg).__name__}")
    if not isinstance(msg.params, ParamSet) or not np.isscalar(msg.f1):
        raise ProtocolError("agent uploads carry one ParamSet and one scalar F1")


@dataclass
class Agent:
    """Training data of one factory's machines in one group; never shared."""

    factory_id: int
    group_id: int
    data: FeatureTable
    labels: np.ndarray
    model: DiagnosisModel
    machine_ids: tuple[int, ...] = ()
    state: TaskState | None = None
    last_f1: float | None = None
    last_loss: float = float("nan")
    rng: np.random.Generator | None = None
    rounds: int = 0
    epoch_log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(self.data) == 0:
            raise DataError(f"agent {self.agent_id} has no records")

    @property
    def agent_id(self) -> tuple[int, int]:
        return (self.factory_id, self.group_id)

    def local_round(self, params: ParamSet, config: FederationConfig) -> AgentUpload:
        """Load ``params``, train ``M`` epochs and return the upload."""
        self.model.params.load(params)
        if self.rng is None:
            self.rng = np.random.default_rng([config.seed, self.factory_id, self.group_id])
        res = train_local(self.model, self.data, self.labels, config.epochs_per_round,
                          batch_size=config.batch_size, lr=config.lr,
                          momentum=config.momentum, state=self.state, rng=self.rng)
        self.state = res.state
        self.rounds += 1
        base = {"round": self.rounds, "factory_id": self.factory_id, "group_id": self.group_id}
        self.epoch_log += [{**base, **h} for h in res.history]
        self.last_f1 = res.upload_f1
        self.last_loss = res.history[-1]["loss"] if res.history else float("nan")
        return AgentUpload(self.agent_id, self.model.params.copy(), float(res.upload_f1))


@dataclass
class ServerState:
    w_global: ParamSet
    theta: dict[int, ParamSet]
    round: int = 0
    f1_history: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    mean_f1_history: list[float] = field(default_factory=list)

    def params_for(self, group: int) -> ParamSet:
        """Common block plus the heads of ``group``."""
        if group not in self.theta:
            raise ProtocolError(f"no head parameters for group {group}")
        return ParamSet.combine(self.w_global, self.theta[group])

    def copy(self) -> "ServerState":
        return ServerState(self.w_global.copy(), {g: t.copy() for g, t in self.theta.items()},
                           self.round, {k: list(v) for k, v in self.f1_history.items()},
                           list(self.mean_f1_history))


def init_server(model: DiagnosisModel, groups: Sequence[int]) -> ServerState:
    """Round 0: one seeded initialisation broadcast to every group."""
    heads = model.params.heads()
    return ServerState(model.params.common(), {g: heads.copy() for g in sorted(set(groups))})


def build_agents(tables: Mapping[int, FeatureTable], labels: Mapping[int, np.ndarray],
                 factory_of: Mapping[int, int], group_of: Mapping[int, int],
                 template: DiagnosisModel) -> list[Agent]:
    """Pool machines by (factory, group); empty pairs get no agent.

    ``tables`` must already be normalised.  Agents are ordered by id.
    """
    members: dict[tuple[int, int], list[int]] = {}
    for mid in sorted(tables):
        members.setdefault((factory_of[mid], group_of[mid]), []).append(mid)
    agents = []
    for (fid, gid), mids in sorted(members.items()):
        rows = [tables[m] for m in mids]
        data = FeatureTable([np.concatenate([t.inputs[i] for t in rows])
                             for i in range(len(rows[0].inputs))],
                            np.concatenate([t.indices for t in rows]))
        lab = np.concatenate([np.asarray(labels[m], dtype=np.float32) for m in mids])
        agents.append(Agent(fid, gid, data, lab, template.copy(), tuple(mids)))
    return agents


def _server_update(uploads: Sequence[AgentUpload], groups: Sequence[int], server: ServerState,
                   mode: str) -> tuple[ServerState, dict]:
    f1 = [u.f1 for u in uploads]
    new = server.copy()
    weights: dict = {}
    if mode == PERSONALIZED:
        c = normalized(adaptive_weights(f1))
        new.w_global = aggregate([u.params.common() for u in uploads], c)
        for u, ck in zip(uploads, c):
            weights[u.agent_id] = {"common": float(ck)}
        for g in sorted(set(groups)):
            idx = [i for i, gi in enumerate(groups) if gi == g]
            d = normalized(adaptive_weights([f1[i] for i in idx]))
            new.theta[g] = aggregate([uploads[i].params.heads() for i in idx], d)
            for i, dk in zip(idx, d):
                weights[uploads[i].agent_id]["group"] = float(dk)
    else:
        u_w = np.full(len(uploads), 1.0 / len(uploads))
        full = aggregate([u.params for u in uploads], u_w)
        new.w_global = full.common()
        heads = full.heads()
        for g in new.theta:
            new.theta[g] = heads.copy()
        for u in uploads:
            weights[u.agent_id] = {"common": float(u_w[0]), "group": float(u_w[0])}
    return new, weights


def run_round(agents: Sequence[Agent], server: ServerState, config: FederationConfig
              ) -> tuple[ServerState, list[dict]]:
    """One communication round; returns the new server state and log rows.

    Any agent failure aborts the round before the server state changes.
    """
    agents = sorted(agents, key=lambda a: a.agent_id)
    uploads = []
    for a in agents:
        up = a.local_round(server.params_for(a.group_id), config)
        check_upload(up)
        uploads.append(up)
    new, weights = _server_update(uploads, [a.group_id for a in agents], server, config.mode)
    new.round = server.round + 1
    rows = []
    for a, u in zip(agents, uploads):
        new.f1_history.setdefault(a.agent_id, []).append(u.f1)
        rows.append({"round": new.round, "factory_id": a.factory_id, "group_id": a.group_id,
                     "mean_f1": u.f1, "loss": a.last_loss, "records": len(a.data),
                     "weight_common": weights[a.agent_id]["common"],
                     "weight_group": weights[a.agent_id]["group"]})
    new.mean_f1_history.append(float(np.mean([u.f1 for u in uploads])))
    return new, rows


@dataclass
class TrainingOutcome:
    server: ServerState         # state of the best round
    best_round: int
    rounds_run: int
    converged: bool             # stopped by the patience rule before max_rounds
    log_rows: list[dict]


def run_training(agents: Sequence[Agent], config: FederationConfig,
                 server: ServerState | None = None,
                 on_round: Callable[[ServerState, list[dict]], None] | None = None
                 ) -> TrainingOutcome:
    """Rounds until the mean agent F1 stops improving by more than the threshold."""
    config.validate()
    if not agents:
        raise DataError("no agents to train")
    if server is None:
        model = build_model(agents[0].model.profile, agents[0].model.n_faults, config.seed)
        server = init_server(model, [a.group_id for a in agents])
    best, best_f1, best_round = server.copy(), -np.inf, 0
    stale, rows, converged = 0, [], False
    for _ in range(config.max_rounds):
        server, round_rows = run_round(agents, server, config)
        rows.extend(round_rows)
        if on_round is not None:
            on_round(server, round_rows)
        f1 = server.mean_f1_history[-1]
        log.info("round %d mean F1 %.4f", server.round, f1)
        if f1 > best_f1 + config.threshold:
            best, best_f1, best_round, stale = server.copy(), f1, server.round, 0
        else:
            stale += 1
            if stale >= config.patience:
                converged = True
                break
    return TrainingOutcome(best, best_round, server.round, converged, rows)


# ---------------------------------------------------------------------------
# Files: round log and deployable bundle
# ---------------------------------------------------------------------------

LOG_FIELDS = ("round", "factory_id", "group_id", "mean_f1", "loss", "records",
              "weight_common", "weight_group")


def write_round_log(path: str | Path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k])
                        for k in LOG_FIELDS})


def save_bundle(out_dir: str | Path, server: ServerState, meta: Mapping | None = None,
                centroid_export: str | Path | None = None) -> dict:
    """Write ``w_global.ckpt``, one ``theta_group_<g>.ckpt`` per group and ``bundle.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    blob = params_to_bytes(server.w_global)
    (out / "w_global.ckpt").write_bytes(blob)
    files["w_global"] = {"file": "w_global.ckpt", "sha256": hashlib.sha256(blob).hexdigest()}
    groups = {}
    for g, theta in sorted(server.theta.items()):
        blob = params_to_bytes(theta)
        name = f"theta_group_{g}.ckpt"
        (out / name).write_bytes(blob)
        groups[str(g)] = {"file": name, "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {"format": "fedpfd-bundle-1", "round": server.round,
                "w_global": files["w_global"], "groups": groups, "meta": dict(meta or {})}
    if centroid_export is not None:
        data = Path(centroid_export).read_bytes()
        manifest["centroid_export"] = {"file": str(centroid_export),
                                       "sha256": hashlib.sha256(data).hexdigest()}
    (out / "bundle.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_bundle(bundle_dir: str | Path) -> tuple[ServerState, dict]:
    root = Path(bundle_dir)
    try:
        manifest = json.loads((root / "bundle.json").read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"no bundle.json in {root}") from None
    w = load_checkpoint(root / manifest["w_global"]["file"])
    theta = {int(g): load_checkpoint(root / e["file"]) for g, e in manifest["groups"].items()}
    return ServerState(w, theta, int(manifest["round"])), manifest
