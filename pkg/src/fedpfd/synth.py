"""Synthetic multi-channel vibration data for a fleet of machines.

Every record is a pure function of ``(master_seed, machine_id, record index)``
so machines can be generated in any order, or in parallel, with identical
results.  Fault signatures are superposed on a healthy baseline:

* unbalance     - 1X amplitude multiplied by a gain >= 3
* misalignment  - 2X and 3X raised above the 1X baseline
* bearing       - impulse train at 3.58X, each impulse a decaying ring
* friction      - 0.5X sub-harmonic plus elevated broadband noise
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError

FAULT_TYPES = ("unbalance", "misalignment", "bearing", "friction")
BEARING_ORDER = 3.58
CHANNEL_KINDS = ("velocity", "acceleration")

_LABEL_STREAM = 0x4C41424C
_RECORD_STREAM = 0x52454344


@dataclass(frozen=True)
class ChannelConfig:
    channel_id: int
    kind: str
    sampling_rate: float
    length: int


@dataclass(frozen=True)
class MachineSpec:
    machine_id: int
    factory_id: int
    archetype_id: int
    rotating_freq: float
    vibration_scale: float
    sample_count: int
    fault_rates: Mapping[str, float] = field(default_factory=dict)
    noise_level: float = 0.3

    def rate_vector(self, fault_types: Sequence[str]) -> np.ndarray:
        return np.array([float(self.fault_rates.get(f, 0.0)) for f in fault_types])


@dataclass
class ScenarioConfig:
    machines: list[MachineSpec]
    channels: list[ChannelConfig]
    fault_types: tuple[str, ...] = FAULT_TYPES
    master_seed: int = 0

    @property
    def n_faults(self) -> int:
        return len(self.fault_types)

    def machine(self, machine_id: int) -> MachineSpec:
        for m in self.machines:
            if m.machine_id == machine_id:
                return m
        raise KeyError(machine_id)

    @property
    def sampling_rates(self) -> list[float]:
        return [c.sampling_rate for c in self.channels]

    def validate(self) -> None:
        if not self.machines:
            raise ConfigurationError("scenario has no machines")
        if not self.channels:
            raise ConfigurationError("scenario has no channels")
        ids = [m.machine_id for m in self.machines]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("machine ids are not unique")
        if len(set(self.fault_types)) != len(self.fault_types) or not self.fault_types:
            raise ConfigurationError("fault types must be a non-empty list of unique names")
        for c in self.channels:
            if c.kind not in CHANNEL_KINDS:
                raise ConfigurationError(f"channel {c.channel_id}: unknown kind {c.kind!r}")
            if c.length < 8 or c.length & (c.length - 1):
                raise ConfigurationError(
                    f"channel {c.channel_id}: length {c.length} is not a power of two >= 8")
            if c.sampling_rate <= 0:
                raise ConfigurationError(f"channel {c.channel_id}: sampling rate must be positive")
        for m in self.machines:
            if m.sample_count <= 0:
                raise ConfigurationError(f"machine {m.machine_id}: sample_count must be positive")
            if m.rotating_freq <= 0 or m.vibration_scale <= 0 or m.noise_level < 0:
                raise ConfigurationError(f"machine {m.machine_id}: invalid physical parameters")
            for name, rate in m.fault_rates.items():
                if name not in self.fault_types:
                    raise ConfigurationError(f"machine {m.machine_id}: unknown fault {name!r}")
                if not 0.0 <= rate < 1.0:
                    raise ConfigurationError(
                        f"machine {m.machine_id}: fault rate {rate} for {name} outside [0, 1)")
            for c in self.channels:
                # highest harmonic index read back is 5X
                if 5 * m.rotating_freq >= c.sampling_rate / 2:
                    raise ConfigurationError(
                        f"machine {m.machine_id}: 5X = {5 * m.rotating_freq} Hz not below "
                        f"Nyquist of channel {c.channel_id}")

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "machines": [dict(asdict(m), fault_rates=dict(m.fault_rates)) for m in self.machines],
            "channels": [asdict(c) for c in self.channels],
            "fault_types": list(self.fault_types),
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        expected = {"machines", "channels", "fault_types", "master_seed"}
        missing = expected - set(data)
        extra = set(data) - expected
        if missing or extra:
            raise ConfigurationError(
                f"scenario fields mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
        try:
            machines = [MachineSpec(**dict(m, fault_rates=dict(m.get("fault_rates", {}))))
                        for m in data["machines"]]
            channels = [ChannelConfig(**c) for c in data["channels"]]
        except TypeError as exc:
            raise ConfigurationError(f"malformed scenario: {exc}") from exc
        cfg = cls(machines, channels, tuple(data["fault_types"]), int(data["master_seed"]))
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"scenario file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scenario file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class VibrationRecord:
    machine_id: int
    channels: list[np.ndarray]
    rotating_freq: float
    labels: np.ndarray


# ---------------------------------------------------------------------------
# Archetypes: baseline harmonic content of a family of similar machines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Archetype:
    harmonic2: float    # 2X amplitude relative to 1X
    harmonic3: float
    resonance: float    # structural ring frequency excited by bearing impacts, Hz
    ring_decay: float   # ring time constant, s


ARCHETYPES = {
    0: Archetype(harmonic2=0.12, harmonic3=0.04, resonance=1500.0, ring_decay=6e-4),
    1: Archetype(harmonic2=0.35, harmonic3=0.10, resonance=1150.0, ring_decay=9e-4),
}


def archetype(archetype_id: int) -> Archetype:
    if archetype_id in ARCHETYPES:
        return ARCHETYPES[archetype_id]
    # deterministic extension for scenarios with more than two families
    k = archetype_id
    return Archetype(0.1 + 0.12 * (k % 4), 0.03 + 0.03 * (k % 3), 900.0 + 150.0 * (k % 5),
                     5e-4 + 1e-4 * (k % 4))


# ---------------------------------------------------------------------------
# Seeding and labels
# ---------------------------------------------------------------------------


def record_seed(master_seed: int, machine_id: int, index: int) -> int:
    """Per-record seed hashed from (master seed, machine, record index)."""
    ss = np.random.SeedSequence([master_seed, machine_id, _RECORD_STREAM, index])
    return int(ss.generate_state(1, np.uint64)[0])


def positive_count(rate: float, n: int) -> int:
    """round(rate * n), halves rounded up."""
    return int(math.floor(rate * n + 0.5 + 1e-9))


def assign_labels(spec: MachineSpec, fault_types: Sequence[str], master_seed: int) -> np.ndarray:
    """Multi-label matrix ``(sample_count, N)`` with exact per-fault counts.

    Labels are first drawn as independent Bernoulli variables, then the
    surplus (or deficit) against round(rate * n) is corrected by flipping a
    random subset, so co-occurrence stays close to independent.
    """
    n = spec.sample_count
    rng = np.random.default_rng(
        np.random.SeedSequence([master_seed, spec.machine_id, _LABEL_STREAM]))
    labels = np.zeros((n, len(fault_types)), dtype=np.int8)
    for i, rate in enumerate(spec.rate_vector(fault_types)):
        draw = rng.random(n) < rate
        target = positive_count(rate, n)
        pos = np.flatnonzero(draw)
        if pos.size > target:
            draw[rng.choice(pos, pos.size - target, replace=False)] = False
        elif pos.size < target:
            neg = np.flatnonzero(~draw)
            draw[rng.choice(neg, target - pos.size, replace=False)] = True
        labels[:, i] = draw
    return labels


# ---------------------------------------------------------------------------
# Signal synthesis
# ---------------------------------------------------------------------------

_CHANNEL_GAIN = {
    # (harmonic gain, impulse gain)
    "velocity": (1.0, 0.45),
    "acceleration": (0.6, 1.0),
}


def _fault_index(fault_types: Sequence[str], name: str) -> int | None:
    try:
        return list(fault_types).index(name)
    except ValueError:
        return None


def synthesize_record(spec: MachineSpec, channels: Sequence[ChannelConfig], labels: np.ndarray,
                      seed: int, fault_types: Sequence[str] = FAULT_TYPES) -> VibrationRecord:
    """One multi-channel record of machine ``spec`` with the given fault labels."""
    labels = np.asarray(labels)
    if labels.shape != (len(fault_types),):
        raise ConfigurationError(f"labels must have length {len(fault_types)}, got {labels.shape}")
    active = {name for name, on in zip(fault_types, labels) if on}
    rng = np.random.default_rng(seed)
    arch = archetype(spec.archetype_id)
    fr = spec.rotating_freq
    amp = spec.vibration_scale

    # record-level physical state shared by all channels
    phases = rng.uniform(0, 2 * np.pi, size=6)
    jitter = 1.0 + 0.04 * rng.standard_normal()
    a1 = amp * jitter
    a_half = 0.0
    a2 = a1 * arch.harmonic2
    a3 = a1 * arch.harmonic3
    noise = spec.noise_level * amp
    severity = rng.uniform(0.0, 1.0, size=4)
    if "unbalance" in active:
        a1 *= 3.0 + severity[0]
    if "misalignment" in active:
        base = amp * jitter
        a2 = base * (1.1 + 0.5 * severity[1])
        a3 = base * (1.02 + 0.3 * severity[1])
    if "friction" in active:
        a_half = amp * (0.12 + 0.25 * severity[3])
        noise *= 1.25 + 0.5 * severity[3]
    bearing = "bearing" in active
    impact = amp * (0.7 + 1.0 * severity[2])
    impact_phase = rng.uniform(0, 1.0 / (BEARING_ORDER * fr))

    out = []
    for ch in channels:
        h_gain, i_gain = _CHANNEL_GAIN[ch.kind]
        t = np.arange(ch.length) / ch.sampling_rate
        w = 2 * np.pi * fr * t
        x = h_gain * (a1 * np.sin(w + phases[0])
                      + a2 * np.sin(2 * w + phases[1])
                      + a3 * np.sin(3 * w + phases[2]))
        if a_half:
            x += h_gain * a_half * np.sin(0.5 * w + phases[3])
        if bearing:
            x += i_gain * impact * _impulse_train(t, BEARING_ORDER * fr, impact_phase,
                                                  min(arch.resonance, 0.4 * ch.sampling_rate),
                                                  arch.ring_decay, rng)
        x += noise * rng.standard_normal(ch.length)
        out.append(x.astype(np.float32))
    return VibrationRecord(spec.machine_id, out, float(fr), labels.astype(np.int8))


def _impulse_train(t: np.ndarray, rate: float, offset: float, ring_freq: float, decay: float,
                   rng: np.random.Generator) -> np.ndarray:
    period = 1.0 / rate
    x = np.zeros_like(t)
    n_imp = int(np.ceil((t[-1] - offset) / period)) + 1
    # small timing slip between impacts, as with real rolling elements
    starts = offset + period * np.arange(n_imp) + 0.01 * period * rng.standard_normal(n_imp)
    for s in starts:
        dt = t - s
        on = (dt >= 0) & (dt < 8 * decay)
        x[on] += np.exp(-dt[on] / decay) * np.sin(2 * np.pi * ring_freq * dt[on])
    return x


def generate_machine(config: ScenarioConfig, spec: MachineSpec) -> list[VibrationRecord]:
    labels = assign_labels(spec, config.fault_types, config.master_seed)
    return [synthesize_record(spec, config.channels, labels[i],
                              record_seed(config.master_seed, spec.machine_id, i),
                              config.fault_types)
            for i in range(spec.sample_count)]


def generate_scenario(config: ScenarioConfig) -> dict[int, list[VibrationRecord]]:
    """All records of every machine, keyed by machine id."""
    config.validate()
    return {m.machine_id: generate_machine(config, m) for m in config.machines}


# ---------------------------------------------------------------------------
# Default scenario: 13 pumps in 3 factories
# ---------------------------------------------------------------------------

DESK_CHANNELS = [
    ChannelConfig(0, "velocity", 2000.0, 1024),
    ChannelConfig(1, "acceleration", 4000.0, 1024),
    ChannelConfig(2, "acceleration", 8000.0, 1024),
]

# (machine, factory, rated power kW, samples, {fault number: rate})
FLEET = [
    (1, 1, 45, 1271, {3: 0.028, 4: 0.217}),
    (2, 1, 45, 2416, {4: 0.829}),
    (3, 1, 280, 300, {}),
    (4, 1, 280, 1144, {3: 0.115}),
    (5, 1, 280, 1020, {3: 0.035}),
    (6, 2, 90, 1064, {4: 0.519}),
    (7, 2, 90, 712, {4: 0.051}),
    (8, 2, 45, 824, {3: 0.015, 4: 0.248}),
    (9, 2, 280, 1848, {1: 0.045, 2: 0.455, 3: 0.123}),
    (10, 2, 280, 1060, {3: 0.023}),
    (11, 3, 90, 872, {4: 0.317}),
    (12, 3, 90, 1018, {2: 0.059, 3: 0.065, 4: 0.371}),
    (13, 3, 280, 2360, {1: 0.325, 3: 0.488}),
]
POWER_SCALE = {45: 1.0, 90: 1.25, 280: 3.5}
DESK_SAMPLE_SCALE = 0.2


def default_scenario(master_seed: int = 0, sample_scale: float = DESK_SAMPLE_SCALE,
                     noise_level: float = 0.3) -> ScenarioConfig:
    """13 machines, 3 factories, two machine families (<= 90 kW and 280 kW).

    Sample counts are the fleet's counts times ``sample_scale``; fault rates
    are kept as listed.
    """
    machines = []
    for mid, factory, power, samples, faults in FLEET:
        machines.append(MachineSpec(
            machine_id=mid,
            factory_id=factory,
            archetype_id=1 if power >= 280 else 0,
            rotating_freq=50.0,
            vibration_scale=POWER_SCALE[power],
            sample_count=max(10, int(round(samples * sample_scale))),
            fault_rates={FAULT_TYPES[k - 1]: r for k, r in faults.items()},
            noise_level=noise_level,
        ))
    cfg = ScenarioConfig(machines, list(DESK_CHANNELS), FAULT_TYPES, master_seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

DATA_MAGIC = b"FSPN1"


def machine_to_bytes(records: Sequence[VibrationRecord], lengths: Sequence[int],
                     n_faults: int) -> bytes:
    header = DATA_MAGIC + struct.pack("<I", len(lengths)) \
        + struct.pack(f"<{len(lengths)}I", *lengths) \
        + struct.pack("<II", len(records), n_faults)
    body = b"".join(np.asarray(x, dtype="<f4").tobytes() for r in records for x in r.channels)
    return header + body


def machine_from_bytes(data: bytes) -> tuple[list[list[np.ndarray]], int]:
    if data[:5] != DATA_MAGIC:
        raise ConfigurationError("not a machine data file (bad magic)")
    (n_ch,) = struct.unpack_from("<I", data, 5)
    lengths = struct.unpack_from(f"<{n_ch}I", data, 9)
    pos = 9 + 4 * n_ch
    n_rec, n_faults = struct.unpack_from("<II", data, pos)
    pos += 8
    flat = np.frombuffer(data, dtype="<f4", offset=pos)
    per = sum(lengths)
    if flat.size != per * n_rec:
        raise ConfigurationError("machine data file is truncated")
    out = []
    for r in range(n_rec):
        row, off = flat[r * per:(r + 1) * per], 0
        chans = []
        for n in lengths:
            chans.append(row[off:off + n].astype(np.float32))
            off += n
        out.append(chans)
    return out, n_faults


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(out_dir: str | Path, config: ScenarioConfig,
                  dataset: Mapping[int, Sequence[VibrationRecord]]) -> dict:
    """One ``machine_XXX.bin`` + sidecar JSON per machine and a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lengths = [c.length for c in config.channels]
    entries = []
    for m in config.machines:
        recs = dataset[m.machine_id]
        blob = machine_to_bytes(recs, lengths, config.n_faults)
        stem = f"machine_{m.machine_id:03d}"
        (out / f"{stem}.bin").write_bytes(blob)
        sidecar = {
            "machine_id": m.machine_id,
            "factory_id": m.factory_id,
            "rotating_freq": m.rotating_freq,
            "fault_types": list(config.fault_types),
            "labels": [r.labels.astype(int).tolist() for r in recs],
            "data_file": f"{stem}.bin",
            "sha256": _sha256(blob),
        }
        (out / f"{stem}.json").write_text(json.dumps(sidecar, sort_keys=True))
        entries.append({"machine_id": m.machine_id, "data_file": f"{stem}.bin",
                        "labels_file": f"{stem}.json", "sha256": sidecar["sha256"]})
    manifest = {"format": "FSPN1", "scenario": config.to_dict(), "machines": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(data_dir: str | Path) -> tuple[ScenarioConfig, dict[int, list[VibrationRecord]]]:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"no dataset manifest in {root}") from None
    config = ScenarioConfig.from_dict(manifest["scenario"])
    dataset = {}
    for entry in manifest["machines"]:
        mid = entry["machine_id"]
        side = json.loads((root / entry["labels_file"]).read_text())
        chans, _ = machine_from_bytes((root / entry["data_file"]).read_bytes())
        fr = float(side["rotating_freq"])
        dataset[mid] = [VibrationRecord(mid, c, fr, np.asarray(l, dtype=np.int8))
                        for c, l in zip(chans, side["labels"])]
    return config, dataset


def read_records(data_dir: str | Path, machine_ids: Iterable[int] | None = None):
    config, dataset = read_dataset(data_dir)
    if machine_ids is not None:
        dataset = {m: dataset[m] for m in machine_ids}
    return config, dataset
