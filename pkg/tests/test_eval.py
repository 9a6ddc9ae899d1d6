"""Tests for fold plans, method runners, summaries and new-machine assignment."""

import json

import numpy as np
import pytest

from fedpfd.errors import ConfigurationError, DataError
from fedpfd.evaluation import (CLUSTERING, METHODS, PERSONAL, RATE_BANDS, SINGLE, VANILLA,
                               PreparedData, ResultTable, assign_new_machine, band_of,
                               cross_validate, fault_rate_bands, fault_type_summary,
                               machine_index_vectors, make_folds, prepare, write_reports)
from fedpfd.fedclust import GroupAssignment, clients_from_dataset, cluster_machines
from fedpfd.fedcore import FederationConfig
from fedpfd.synth import (DESK_CHANNELS, FAULT_TYPES, MachineSpec, ScenarioConfig,
                          assign_labels, default_scenario, generate_machine, generate_scenario)


class TestFolds:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_default_fleet_stratified(self, seed):
        cfg = default_scenario(seed)
        labels = {m.machine_id: assign_labels(m, cfg.fault_types, seed) for m in cfg.machines}
        plan = make_folds(labels, 5, seed)
        for mid, lab in labels.items():
            fold = plan.assignment[mid]
            assert sorted(set(fold)) == list(range(5))
            sizes = np.bincount(fold, minlength=5)
            assert sizes.max() - sizes.min() <= 1
            for f in range(lab.shape[1]):
                per_fold = np.bincount(fold[lab[:, f] == 1], minlength=5)
                assert per_fold.max() - per_fold.min() <= 1, (mid, f, per_fold)

    def test_rows_partition(self):
        labels = {1: (np.random.default_rng(0).random((37, 4)) < 0.2).astype(int)}
        plan = make_folds(labels, 4, 0)
        test = np.concatenate([plan.test_rows(1, k) for k in range(4)])
        assert sorted(test) == list(range(37))
        assert set(plan.train_rows(1, 2)).isdisjoint(plan.test_rows(1, 2))

    def test_deterministic(self):
        labels = {3: (np.random.default_rng(1).random((50, 4)) < 0.3).astype(int)}
        a, b = make_folds(labels, 5, 9), make_folds(labels, 5, 9)
        assert a.assignment[3].tobytes() == b.assignment[3].tobytes()

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            make_folds({1: np.zeros((10, 4))}, 1)
        with pytest.raises(DataError):
            make_folds({1: np.zeros((3, 4))}, 5)


def _row(method, fold, mid, fault, f1):
    return {"method": method, "seed": 0, "fold": fold, "machine_id": mid, "fault": fault,
            "f1": f1, "accuracy": 1.0, "precision": 1.0, "recall": 1.0, "positives": 1,
            "records": 10}


class TestSummaries:
    def _table(self):
        return ResultTable([_row(SINGLE, 0, 1, 2, 0.2), _row(SINGLE, 1, 1, 2, 0.4),
                            _row(SINGLE, 0, 2, 0, 0.9), _row(PERSONAL, 0, 1, 2, 0.8)])

    def _data(self):
        lab1 = np.zeros((100, 4), np.int8)
        lab1[:3, 2] = 1            # 3% -> lowest band
        lab2 = np.zeros((10, 4), np.int8)
        lab2[:5, 0] = 1            # 50% -> top band
        return PreparedData({}, {1: lab1, 2: lab2}, {1: 1, 2: 1}, FAULT_TYPES, None)

    def test_per_pair_macro_average(self):
        t = self._table()
        assert t.per_pair(SINGLE) == {(1, 2): pytest.approx(0.3), (2, 0): 0.9}
        assert t.mean(SINGLE) == pytest.approx(0.6)
        assert t.methods() == [SINGLE, PERSONAL]
        assert len(t.filter(method=SINGLE, fold=0).rows) == 2

    def test_band_edges(self):
        assert band_of(0.0) == "0-5%"
        assert band_of(0.0499) == "0-5%"
        assert band_of(0.05) == "5-15%"
        assert band_of(0.5) == ">50%"
        assert band_of(1.0) == ">50%"
        assert [b[2] for b in RATE_BANDS][0] == "0-5%"

    def test_bands_recomputed_from_rows(self):
        bands = fault_rate_bands(self._table(), self._data())
        assert bands[SINGLE] == {"0-5%": pytest.approx(0.3), ">50%": pytest.approx(0.9)}
        assert bands[PERSONAL] == {"0-5%": pytest.approx(0.8)}

    def test_fault_types(self):
        s = fault_type_summary(self._table(), FAULT_TYPES)
        assert s[SINGLE] == {"unbalance": 0.9, "bearing": pytest.approx(0.3)}

    def test_reports(self, tmp_path):
        summary = write_reports(tmp_path, self._table(), self._data(), {"seed": 0})
        assert summary["mean_f1"][PERSONAL] == pytest.approx(0.8)
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {"rows.csv", "machine_fault.csv", "fault_types.csv",
                         "fault_rate_bands.csv", "summary.json"}
        rows = (tmp_path / "rows.csv").read_text().splitlines()
        assert len(rows) == 5
        assert json.loads((tmp_path / "summary.json").read_text())["config_hash"]


def _tiny_scenario(seed=0):
    specs = [
        MachineSpec(1, 1, 0, 50.0, 1.0, 25, {"unbalance": 0.4}, 0.3),
        MachineSpec(2, 2, 0, 50.0, 1.25, 25, {"unbalance": 0.3, "friction": 0.2}, 0.3),
        MachineSpec(3, 1, 1, 50.0, 3.5, 25, {"bearing": 0.4}, 0.3),
        MachineSpec(4, 2, 1, 50.0, 3.5, 25, {"bearing": 0.2}, 0.3),
    ]
    return ScenarioConfig(specs, list(DESK_CHANNELS), FAULT_TYPES, seed)


@pytest.fixture(scope="module")
def tiny():
    cfg = _tiny_scenario()
    ds = generate_scenario(cfg)
    groups = GroupAssignment({1: 0, 2: 0, 3: 1, 4: 1})
    return prepare(cfg, ds), groups


class TestCrossValidate:
    config = FederationConfig(epochs_per_round=1, max_rounds=2, patience=1)

    def test_all_methods_rows(self, tiny):
        data, groups = tiny
        table = cross_validate(data, groups, self.config, METHODS, folds=2, seed=0)
        assert table.methods() == list(METHODS)
        for r in table.rows:
            assert r["positives"] > 0
            assert 0.0 <= r["f1"] <= 1.0
        # every method scores the same (machine, fault, fold) cells
        cells = {m: {(r["machine_id"], r["fault"], r["fold"]) for r in table.filter(method=m).rows}
                 for m in METHODS}
        assert cells[SINGLE] == cells[VANILLA] == cells[CLUSTERING] == cells[PERSONAL]

    def test_workers_do_not_change_results(self, tiny):
        data, groups = tiny
        a = cross_validate(data, groups, self.config, [PERSONAL, VANILLA], folds=2, seed=1)
        b = cross_validate(data, groups, self.config, [PERSONAL, VANILLA], folds=2, seed=1,
                           workers=2)
        assert a.rows == b.rows

    def test_fold_subset(self, tiny):
        data, groups = tiny
        full = cross_validate(data, groups, self.config, [VANILLA], folds=2, seed=2)
        part = cross_validate(data, groups, self.config, [VANILLA], folds=2, seed=2, fold_ids=[1])
        assert part.rows == full.filter(fold=1).rows
        with pytest.raises(ConfigurationError):
            cross_validate(data, groups, self.config, [VANILLA], folds=2, fold_ids=[2])

    def test_group_methods_need_groups(self, tiny):
        data, _ = tiny
        with pytest.raises(ConfigurationError):
            cross_validate(data, None, self.config, [PERSONAL], folds=2)


@pytest.fixture(scope="module")
def clustered():
    cfg = default_scenario(0, sample_scale=0.05)
    ds = generate_scenario(cfg)
    return cfg, cluster_machines(clients_from_dataset(cfg, ds), seed=0)


class TestNewMachine:
    @pytest.mark.parametrize("arch, scale, twin", [(1, 3.5, 13), (0, 1.0, 1)])
    def test_joins_archetype_group(self, clustered, arch, scale, twin):
        cfg, res = clustered
        spec = MachineSpec(99, 4, arch, 50.0, scale, 12, {}, 0.3)
        recs = generate_machine(ScenarioConfig([spec], list(DESK_CHANNELS), FAULT_TYPES, 5), spec)
        vecs = machine_index_vectors(recs, [c.sampling_rate for c in DESK_CHANNELS])
        manifest = {"groups": {"0": {"file": "theta_group_0.ckpt"},
                               "1": {"file": "theta_group_1.ckpt"}}}
        out = assign_new_machine(vecs, res.export, manifest)
        assert out.group_id == res.assignment.groups[twin]
        assert out.theta_file == f"theta_group_{out.group_id}.ckpt"

    def test_no_records(self, clustered):
        with pytest.raises(DataError):
            assign_new_machine(np.zeros((0, 36)), clustered[1].export)
