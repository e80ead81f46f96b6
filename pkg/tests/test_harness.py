import dataclasses
import hashlib
import math

import numpy as np
import pytest
from scipy import stats

from canopy.core import assign_splits, filter_dataset, load_record_cloud, normalize_cloud, read_manifest
from canopy.harness.evaluate import (COMPARE_COLUMNS, CONIFER_BINS, compare_models, conifer_bin,
                                     evaluate_predictions, load_report, metrics, metrics_from_residuals,
                                     read_residuals, write_report)
from canopy.harness.synth import (Allometry, SyntheticConfig, Tree, plot_area_ha, plot_targets,
                                  sample_trees, scan, synth_generate)
from canopy.harness.train import (HISTORY_COLUMNS, TrainConfig, TrainingDiverged, checkpoint_hash,
                                  load_checkpoint, predict_clouds, save_checkpoint, train, write_history)
from canopy.core import AugmentConfig, PlotRecord, RegressionTargets
from canopy.models import build_model, tiny_config


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def small_cfg():
    return SyntheticConfig(radius_m=6.0, points_per_m2=2.0)


class TestSynth:
    def test_one_tree_hand_oracle(self):
        cfg = SyntheticConfig()
        t = Tree(0.0, 0.0, 20.0, 5.0, 10.0, True)
        targets, share = plot_targets([t], cfg)
        area = math.pi * 15.0 ** 2 / 1e4
        assert targets.agb == pytest.approx(0.12 * 20 ** 1.6 * 25 / 1000 / area, rel=1e-12)
        assert targets.volume == pytest.approx(0.00015 * 20 ** 1.7 * 25 / area, rel=1e-12)
        assert share == 100.0
        assert plot_area_ha(cfg) == pytest.approx(area)

    def test_mixed_share(self):
        cfg = SyntheticConfig(allometry={"conifer": Allometry(1, 0, 1, 0), "broadleaf": Allometry(3, 0, 1, 0)})
        trees = [Tree(0, 0, 10, 1, 5, True), Tree(1, 1, 10, 1, 5, False)]
        assert plot_targets(trees, cfg)[1] == 25.0

    def test_zero_trees(self, rng):
        cfg = SyntheticConfig()
        targets, share = plot_targets([], cfg)
        assert targets.agb == 0 and targets.volume == 0 and share == 0
        cloud = scan([], cfg, rng)
        assert len(cloud) > 0 and np.all(cloud.xyz[:, 2] < 1.3)
        rec = PlotRecord("z", "z.csv", targets)
        kept, report = filter_dataset([rec], loader=lambda r: cloud)
        assert kept == [] and report.counts() == {"no points above 1.3 m": 1}

    def test_doubling_trees(self):
        cfg = SyntheticConfig()
        single, double = [], []
        for seed in range(100):
            a = plot_targets(sample_trees(cfg, np.random.default_rng(seed), n_trees=15), cfg)[0].agb
            b = plot_targets(sample_trees(cfg, np.random.default_rng(seed), n_trees=30), cfg)[0].agb
            single.append(a)
            double.append(b)
        single, double = np.array(single), np.array(double)
        assert stats.spearmanr(single, double).statistic > 0.95
        assert np.all(double > single)
        assert 1.6 < np.median(double / single) < 2.4

    def test_scan_returns(self, rng):
        cfg = SyntheticConfig()
        cloud = scan(sample_trees(cfg, rng, n_trees=20), cfg, rng)
        assert np.all(cloud.return_index >= 1)
        assert np.all(cloud.return_index <= cloud.return_count)
        assert np.all(cloud.return_count <= cfg.max_returns)
        assert np.all(np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1]) <= cfg.radius_m + 1e-9)

    def test_deterministic(self, tmp_path):
        synth_generate(small_cfg(), 12, 3, tmp_path / "a")
        synth_generate(small_cfg(), 12, 3, tmp_path / "b")
        synth_generate(small_cfg(), 12, 4, tmp_path / "c")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
        assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")

    def test_manifest(self, tmp_path):
        recs = synth_generate(small_cfg(), 10, 0, tmp_path)
        assert read_manifest(tmp_path / "manifest.jsonl") == recs
        for r in recs:
            assert (tmp_path / r.cloud_path).exists()
            assert 0.0 <= r.conifer_fraction <= 100.0

    def test_invalid(self, tmp_path):
        with pytest.raises(ValueError):
            synth_generate(SyntheticConfig(radius_m=0), 1, 0, tmp_path)


class TestMetrics:
    def test_hand_example(self):
        m = metrics([100.0, 200.0], [90.0, 220.0])
        assert m["rmse"] == pytest.approx(math.sqrt(250), abs=1e-12)
        assert abs(m["rmse"] - 15.811) < 1e-3
        assert m["mape"] == 10.0
        assert m["r2"] == pytest.approx(1 - 500 / 5000)

    def test_zero_targets_excluded(self):
        m = metrics([0.0, 100.0, 0.0], [5.0, 110.0, 1.0])
        assert m["mape"] == 10.0 and m["excluded_n"] == 2 and m["n"] == 3

    def test_constant_target(self):
        m = metrics([3.0, 3.0], [2.0, 4.0])
        assert math.isnan(m["r2"]) and not m["r2_defined"]

    def test_errors(self):
        with pytest.raises(ValueError):
            metrics([], [])
        with pytest.raises(ValueError):
            metrics([1.0], [1.0, 2.0])

    def test_bins_partition(self):
        assert [conifer_bin(v) for v in (0, 1e-9, 33, 33.0001, 66, 66.5, 99.999, 100)] == [
            "0", "(0,33]", "(0,33]", "(33,66]", "(33,66]", "(66,100)", "(66,100)", "100"]
        grid = np.linspace(0, 100, 100001)
        assert {conifer_bin(v) for v in grid} == set(CONIFER_BINS)
        with pytest.raises(ValueError):
            conifer_bin(100.5)


def fake_records(rng, n):
    return [PlotRecord(f"p{i}", f"{i}.csv", RegressionTargets(float(rng.uniform(0, 300)) * (i % 5 != 0),
                                                              float(rng.uniform(0, 500))),
                       float(rng.choice([0, 20, 50, 80, 100])), split="test") for i in range(n)]


class TestReport:
    def test_residuals_recompute_exactly(self, rng, tmp_path):
        recs = fake_records(rng, 40)
        pred = rng.uniform(0, 300, size=(40, 2))
        rep = evaluate_predictions(recs, pred, "m")
        write_report(tmp_path, rep)
        again = metrics_from_residuals(read_residuals(tmp_path / "residuals.csv"))
        for t in ("agb", "volume"):
            for k in ("rmse", "r2", "mape", "n", "excluded_n"):
                assert again[t][k] == rep.targets[t][k]
        assert rep.targets["agb"]["excluded_n"] == 8

    def test_bin_breakdown(self, rng):
        recs = fake_records(rng, 30)
        pred = rng.uniform(0, 300, size=(30, 2))
        rep = evaluate_predictions(recs, pred)
        assert sum(rep.by_conifer_bin[b]["agb"]["n"] for b in rep.by_conifer_bin) == 30

    def test_report_json_roundtrip(self, rng, tmp_path):
        recs = fake_records(rng, 10)
        rep = evaluate_predictions(recs, rng.uniform(0, 300, size=(10, 2)), "lin")
        write_report(tmp_path, rep)
        back = load_report(tmp_path / "report.json")
        assert back.model == "lin" and back.targets["agb"]["rmse"] == rep.targets["agb"]["rmse"]

    def test_compare(self, rng, tmp_path):
        recs = fake_records(rng, 20)
        Y = np.array([[r.targets.agb, r.targets.volume] for r in recs])
        good = evaluate_predictions(recs, Y + rng.normal(size=Y.shape), "good")
        bad = evaluate_predictions(recs, Y + 50 * rng.normal(size=Y.shape), "bad")
        rows = compare_models([bad, good], tmp_path / "c.csv")
        assert [r[1] for r in rows] == ["good", "bad", "good", "bad"]
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",".join(COMPARE_COLUMNS)
        with pytest.raises(ValueError):
            compare_models([])

    def test_empty_split(self):
        with pytest.raises(ValueError):
            evaluate_predictions([], np.zeros((0, 2)))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    recs = synth_generate(small_cfg(), 30, 1, root)
    recs, _ = filter_dataset(recs, root)
    recs = assign_splits(recs, 0, 0.2, 0.0, max_eval_gap=10.0)
    tr = [r for r in recs if r.split == "train"]
    va = [r for r in recs if r.split == "validation"]
    return root, tr, va


def quick(epochs=3):
    return TrainConfig(epochs=epochs, batch_size=8, augment=AugmentConfig.off())


class TestTrain:
    def test_epochs_zero_is_init(self, tiny_dataset):
        root, tr, va = tiny_dataset
        cfg = tiny_config("pointnet", 4)
        res = train("pointnet", tr, va, lambda r: load_record_cloud(r, root), quick(0), cfg, seed=5)
        init = build_model("pointnet", cfg, seed=5).state_dict()
        got = res.model.state_dict()
        assert res.history == [] and res.best_epoch == -1
        for k in init:
            np.testing.assert_array_equal(got[k], init[k])

    def test_determinism_and_seeds(self, tiny_dataset, tmp_path):
        root, tr, va = tiny_dataset
        load = lambda r: load_record_cloud(r, root)
        cfg = tiny_config("pointnet", 4)
        hashes, histories = [], []
        for i, seed in enumerate((0, 0, 1)):
            res = train("pointnet", tr, va, load, TrainConfig(epochs=3, batch_size=8), cfg, seed=seed)
            save_checkpoint(tmp_path / f"{i}.cnpy", res)
            hashes.append(checkpoint_hash(tmp_path / f"{i}.cnpy"))
            histories.append(res.history)
        assert hashes[0] == hashes[1] and histories[0] == histories[1]
        assert histories[0] != histories[2]
        assert [h[0] for h in histories[0]] == [0, 1, 2]

    def test_checkpoint_roundtrip(self, tiny_dataset, tmp_path):
        root, tr, va = tiny_dataset
        load = lambda r: load_record_cloud(r, root)
        res = train("pointnet", tr, va, load, quick(2), tiny_config("pointnet", 4), seed=2)
        save_checkpoint(tmp_path / "m.cnpy", res)
        model, kind, mean, std = load_checkpoint(tmp_path / "m.cnpy")
        clouds = [normalize_cloud(load(r)) for r in va]
        np.testing.assert_array_equal(predict_clouds(model, clouds, mean, std),
                                      predict_clouds(res.model, clouds, res.target_mean, res.target_std))
        assert kind == "pointnet"
        best = max(h[4] for h in res.history)
        assert res.best_val_r2 == best

    def test_history_csv(self, tmp_path):
        write_history(tmp_path / "h.csv", [(0, 1e-3, 0.5, 0.6, 0.1)])
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == ",".join(HISTORY_COLUMNS) and lines[1].startswith("0,0.001,")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tiny_dataset):
        root, tr, va = tiny_dataset
        cfg = TrainConfig(epochs=3, batch_size=8, lr=1e300, augment=AugmentConfig.off())
        with pytest.raises(TrainingDiverged) as exc:
            train("pointnet", tr, va, lambda r: load_record_cloud(r, root), cfg, tiny_config("pointnet", 4))
        assert exc.value.epoch >= 0

    def test_empty_splits(self, tiny_dataset):
        root, tr, va = tiny_dataset
        with pytest.raises(ValueError):
            train("pointnet", [], va, None, quick(1))
        with pytest.raises(ValueError):
            train("pointnet", tr, [], None, quick(1))
