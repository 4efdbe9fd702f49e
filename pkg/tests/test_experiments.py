import json
import re
from pathlib import Path

import numpy as np
import pytest

from splitbench.cli import main
from splitbench.data import Dataset, DatasetSpec, make_dataset, partition_dataset
from splitbench.experiments import (ConfigError, ExperimentConfig, load_manifest, read_csv, rerun_from_manifest,
                                    run_suite)
from splitbench.netsim import TIMING_COLUMNS
from splitbench.plotting import FIGURES, confidence_band, plot

SMALL = {
    "name": "tiny",
    "model": "digits_mlp",
    "train": {"archs": ["FL", "FSL", "PSL", "FRC"], "num_clients": 2, "cut_indices": [1, 3], "epochs": 2,
              "batch_size": 16, "learning_rate": 0.3},
    "privacy": [{"mode": "none"}, {"mode": "cpa_dp", "noise_multiplier": 0.5}],
    "attack": {"enabled": True, "autoencoder_epochs": 1, "classifier_epochs": 1, "attacker_samples": 32},
    "dataset": {"samples_per_client": 32, "test_per_client": 16, "partition": "two_part_noniid",
                "evaluation": "union"},
    "seeds": [0, 1],
}


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    manifest = run_suite(SMALL, out)
    return out, manifest


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config --------------------------------------------------------------------------
def test_schema_rejects_unknown_key():
    with pytest.raises(ConfigError, match="<root>"):
        ExperimentConfig.from_dict({"bogus": 1})


def test_schema_reports_path():
    with pytest.raises(ConfigError, match="train/num_clients"):
        ExperimentConfig.from_dict({"train": {"num_clients": 0}})
    with pytest.raises(ConfigError, match="train/archs"):
        ExperimentConfig.from_dict({"train": {"archs": ["XL"]}})


def test_semantic_errors_surface_at_load():
    with pytest.raises((ConfigError, ValueError)):
        ExperimentConfig.from_dict({"dataset": {"mix_fraction": 1.5}})


def test_defaults_fill_in_and_hash_is_stable():
    a = ExperimentConfig.from_dict({"name": "x"})
    b = ExperimentConfig.from_dict({"name": "x", "seeds": [0]})
    assert a.hash == b.hash
    assert ExperimentConfig.from_dict({"name": "y"}).hash != a.hash
    assert a.raw["train"]["archs"] == ["FSL"]


def test_single_privacy_object_is_accepted():
    cfg = ExperimentConfig.from_dict({"privacy": {"mode": "nopeek", "loss_multiplier": 0.5}})
    assert [p.mode for p in cfg.privacy_configs()] == ["nopeek"]


def test_bundled_config_validates():
    root = Path(__file__).resolve().parents[1]
    for path in sorted((root / "configs").glob("*.json")):
        ExperimentConfig.load(path)


# -- partitioning ----------------------------------------------------------------------
def _toy(n=400, k=10, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % k)
    return Dataset(np.zeros((n, 1)), y)


def test_pure_two_part_split():
    spec = DatasetSpec(partition="two_part_noniid", mix_fraction=0.0)
    tr, te = _toy(), _toy(seed=1)
    shards = partition_dataset(tr, te, 2, spec, 0)
    assert set(shards[0].train.y) == {0, 1, 2, 3, 4}
    assert set(shards[1].train.y) == {5, 6, 7, 8, 9}
    assert set(shards[0].test.y) == {0, 1, 2, 3, 4}


def test_mix_fraction_adds_ten_percent_of_full_set():
    spec = DatasetSpec(partition="two_part_noniid", mix_fraction=0.1)
    tr = _toy()
    shards = partition_dataset(tr, _toy(seed=1), 2, spec, 0)
    for p, s in enumerate(shards):
        base = int(np.sum((tr.y >= 5 * p) & (tr.y < 5 * (p + 1))))
        assert len(s.train) == base + 40
        foreign = (s.train.y < 5) if p else (s.train.y >= 5)
        assert foreign.any()


def test_iid_histograms_near_uniform():
    spec = DatasetSpec(samples_per_client=200, test_per_client=10)
    tr, te = make_dataset(spec, 20, 0)
    shards = partition_dataset(tr, te, 20, spec, 0)
    df = 9
    bound = df + 3 * np.sqrt(2 * df)  # chi-square mean + 3 sigma
    for s in shards:
        counts = np.bincount(s.train.y, minlength=10)
        expected = len(s.train) / 10
        assert ((counts - expected) ** 2 / expected).sum() <= bound


def test_odd_class_count_rejected():
    spec = DatasetSpec(partition="two_part_noniid", num_classes=5)
    with pytest.raises(ValueError, match="even"):
        partition_dataset(_toy(k=5), _toy(k=5), 2, spec, 0)


def test_bad_mix_fraction_rejected():
    with pytest.raises(ValueError):
        DatasetSpec(mix_fraction=-0.1)


# -- suites -----------------------------------------------------------------------------
def test_suite_cells_all_ok(suite):
    out, manifest = suite
    assert manifest["failed"] == 0
    assert len(manifest["cells"]) == 4 * 2 * 2 * 2
    assert manifest["seeds"] == [0, 1] and len(manifest["config_hash"]) == 64
    for e in manifest["cells"]:
        files = set(e["files"])
        assert {"metrics.csv", "trace.jsonl"} <= files
        assert ("attack.json" in files) == (e["arch"] in ("FSL", "PSL"))
        assert e["privacy_applied"] == (e["arch"] in ("FSL", "PSL"))


def test_timing_has_one_row_per_arch_cut_epoch(suite):
    out, _ = suite
    rows = read_csv(out / "timing.csv")
    assert tuple(rows[0].keys()) == TIMING_COLUMNS
    assert len(rows) == 4 * 2 * 2
    assert len({(r["arch"], r["cut_index"], r["epoch"]) for r in rows}) == len(rows)


def test_frc_ratio_column_near_two(suite):
    out, _ = suite
    for r in read_csv(out / "timing_summary.csv"):
        if r["arch"] == "FRC":
            assert float(r["ratio_to_fl"]) == pytest.approx(2.0, rel=0.10)


def test_merged_metrics_are_attributable(suite):
    out, manifest = suite
    rows = read_csv(out / "metrics.csv")
    cells = {e["cell"] for e in manifest["cells"]}
    assert {r["cell"] for r in rows} == cells
    assert len(rows) == len(cells) * 2 * 2  # epochs x pairs


def test_rerun_from_manifest_is_byte_identical(suite, tmp_path):
    out, _ = suite
    plot(out, "all")
    again = tmp_path / "again"
    rerun_from_manifest(out / "manifest.json", again, workers=2)
    plot(again, "all")
    assert _tree(again) == _tree(out)


def test_failed_cells_are_recorded(tmp_path):
    cfg = dict(SMALL, attack={"enabled": False}, privacy={"mode": "none"}, seeds=[0],
               train=dict(SMALL["train"], archs=["FSL"], cut_indices=[1], learning_rate=1e300))
    with np.errstate(all="ignore"):
        manifest = run_suite(cfg, tmp_path)
    assert manifest["failed"] == len(manifest["cells"]) == 1
    assert all("TrainingDiverged" in e["error"] for e in manifest["cells"])
    assert (tmp_path / "manifest.json").exists()


# -- plots ---------------------------------------------------------------------------------
def test_confidence_band_fixture():
    vals = [0.70, 0.72, 0.69, 0.75, 0.74]
    mean = sum(vals) / 5
    sd = (sum((v - mean) ** 2 for v in vals) / 4) ** 0.5
    m, lo, hi = confidence_band(vals)
    assert m == pytest.approx(mean)
    assert hi - m == pytest.approx(1.96 * sd / 5 ** 0.5)
    assert m - lo == pytest.approx(hi - m)


def test_single_seed_band_has_zero_width():
    assert confidence_band([0.5]) == (0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        confidence_band([])


def test_every_figure_renders(suite, tmp_path):
    out, _ = suite
    paths = plot(out, "all", tmp_path)
    assert sorted(p.stem for p in paths) == sorted(FIGURES)
    for p in paths:
        assert p.read_text().lstrip().startswith("<?xml")


def test_time_figure_has_one_series_per_arch(suite, tmp_path):
    out, _ = suite
    (path,) = plot(out, "time_vs_cut", tmp_path)
    svg = path.read_text()
    legend = re.findall(r">(FL|FSL|PSL|FRC)</text>", svg)
    assert sorted(legend) == ["FL", "FRC", "FSL", "PSL"]


def test_empty_selection_errors(tmp_path):
    (tmp_path / "timing.csv").write_text(",".join(TIMING_COLUMNS) + "\n")
    with pytest.raises(ValueError, match="no data"):
        plot(tmp_path, "time_vs_cut")
    with pytest.raises(ValueError, match="unknown figure"):
        plot(tmp_path, "pie")


# -- CLI -------------------------------------------------------------------------------------
def test_cli_validate(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(SMALL))
    assert main(["validate-config", str(good)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochs": 0}}))
    assert main(["validate-config", str(bad)]) == 2


def test_cli_run_with_overrides_and_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(SMALL, attack={"enabled": False})))
    monkeypatch.setenv("SPLITBENCH_OUTPUT", str(tmp_path / "res"))
    code = main(["run", "--config", str(cfg), "--archs", "fsl", "--cuts", "2", "--seeds", "3", "--epochs", "1"])
    assert code == 0
    manifest = load_manifest(tmp_path / "res" / "tiny")
    assert [e["cell"] for e in manifest["cells"]] == ["FSL-d2-p0-s3", "FSL-d2-p1-s3"]


def test_cli_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(SMALL, attack={"enabled": False}, privacy={"mode": "none"}, seeds=[0])))
    with np.errstate(all="ignore"):
        code = main(["run", "--config", str(cfg), "--archs", "FL", "--cuts", "1", "--learning-rate", "1e300",
                     "--out", str(tmp_path / "o")])
    assert code == 1


def test_cli_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_cli_plan(tmp_path, capsys):
    out = tmp_path / "plan.json"
    assert main(["plan", "--profile", "vgg16", "--min-cut", "1", "--out", str(out)]) == 0
    chosen = json.loads(capsys.readouterr().out)["selected_cut"]
    assert 7 <= chosen <= 16
    assert json.loads(out.read_text())["selected_cut"] == chosen


def test_cli_attack_and_plot(tmp_path):
    cfg = tmp_path / "c.json"
    blob = dict(SMALL, attack={"enabled": False, "autoencoder_epochs": 1, "classifier_epochs": 1,
                               "attacker_samples": 16}, seeds=[0])
    cfg.write_text(json.dumps(blob))
    out = tmp_path / "o"
    assert main(["attack", "--config", str(cfg), "--archs", "FSL", "--cuts", "3", "--out", str(out)]) == 0
    assert (out / "attack.csv").exists()
    assert main(["plot", str(out), "--figure", "resilience_vs_cut"]) == 0
    assert (out / "figures" / "resilience_vs_cut.svg").exists()
