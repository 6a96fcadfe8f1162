import json
import time

import pytest
import yaml

from fedskew.cli import main


def write_config(tmp_path, **overrides):
    doc = yaml.safe_load(open_preset("smoke"))
    for key, value in overrides.items():
        doc[key] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def open_preset(name):
    from importlib import resources
    return resources.files("fedskew.presets").joinpath(f"{name}.yaml").read_text()


def test_smoke_train_outputs_and_speed(tmp_path):
    started = time.perf_counter()
    assert main(["train", "--config", "preset:smoke", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - started < 10
    for name in ("spec.yaml", "manifest.json", "rounds.jsonl", "timings.jsonl", "summary.json"):
        assert (tmp_path / name).exists()
    lines = [json.loads(line) for line in (tmp_path / "rounds.jsonl").read_text().splitlines()]
    assert [line["round"] for line in lines] == [1, 2, 3]
    assert {"f1", "loss", "selected", "config_hash", "version"} <= set(lines[0])
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] == 1 and len(summary["curve"]) == 3


def test_train_logs_identical_across_workers(tmp_path):
    for workers in ("1", "2"):
        assert main(["train", "--config", "preset:smoke", "--out", str(tmp_path / workers),
                     "--workers", workers]) == 0
    # spec.yaml records the output directory, so it legitimately differs
    for name in ("rounds.jsonl", "summary.json", "manifest.json"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


def test_refuses_to_overwrite(tmp_path, capsys):
    args = ["train", "--config", "preset:smoke", "--out", str(tmp_path)]
    assert main(args) == 0
    before = (tmp_path / "summary.json").read_bytes()
    assert main(args) == 2
    assert "overwrite" in capsys.readouterr().err
    assert (tmp_path / "summary.json").read_bytes() == before
    assert main(args + ["--overwrite"]) == 0


def test_seed_flag_changes_run(tmp_path):
    main(["train", "--config", "preset:smoke", "--out", str(tmp_path / "a")])
    main(["train", "--config", "preset:smoke", "--out", str(tmp_path / "b"), "--seed", "1"])
    assert (tmp_path / "a" / "rounds.jsonl").read_bytes() != (tmp_path / "b" / "rounds.jsonl").read_bytes()


def test_partition_summary(tmp_path, capsys):
    assert main(["partition", "--config", "preset:smoke", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "partition.txt").read_text()
    assert "IID level: High" in text and "EMD:" in text
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["shards"]) == 10
    assert "IID level" in capsys.readouterr().out


def test_partition_without_thresholds(tmp_path):
    cfg = write_config(tmp_path, dataset={"name": "synth", "n_classes": 4, "n": 400, "d": 4})
    doc = yaml.safe_load(open(cfg))
    doc["experiment"]["k"] = 2
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(doc))
    assert main(["partition", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert "n/a" in (tmp_path / "o" / "partition.txt").read_text()


def test_sweep_row_counts(tmp_path):
    assert main(["sweep", "--config", "preset:smoke", "--out", str(tmp_path)]) == 0
    trials = (tmp_path / "emd_trials.csv").read_text().splitlines()
    means = (tmp_path / "emd_means.csv").read_text().splitlines()
    assert trials[0].startswith("# config_hash=")
    assert len(trials) == 2 + 3 * 2 * 2
    assert len(means) == 2 + 3 * 2


def test_analyze_neutral_and_spike(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", "preset:smoke", "--out", str(run)]) == 0
    # hand-made run with a spike
    doc = json.loads((run / "summary.json").read_text())
    doc["curve"] = [0.4] * 20
    doc["curve"][7] = 0.99
    doc["config"]["aggregator"] = "FedProx"
    spiky = tmp_path / "spiky.json"
    spiky.write_text(json.dumps(doc))

    assert main(["analyze", str(spiky), "--out", str(tmp_path / "neutral"),
                 "--smooth-window", "1", "--sigma", "1e9"]) == 0
    row = (tmp_path / "neutral" / "comparison.csv").read_text().splitlines()[2].split(",")
    assert row[5] == "0.99" and row[6] == "8"

    assert main(["analyze", str(spiky), str(run), "--out", str(tmp_path / "cmp")]) == 0
    lines = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    spiky_row = next(line for line in lines if ",FedProx," in line).split(",")
    assert float(spiky_row[5]) == pytest.approx(0.4)
    assert len(lines) == 4


def test_analyze_rejects_mixed_schema(tmp_path):
    assert main(["train", "--config", "preset:smoke", "--out", str(tmp_path / "r")]) == 0
    doc = json.loads((tmp_path / "r" / "summary.json").read_text())
    doc["schema_version"] = 99
    (tmp_path / "old.json").write_text(json.dumps(doc))
    assert main(["analyze", str(tmp_path / "r"), str(tmp_path / "old.json"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_analyze_rejects_non_summary(tmp_path):
    (tmp_path / "x.json").write_text("{}")
    assert main(["analyze", str(tmp_path / "x.json"), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("doc", [
    {"dataset": {"name": "synth"}, "experiment": {"learning_rate": 1}},
    {"dataset": {"name": "synth"}, "colour": "red"},
    {"dataset": {"name": "synth"}, "experiment": {"local": {"momentum": 0.9}}},
    {"experiment": {}},
    {"dataset": {"name": "imagenet"}},
    {"dataset": {"name": "synth"}, "experiment": {"active_count": 99}},
    {"dataset": {"name": "mnist", "mnist_dir": "/nonexistent"}},
])
def test_config_errors_exit_2(tmp_path, doc):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_and_bad_preset(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", "preset:nope", "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", "preset:smoke"]) == 2


def test_runtime_failure_exit_1(tmp_path, monkeypatch):
    import fedskew.cli as cli

    def boom(*_):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli.Federation, "run_round", boom)
    assert main(["train", "--config", "preset:smoke", "--out", str(tmp_path)]) == 1


def test_usage_errors():
    assert main([]) == 2
    assert main(["--version"]) == 0
