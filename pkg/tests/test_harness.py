import copy
import json
import warnings

import numpy as np
import pytest
import yaml

from gdpd import cli, harness, plots
from gdpd.config import ConfigError, load_config, parse_config, stable_hash
from gdpd.metrics import read_report_csv

TINY = {
    "name": "tiny",
    "mode": "standard",
    "output_dir": "out",
    "seeds": [0, 1],
    "methods": ["base", "gdpd"],
    "datasets": [{"name": "synth", "kind": "synthetic",
                  "synthetic": {"N": 60, "L": 16, "prefix_snr": 0.5, "suffix_snr": 3.0}}],
    "preprocess": {"length": None, "normalize": "per-series", "val_fraction": 0.25},
    "teacher": {"model": "LSTM1-4", "n_inits": 1},
    "students": ["LSTM1-4"],
    "partial": {"earliness": 0.5},
    "schedule": {"total_epochs": 2, "E_warm": 1, "batch_size": 16},
    "diffusion": {"T": 20, "hidden": 16, "time_dim": 8},
}


def cfg_with(**changes):
    raw = copy.deepcopy(TINY)
    raw.update(changes)
    return raw


def run_raw(raw, out):
    runner = harness.Runner(parse_config(raw), out)
    return runner, runner.run()


# ---------------------------------------------------------------- config validation


def test_unknown_keys_rejected_everywhere():
    raw = cfg_with(colour="red", schedule={"total_epochs": 2, "E_warm": 1, "speed": 3})
    raw["datasets"][0]["synthetic"]["snr"] = 1
    with pytest.raises(ConfigError) as err:
        parse_config(raw)
    text = "\n".join(err.value.problems)
    assert "colour: unknown key" in text
    assert "schedule.speed: unknown key" in text
    assert "datasets[0].synthetic.snr: unknown key" in text


@pytest.mark.parametrize("changes, fragment", [
    ({"seeds": []}, "seeds"),
    ({"seeds": [1, 1]}, "distinct"),
    ({"methods": ["base", "rkd"]}, "methods"),
    ({"mode": "grid"}, "mode"),
    ({"schedule": {"total_epochs": 2, "E_warm": 5}}, "E_warm"),
    ({"mode": "ablation"}, "ablation: required"),
    ({"mode": "ablation", "ablation": {"param": "depth", "values": [1]}}, "ablation.param"),
    ({"mode": "compression"}, "compression"),
    ({"mode": "self-distill", "students": ["LSTM2-4"]}, "self-distill"),
    ({"teacher": {"model": "Transformer1-2"}}, "teacher"),
    ({"datasets": [{"name": "x", "kind": "ucr"}]}, "root"),
])
def test_invalid_configs(changes, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(cfg_with(**changes))


def test_missing_required_fields_all_listed():
    with pytest.raises(ConfigError) as err:
        parse_config({"name": "x"})
    missing = {p.split(":")[0] for p in err.value.problems if p.endswith("required")}
    assert {"mode", "output_dir", "seeds", "methods", "datasets", "teacher"} <= missing


def test_hash_ignores_key_order(tmp_path):
    a = parse_config(TINY)
    shuffled = dict(reversed(list(copy.deepcopy(TINY).items())))
    shuffled["schedule"] = dict(reversed(list(shuffled["schedule"].items())))
    assert parse_config(shuffled).hash() == a.hash()
    assert parse_config(cfg_with(seeds=[0, 2])).hash() != a.hash()
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": (1, 2), "a": 1})


def test_yaml_roundtrip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(TINY))
    assert load_config(p).hash() == parse_config(TINY).hash()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("GDPD_OUTPUT_ROOT", str(tmp_path))
    assert parse_config(TINY).output_path() == tmp_path / "out"


# ---------------------------------------------------------------- runs


@pytest.fixture(scope="module")
def standard_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("std")
    runner, reports = run_raw(TINY, out)
    return out, runner, reports


def test_standard_counts(standard_run):
    out, runner, reports = standard_run
    assert runner.trained == 4 and runner.teachers_trained == 1
    assert list(reports) == ["e=0.5"]
    assert len(list((out / "cells").glob("*.json"))) == 4
    assert len(list((out / "teachers").glob("*.ckpt"))) == 1
    rows = read_report_csv(out / "report.csv")
    assert len(rows) == 4 and {r["method"] for r in rows} == {"base", "gdpd"}
    assert all(0 <= r["auc_prc"] <= 1 and 0 <= r["fidelity"] <= 1 for r in rows)
    assert (out / "aggregate.csv").exists() and (out / "summary.json").exists()


def test_rerun_is_idempotent(standard_run):
    out, _, _ = standard_run
    before = (out / "report.csv").read_bytes()
    runner, _ = run_raw(TINY, out)
    assert runner.trained == 0
    assert (out / "report.csv").read_bytes() == before


def test_resume_after_interruption(standard_run, tmp_path):
    out, _, _ = standard_run
    reference = (out / "report.csv").read_bytes()
    # simulate a run killed after the first two cells
    partial = tmp_path / "partial"
    runner = harness.Runner(parse_config(TINY), partial)
    runner.prepare()
    for cell in list(runner.cells())[:2]:
        runner.run_cell(*cell)
    assert not (partial / "report.csv").exists()
    resumed, _ = run_raw(TINY, partial)
    assert resumed.trained == 2
    assert (partial / "report.csv").read_bytes() == reference


def test_report_command_rebuilds_without_training(standard_run):
    out, _, _ = standard_run
    before = (out / "report.csv").read_bytes()
    (out / "report.csv").unlink()
    harness.report(out)
    assert (out / "report.csv").read_bytes() == before


def test_teacher_checkpoint_reused(standard_run, tmp_path):
    out, _, _ = standard_run
    sweep = cfg_with(mode="earliness-sweep", seeds=[0], methods=["base"], sweep={"earliness": [0.5, 1.0]})
    target = tmp_path / "sweep"
    (target / "teachers").mkdir(parents=True)
    for f in (out / "teachers").iterdir():
        (target / "teachers" / f.name).write_bytes(f.read_bytes())
    runner, reports = run_raw(sweep, target)
    assert list(reports) == ["e=0.5", "e=1"]
    assert len(list((target / "teachers").glob("*.ckpt"))) == 1
    assert runner.teachers_trained == 0


def test_earliness_sweep_six_subreports(tmp_path):
    raw = cfg_with(mode="earliness-sweep", seeds=[0], methods=["base"])
    runner, reports = run_raw(raw, tmp_path)
    assert list(reports) == ["e=0.2", "e=0.4", "e=0.5", "e=0.6", "e=0.8", "e=1"]
    assert len(list((tmp_path / "reports").glob("*/report.csv"))) == 6
    assert runner.trained == 6


def test_weak_teacher_levels(tmp_path):
    raw = cfg_with(mode="weak-teacher", seeds=[0], methods=["base"])
    _, reports = run_raw(raw, tmp_path)
    assert list(reports) == ["WT-1", "WT-2", "WT-3", "WT-4"]
    assert len(list((tmp_path / "teachers").glob("*.ckpt"))) == 4
    paths = harness_plots(tmp_path)
    assert any(p.name == "weak_teacher.png" for p in paths)


def harness_plots(out):
    return cli._plot(out)


def test_transferability_columns(tmp_path):
    raw = cfg_with(mode="transferability", seeds=[0])
    run_raw(raw, tmp_path)
    rows = read_report_csv(tmp_path / "report.csv")
    assert all(0 <= r["linear_probe"] <= 1 and 0 <= r["zero_shot"] <= 1 for r in rows)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["variants"]["e=0.5"]["linear_probe"]) == {"base", "gdpd"}


def test_ablation_nfe_zero_matches_base(tmp_path):
    raw = cfg_with(mode="ablation", seeds=[0], ablation={"param": "nfe", "values": [0, 2]})
    _, reports = run_raw(raw, tmp_path)
    assert list(reports) == ["nfe=0", "nfe=2"]
    zero = {r["method"]: r for r in reports["nfe=0"].rows}
    assert zero["gdpd"]["auc_prc"] == zero["base"]["auc_prc"]


def test_layer_ablation(tmp_path):
    raw = cfg_with(mode="ablation", seeds=[0], methods=["gdpd"], teacher={"model": "LSTM2-4", "n_inits": 1},
                   students=["LSTM2-4"], ablation={"param": "layer", "values": [1, 2]})
    _, reports = run_raw(raw, tmp_path)
    assert list(reports) == ["layer=1", "layer=2"]


def test_self_distill_includes_teacher(tmp_path):
    raw = cfg_with(mode="self-distill", seeds=[0])
    _, reports = run_raw(raw, tmp_path)
    rep = reports["e=1"]
    assert set(rep.methods) == {"base", "gdpd", "teacher"}
    assert rep.methods["teacher"].avg_fidelity == 1.0


def test_compression_multi_student(tmp_path):
    raw = cfg_with(mode="compression", seeds=[0], methods=["feature-kd", "gdpd"],
                   teacher={"model": "LSTM1-8", "n_inits": 1}, students=["LSTM1-4", "LSTM1-2"],
                   sweep={"compression_earliness": [0.5]})
    _, reports = run_raw(raw, tmp_path)
    assert set(reports["e=0.5"].methods) == {"LSTM1-4/feature-kd", "LSTM1-4/gdpd",
                                             "LSTM1-2/feature-kd", "LSTM1-2/gdpd"}


def test_multichannel_files_dataset(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("TRAIN", 24), ("TEST", 12)):
        lines = []
        for i in range(n):
            for c in range(2):
                vals = "\t".join(f"{v:.4f}" for v in rng.normal(size=12) + (i % 2) * (c == 1))
                lines.append(f"{i}\t{c}\t{i % 2}\t{vals}")
        (tmp_path / f"mc_{split}.tsv").write_text("\n".join(lines) + "\n")
    raw = cfg_with(mode="channel-partial", seeds=[0], methods=["base"],
                   datasets=[{"name": "mc", "kind": "files", "format": "delimited-multichannel",
                              "train": str(tmp_path / "mc_TRAIN.tsv"), "test": str(tmp_path / "mc_TEST.tsv")}])
    _, reports = run_raw(raw, tmp_path / "out")
    assert list(reports) == ["e=0.5,m=1", "e=0.5,m=0.5"]


def test_runs_reproducible(standard_run, tmp_path):
    out, _, _ = standard_run
    run_raw(TINY, tmp_path)
    assert (tmp_path / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


# ---------------------------------------------------------------- plots


def sweep_rows(n_methods=2, n_variants=4):
    rows = []
    for i in range(n_variants):
        for m in ["base", "gdpd"][:n_methods]:
            rows.append({"dataset": "d", "method": m, "seed": 0, "variant": f"e={0.2 * (i + 1):g}",
                         "earliness": 0.2 * (i + 1), "auc_prc": 0.5 + 0.1 * i, "fidelity": 0.6 + 0.05 * i})
    return rows


def test_bar_chart_counts():
    fig = plots.fidelity_figure(sweep_rows())
    assert len(fig.axes[0].patches) == 8
    plots.plt.close(fig)


def test_plots_byte_stable(tmp_path):
    a = plots.emit_plots(sweep_rows(), tmp_path / "a", "earliness-sweep")
    b = plots.emit_plots(sweep_rows(), tmp_path / "b", "earliness-sweep")
    assert [p.name for p in a] == ["fidelity.png", "auc_prc_vs_earliness.png"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_empty_report_no_plots(tmp_path):
    with pytest.warns(UserWarning):
        assert plots.emit_plots([], tmp_path) == []
    assert not list(tmp_path.glob("*.png"))


# ---------------------------------------------------------------- command line


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GDPD_OUTPUT_ROOT", str(tmp_path / "root"))
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump(cfg_with(seeds=[0])))
    assert cli.main(["run", str(good)]) == 0
    out_dir = tmp_path / "root" / "out"
    assert (out_dir / "report.csv").exists() and (out_dir / "plots" / "fidelity.png").exists()
    assert cli.main(["report", "out"]) == 0
    assert cli.main(["plot", str(out_dir)]) == 0
    assert "base" in capsys.readouterr().out

    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(cfg_with(unknown_field=1)))
    assert cli.main(["run", str(bad)]) == 2
    assert "unknown_field" in capsys.readouterr().err

    broken = tmp_path / "broken.yaml"
    broken.write_text(yaml.safe_dump(cfg_with(datasets=[{"name": "Nope", "kind": "ucr", "root": str(tmp_path)}])))
    assert cli.main(["run", str(broken)]) == 1
    assert cli.main(["report", str(tmp_path / "nowhere")]) == 1
