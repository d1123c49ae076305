import json

import numpy as np
import pytest

from soupstock.cli import main
from soupstock.config import ConfigError, enumerate_sweep, parse_merge_config, sweep_cell_name
from soupstock.optim import Adam
from soupstock.pseudograd import Constant, Harmonic
from soupstock.synthlab import default_estimator_config
from soupstock.weightstore import WeightMap, l2_distance, load_checkpoint, save_checkpoint


def write_ingredients(directory, count=4, seed=0, shapes=((2, 3), (3,))):
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        m = WeightMap(
            {
                "layer.w": rng.uniform(0.5, 1.5, size=shapes[0]).astype(np.float32),
                "bias": rng.uniform(0.5, 1.5, size=shapes[1]).astype(np.float32),
            }
        )
        path = directory / f"ing{i}.safetensors"
        save_checkpoint(m, str(path))
        paths.append(path)
    return paths


def merge_doc(count=4, **ensemble_overrides):
    ensemble = {
        "optimizer": {"kind": "gd", "lr": {"kind": "harmonic", "offset": 0}},
        "pivot_policy": {"kind": "adaptive"},
        "pivot_init": {"kind": "soup"},
        "n_divisor": 1,
        "ordering": "given",
    }
    ensemble.update(ensemble_overrides)
    return {
        "version": 1,
        "ingredients": [{"path": f"ing{i}.safetensors"} for i in range(count)],
        "ensemble": ensemble,
        "output": {"checkpoint": "merged.safetensors", "log": "run.csv"},
    }


# --- soup -------------------------------------------------------------------------


def test_soup_two_toy_checkpoints(tmp_path, capsys):
    a = WeightMap({"t": np.array([1.0, 3.0], dtype=np.float32)})
    b = WeightMap({"t": np.array([3.0, 5.0], dtype=np.float32)})
    save_checkpoint(a, str(tmp_path / "a.safetensors"))
    save_checkpoint(b, str(tmp_path / "b.safetensors"))
    out = tmp_path / "soup.safetensors"
    code = main(["soup", str(tmp_path / "a.safetensors"), str(tmp_path / "b.safetensors"), "-o", str(out)])
    assert code == 0
    np.testing.assert_array_equal(load_checkpoint(str(out)).array("t"), [2.0, 4.0])
    assert "souped 2 ingredients" in capsys.readouterr().out


def test_soup_single_checkpoint_byte_identical(tmp_path):
    paths = write_ingredients(tmp_path, count=1)
    out = tmp_path / "copy.safetensors"
    assert main(["soup", str(paths[0]), "-o", str(out), "--quiet"]) == 0
    assert out.read_bytes() == paths[0].read_bytes()


def test_soup_incompatible_inputs_exit_2(tmp_path, capsys):
    save_checkpoint(WeightMap({"a": np.zeros(2, dtype=np.float32)}), str(tmp_path / "x.safetensors"))
    save_checkpoint(WeightMap({"a": np.zeros(3, dtype=np.float32)}), str(tmp_path / "y.safetensors"))
    code = main(["soup", str(tmp_path / "x.safetensors"), str(tmp_path / "y.safetensors"),
                 "-o", str(tmp_path / "s.safetensors")])
    assert code == 2
    assert "'a'" in capsys.readouterr().err


# --- merge ------------------------------------------------------------------------


def test_merge_soup_equivalence_config_matches_cmd_soup(tmp_path):
    paths = write_ingredients(tmp_path)
    (tmp_path / "merge.json").write_text(json.dumps(merge_doc()))
    assert main(["merge", "--config", str(tmp_path / "merge.json"), "--quiet"]) == 0
    assert main(["soup", *map(str, paths), "-o", str(tmp_path / "soup.safetensors"), "--quiet"]) == 0
    merged = load_checkpoint(str(tmp_path / "merged.safetensors"))
    souped = load_checkpoint(str(tmp_path / "soup.safetensors"))
    for name in merged:
        np.testing.assert_allclose(merged.array(name), souped.array(name), rtol=1e-6)
    assert (tmp_path / "run.csv").read_text().startswith("step,epoch,batch_ids,eta,zeta")


def test_merge_missing_ingredient_exit_2(tmp_path, capsys):
    write_ingredients(tmp_path, count=2)
    doc = merge_doc(count=2)
    doc["ingredients"].append({"path": "missing.safetensors"})
    (tmp_path / "merge.json").write_text(json.dumps(doc))
    code = main(["merge", "--config", str(tmp_path / "merge.json")])
    assert code == 2
    assert "missing.safetensors" in capsys.readouterr().err


def test_merge_schema_violations_reported_all_at_once(tmp_path, capsys):
    doc = {
        "version": 99,
        "ingredients": [],
        "ensemble": {"optimizer": {"kind": "sgd", "lr": 1.0}, "mystery": True},
        "output": {"checkpoint": "m.safetensors", "log": "run.csv"},
    }
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code = main(["merge", "--config", str(tmp_path / "bad.json")])
    err = capsys.readouterr().err
    assert code == 1
    assert "$.version" in err
    assert "$.ingredients" in err
    assert "$.ensemble.optimizer.kind" in err
    assert "$.ensemble.mystery" in err and "unknown key" in err


def test_merge_metrics_csv_and_ordering(tmp_path):
    write_ingredients(tmp_path, count=3)
    (tmp_path / "metrics.csv").write_text("id,metric\ning0,0.1\ning1,0.9\ning2,0.5\n")
    doc = merge_doc(count=3, ordering="metric_desc")
    doc["metrics_csv"] = "metrics.csv"
    (tmp_path / "merge.json").write_text(json.dumps(doc))
    assert main(["merge", "--config", str(tmp_path / "merge.json"), "--quiet"]) == 0
    rows = (tmp_path / "run.csv").read_text().strip().splitlines()
    assert rows[1].split(",")[2] == "ing1"  # best metric first
    assert rows[2].split(",")[2] == "ing2"


def test_merge_sweep_grid_runs_all_cells(tmp_path):
    write_ingredients(tmp_path)
    doc = merge_doc()
    doc["ensemble"]["optimizer"] = {"kind": "gd", "lr": 0.5}
    doc["sweep"] = {
        "ensemble.optimizer.weight_decay": [0.0, 0.1],
        "ensemble.optimizer.lr": list(np.linspace(1e-7, 2, 30)),
    }
    (tmp_path / "sweep.json").write_text(json.dumps(doc))
    out_dir = tmp_path / "grid"
    assert main(["merge", "--config", str(tmp_path / "sweep.json"), "--out", str(out_dir), "--quiet"]) == 0
    manifest = json.loads((out_dir / "sweep_manifest.json").read_text())
    assert len(manifest) == 60
    assert all(entry["status"] == "ok" for entry in manifest)
    cells = {entry["cell"] for entry in manifest}
    assert len(cells) == 60
    sample = manifest[0]
    assert (out_dir / sample["checkpoint"]).exists()
    assert (out_dir / sample["log"]).exists()


def test_merge_sweep_cell_failure_does_not_abort_others(tmp_path):
    write_ingredients(tmp_path, count=3)
    doc = merge_doc(count=3)
    # batch_size 5 exceeds the 3-ingredient sweep at runtime (schema-valid).
    doc["sweep"] = {"ensemble.batch_size": [1, 5]}
    (tmp_path / "sweep.json").write_text(json.dumps(doc))
    code = main(["merge", "--config", str(tmp_path / "sweep.json"), "--out", str(tmp_path / "g"), "--quiet"])
    assert code == 2
    manifest = json.loads((tmp_path / "g" / "sweep_manifest.json").read_text())
    statuses = sorted(entry["status"] for entry in manifest)
    assert statuses == ["error", "ok"]


def test_sweep_cell_names_deterministic_and_order_independent():
    assert sweep_cell_name({"a": 1, "b": 2}) == sweep_cell_name({"b": 2, "a": 1})
    assert sweep_cell_name({"a": 1}) != sweep_cell_name({"a": 2})


def test_unknown_sweep_path_rejected(tmp_path):
    doc = merge_doc()
    doc["sweep"] = {"output.checkpoint": ["a", "b"]}
    with pytest.raises(ConfigError, match="sweep paths"):
        enumerate_sweep(doc)


# --- greedy -----------------------------------------------------------------------


def test_greedy_cli_forces_greedy_and_needs_evaluator(tmp_path, capsys):
    paths = write_ingredients(tmp_path, count=3)
    doc = merge_doc(count=3)
    (tmp_path / "plain.json").write_text(json.dumps(doc))
    assert main(["greedy", "--config", str(tmp_path / "plain.json")]) == 1
    assert "evaluator" in capsys.readouterr().err

    doc["ensemble"]["greedy"] = {
        "enabled": False,
        "evaluator": {"kind": "neg_distance", "target": "ing0.safetensors"},
    }
    (tmp_path / "greedy.json").write_text(json.dumps(doc))
    assert main(["greedy", "--config", str(tmp_path / "greedy.json"), "--quiet"]) == 0
    rows = (tmp_path / "run.csv").read_text().strip().splitlines()
    assert all(row.split(",")[-1] in ("true", "false") for row in rows[1:])


# --- synth ------------------------------------------------------------------------


def test_synth_cycle_csv_matches_orbit(tmp_path):
    out = tmp_path / "cycle.csv"
    assert main(["synth", "cycle", "--k", "1", "--omega", "1", "--cycles", "3",
                 "-o", str(out), "--quiet"]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "step,x,y,l1_norm"
    assert len(lines) == 1 + 12  # one row per step taken over 3 cycles
    assert lines[1] == "1,0.0,1.0,1.0"
    assert lines[2] == "2,-1.0,0.0,1.0"
    assert lines[3] == "3,0.0,-1.0,1.0"
    assert lines[4] == "4,1.0,0.0,1.0"
    assert lines[5] == "5,0.0,1.0,1.0"


def test_synth_estimator_defaults_match_reference_config():
    cfg = default_estimator_config("cauchy", seed=7)
    variant: Adam = cfg.optimizer.variant
    assert variant.lr == Constant(0.1)
    assert variant.beta1 == variant.beta2 == 0.2
    assert variant.eps == 1e-8
    assert (cfg.population_size, cfg.subsample_size, cfg.trials) == (60000, 300, 300)
    assert (cfg.batch_size, cfg.ensemble_epochs) == (20, 200)
    assert cfg.init_point == (10.0, 10.0)
    gaussian = default_estimator_config("gaussian")
    assert gaussian.optimizer.variant.lr == Constant(0.01)


def test_synth_estimators_small_run(tmp_path):
    out = tmp_path / "est.csv"
    code = main(["synth", "estimators", "--dist", "cauchy", "--seed", "7",
                 "--population", "1000", "--subsample", "50", "--trials", "4",
                 "--batch-size", "10", "--epochs", "10", "-o", str(out), "--quiet"])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "trial,soup_x,soup_y,ame_x,ame_y,dist_soup,dist_ame"
    assert len(lines) == 5


def test_synth_wlln_cauchy_rejected(capsys):
    assert main(["synth", "wlln", "--dist", "cauchy"]) == 1
    assert "first moment undefined" in capsys.readouterr().err


def test_synth_wlln_small_run(tmp_path):
    out = tmp_path / "w.csv"
    assert main(["synth", "wlln", "--sizes", "10,100", "--trials", "20",
                 "--seed", "3", "-o", str(out), "--quiet"]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "n,fraction"
    assert len(lines) == 3


def test_synth_convergence_run(tmp_path, capsys):
    assert main(["synth", "convergence", "--steps", "20000"]) == 0
    assert "converged" in capsys.readouterr().out


# --- fed -------------------------------------------------------------------------


def fed_doc(algorithm, **kw):
    doc = {
        "version": 1,
        "algorithm": algorithm,
        "rounds": 3,
        "sample_size": 2,
        "seed": 5,
        "init": {"values": [0.0, 0.0]},
        "clients": [
            {"id": "c0", "center": {"values": [0.0, 0.0]},
             "optimizer": {"kind": "gd", "lr": 1.0}},
            {"id": "c1", "center": {"values": [2.0, 0.0]},
             "optimizer": {"kind": "gd", "lr": 1.0}},
        ],
        "output": {"log": f"{algorithm}.csv", "checkpoint": f"{algorithm}.safetensors"},
    }
    doc.update(kw)
    return doc


def test_fed_reduction_logs_identical(tmp_path):
    opt = fed_doc("fedopt", server={"kind": "gd", "lr": 1.0})
    soup_ = fed_doc("fedsoup", server_stew={"kind": "gd", "lr": 1.0}, client_soup="linear")
    (tmp_path / "opt.json").write_text(json.dumps(opt))
    (tmp_path / "soup.json").write_text(json.dumps(soup_))
    assert main(["fed", "--config", str(tmp_path / "opt.json"), "--quiet"]) == 0
    assert main(["fed", "--config", str(tmp_path / "soup.json"), "--quiet"]) == 0
    log_opt = (tmp_path / "fedopt.csv").read_text()
    log_soup = (tmp_path / "fedsoup.csv").read_text()
    assert log_opt == log_soup
    final_opt = load_checkpoint(str(tmp_path / "fedopt.safetensors"))
    final_soup = load_checkpoint(str(tmp_path / "fedsoup.safetensors"))
    assert l2_distance(final_opt, final_soup) < 1e-7


def test_fed_two_client_hand_example(tmp_path):
    doc = fed_doc("fedopt", rounds=1, server={"kind": "gd", "lr": 1.0})
    (tmp_path / "fed.json").write_text(json.dumps(doc))
    assert main(["fed", "--config", str(tmp_path / "fed.json"), "--quiet"]) == 0
    final = load_checkpoint(str(tmp_path / "fedopt.safetensors"))
    np.testing.assert_array_equal(final.array("w"), [1.0, 0.0])
    rows = (tmp_path / "fedopt.csv").read_text().strip().splitlines()
    assert rows[1].startswith("1,c0|c1,1.0,")


def test_fed_zero_rounds_rejected(tmp_path, capsys):
    doc = fed_doc("fedopt", rounds=0, server={"kind": "gd", "lr": 1.0})
    (tmp_path / "fed.json").write_text(json.dumps(doc))
    assert main(["fed", "--config", str(tmp_path / "fed.json")]) == 1
    assert "$.rounds" in capsys.readouterr().err


# --- verify ------------------------------------------------------------------------


def test_verify_single_suite(capsys):
    assert main(["verify", "soup-eq"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "soup-eq" in out


# --- determinism ---------------------------------------------------------------------


def run_twice_and_compare(tmp_path, build_argv, outputs):
    contents = []
    for run in ("one", "two"):
        run_dir = tmp_path / run
        run_dir.mkdir()
        assert main(build_argv(run_dir)) == 0
        contents.append([(run_dir / o).read_bytes() for o in outputs])
    assert contents[0] == contents[1]


def test_merge_command_byte_deterministic(tmp_path):
    write_ingredients(tmp_path)
    doc = merge_doc(shuffle=True, seed=77, epochs=3)

    def argv(run_dir):
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps(doc))
        return ["merge", "--config", str(cfg), "--out", str(run_dir), "--quiet"]

    run_twice_and_compare(tmp_path, argv, ["merged.safetensors", "run.csv"])


def test_synth_commands_byte_deterministic(tmp_path):
    def argv_est(run_dir):
        return ["synth", "estimators", "--dist", "gaussian", "--seed", "9",
                "--population", "500", "--subsample", "40", "--trials", "3",
                "--batch-size", "8", "--epochs", "5",
                "-o", str(run_dir / "est.csv"), "--quiet"]

    run_twice_and_compare(tmp_path, argv_est, ["est.csv"])

    def argv_wlln(run_dir):
        return ["synth", "wlln", "--sizes", "10,100", "--trials", "10", "--seed", "4",
                "-o", str(run_dir / "w.csv"), "--quiet"]

    wlln_dir = tmp_path / "w"
    wlln_dir.mkdir()
    run_twice_and_compare(wlln_dir, argv_wlln, ["w.csv"])


def test_fed_command_byte_deterministic(tmp_path):
    doc = fed_doc("fedsoup", sample_size=1, server_stew={"kind": "adam", "lr": 0.5, "beta1": 0.5, "beta2": 0.9})

    def argv(run_dir):
        cfg = tmp_path / "fed.json"
        cfg.write_text(json.dumps(doc))
        return ["fed", "--config", str(cfg), "--out", str(run_dir), "--quiet"]

    run_twice_and_compare(tmp_path, argv, ["fedsoup.csv", "fedsoup.safetensors"])


# --- config parsing details -------------------------------------------------------------


def test_parse_merge_defaults():
    cfg = parse_merge_config(merge_doc())
    assert cfg.epochs == 1 and cfg.batch_size == 1
    assert cfg.ordering == "given"
    assert cfg.n_divisor == 1
    assert cfg.greedy.enabled is False
    assert cfg.amplification == Constant(1.0)
    assert isinstance(cfg.optimizer.variant.lr, Harmonic)


def test_parse_number_shorthand_schedule():
    doc = merge_doc()
    doc["ensemble"]["optimizer"] = {"kind": "gd", "lr": 0.25}
    cfg = parse_merge_config(doc)
    assert cfg.optimizer.variant.lr == Constant(0.25)


def test_parse_rejects_duplicate_ingredient_ids():
    doc = merge_doc(count=2)
    doc["ingredients"] = [{"path": "a/x.safetensors"}, {"path": "b/x.safetensors"}]
    with pytest.raises(ConfigError, match="duplicate ingredient id"):
        parse_merge_config(doc)


def test_parse_projection_and_ema():
    doc = merge_doc()
    doc["ensemble"]["pivot_policy"] = {"kind": "ema", "decay": 0.9}
    doc["ensemble"]["projection"] = {"center": "soup", "radius": 2.0}
    cfg = parse_merge_config(doc)
    assert cfg.projection.radius == 2.0
    doc["ensemble"]["pivot_policy"] = {"kind": "fixed", "decay": 0.9}
    with pytest.raises(ConfigError, match="ema"):
        parse_merge_config(doc)
