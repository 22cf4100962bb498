import json

import numpy as np
import pytest
import yaml

from langshape import cli, config, dataset, learnnet, metrics, pipeline

TINY = {
    "master_seed": 11,
    "test_tasks": ["r10_ladder_descent", "r13_skull_jump_right"],
    "lambdas": [0.1, 1.0],
    "data": {"trajectories_per_layout": 1, "trajectory_length": 80, "n_train_pairs": 300, "n_val_pairs": 60,
             "embedding_dim": 6},
    "learn": {"d1": 6, "d2": 6, "d3": 6, "d_word": 6, "epochs": 3, "batch_size": 32},
    "rl": {"total_timesteps": 256, "eval_timesteps": 50, "n_seeds": 2, "n_descriptions": 2,
           "selection_timesteps": 128,
           "ppo": {"n_envs": 2, "n_steps": 64, "minibatch": 64, "hidden": 8}},
    "sensitivity": {"task": "r10_ladder_descent", "sigmas": [0.1], "n_seeds": 2},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    path = root / "tiny.yaml"
    path.write_text(yaml.safe_dump({**TINY, "output_dir": str(root / "out")}))
    base = ["--config", str(path)]
    for cmd in ("gen-data", "train-learn", "select-hyperparams", "run-experiment", "analyze", "sensitivity"):
        assert cli.main([cmd, *base]) == 0, cmd
    return config.load_config(path), base, root


def test_summary_lists_three_descriptions_per_clip(tiny):
    cfg, _, _ = tiny
    summary = json.loads((cfg.out / "data" / "summary.json").read_text())
    assert summary["descriptions_per_clip"] == [3]
    assert summary["train_pairs"] == 300 and summary["val_pairs"] == 60
    assert "r10_ladder_descent" in summary["val_layouts"]


def test_gen_data_is_byte_identical_on_rerun(tiny, tmp_path):
    cfg, _, _ = tiny
    again = config.with_overrides(cfg, output_dir=str(tmp_path / "again"))
    pipeline.gen_data(again)
    for name in ("corpus_train.jsonl", "corpus_val.jsonl", "pairs_train.jsonl", "pairs_val.jsonl", "embeddings_50d.txt"):
        assert (cfg.out / "data" / name).read_bytes() == (again.out / "data" / name).read_bytes(), name


def test_one_checkpoint_per_encoder_mode(tiny):
    cfg, _, _ = tiny
    for mode in learnnet.ENCODER_MODES:
        ckpt = pipeline.checkpoint_path(cfg, mode)
        log = pipeline.read_csv(ckpt.with_suffix(".epochs.csv"))
        assert len(log) == cfg.learn.epochs
        best = max(float(r["val_accuracy"]) for r in log)
        model = learnnet.load_checkpoint(ckpt)
        val = dataset.load_pairs(cfg.out / "data" / "pairs_val.jsonl")
        assert learnnet.evaluate(model, val) == best
        assert all(r["config_hash"] == cfg.config_hash() for r in log)


def test_selection_matches_a_hand_run_of_rank_aggregation(tiny):
    cfg, _, _ = tiny
    rows = pipeline.read_csv(cfg.out / "select" / "auc_table.csv")
    table = {r["setting"]: {t: float(r[t]) for t in cfg.test_tasks} for r in rows}
    assert len(table) == len(cfg.encoder_modes) * len(cfg.lambdas)
    chosen = pipeline.load_selection(cfg)
    assert list(chosen) == cfg.test_tasks
    for task in cfg.test_tasks:
        assert chosen[task] == metrics.rank_aggregate(table, [t for t in cfg.test_tasks if t != task])


def test_run_records_count_and_provenance(tiny):
    cfg, _, _ = tiny
    records = pipeline.load_records(cfg.out / "main" / "records.jsonl")
    assert len(records) == len(cfg.test_tasks) * cfg.rl.n_descriptions * cfg.rl.n_seeds * 2
    lang = [r for r in records if r["reward_mode"] == "Ext+Lang"]
    assert lang and all(r["encoder_mode"] in learnnet.ENCODER_MODES and r["lam"] in cfg.lambdas for r in lang)
    assert all(r["final_successes"] is not None for r in records)
    rows = pipeline.read_csv(cfg.out / "main" / "runs.csv")
    assert len(rows) == len(records)


def test_rerun_does_not_duplicate_records(tiny):
    cfg, base, _ = tiny
    path = cfg.out / "main" / "records.jsonl"
    before = path.read_text()
    assert cli.main(["run-experiment", *base]) == 0
    assert path.read_text() == before


def test_interrupted_ledger_resumes(tiny, tmp_path):
    cfg, _, _ = tiny
    lines = (cfg.out / "main" / "records.jsonl").read_text().splitlines()
    resumed = config.with_overrides(cfg, output_dir=str(tmp_path / "resume"))
    for sub in ("select",):
        src = cfg.out / sub / "selection.csv"
        (resumed.out / sub).mkdir(parents=True)
        (resumed.out / sub / "selection.csv").write_text(src.read_text())
    (resumed.out / "learn").mkdir(parents=True)
    for f in (cfg.out / "learn").glob("*.npz"):
        (resumed.out / "learn" / f.name).write_bytes(f.read_bytes())
    ledger = resumed.out / "main" / "records.jsonl"
    ledger.parent.mkdir(parents=True)
    # three complete records and a torn fourth line
    ledger.write_text("\n".join(lines[:3]) + "\n" + lines[3][:40])
    records = pipeline.run_experiment(resumed)
    ids = [r["job_id"] for r in records]
    assert len(ids) == len(set(ids)) == len(lines)
    original = {json.loads(l)["job_id"]: json.loads(l) for l in lines}
    for r in records:
        assert r["curve"] == original[r["job_id"]]["curve"]
    on_disk = [json.loads(l) for l in ledger.read_text().splitlines()]
    assert len(on_disk) == len(lines)


def test_analysis_reports(tiny):
    cfg, _, _ = tiny
    rep = cfg.out / "main" / "report"
    for name in ("auc_comparison.csv", "final_policy_comparison.csv", "correlations.csv", "confidence_bands.csv"):
        assert (rep / name).exists()
    auc_rows = pipeline.read_csv(rep / "auc_comparison.csv")
    assert {r["task"] for r in auc_rows} == set(cfg.test_tasks)
    assert all(r["verdict"] in ("improvement", "deterioration", "none") for r in auc_rows)
    text = (rep / "summary.txt").read_text()
    assert "improvement" in text and "deterioration" in text


def test_sensitivity_records(tiny):
    cfg, _, _ = tiny
    records = pipeline.load_records(cfg.out / "sensitivity" / "records.jsonl")
    sigmas = sorted({r["noise_sigma"] for r in records if r["reward_mode"] == "Ext+Lang"})
    assert sigmas == [0.0, 0.1]
    assert sum(r["reward_mode"] == "ExtOnly" for r in records) == cfg.sensitivity.n_seeds


def test_verify_invariance_command(tmp_path, capsys):
    code = cli.main(["verify-invariance", "--instances", "3", "--potentials", "2", "--max-states", "3",
                     "--max-horizon", "3", "--report-dir", str(tmp_path), "--out-dir", str(tmp_path)])
    assert code == 0
    assert "6/6" in capsys.readouterr().out
    rows = pipeline.read_csv(tmp_path / "verification.csv")
    assert len(rows) == 6
    dumps = json.loads((tmp_path / "counterexamples.json").read_text())
    assert dumps[-1]["instance"] == "action_bonus" and dumps[-1]["passed"] is False


def test_missing_layout_path_is_a_config_error(tmp_path, capsys):
    code = cli.main(["gen-data", "--layout", str(tmp_path / "nope.yaml"), "--out-dir", str(tmp_path)])
    assert code == 2
    assert "nope.yaml" in capsys.readouterr().err


def test_set_overrides_and_unknown_keys(tmp_path, capsys):
    args = cli.build_parser().parse_args(["analyze", "--set", "rl.ppo.n_envs=3", "--set", "lambdas=[0.5]",
                                          "--seed", "4"])
    cfg = cli.resolve_config(args)
    assert cfg.rl.ppo.n_envs == 3 and cfg.lambdas == [0.5] and cfg.master_seed == 4
    assert cli.main(["analyze", "--set", "rl.n_sedes=3"]) == 2
    assert "rl.n_sedes" in capsys.readouterr().err


def test_config_validation_errors():
    with pytest.raises(dataset.ConfigurationError):
        config.from_dict({"lambdas": []})
    with pytest.raises(dataset.ConfigurationError):
        config.from_dict({"rl": {"n_seeds": 0}})
    with pytest.raises(dataset.ConfigurationError):
        config.from_dict({"test_tasks": ["r99"]})
    with pytest.raises(dataset.ConfigurationError):
        config.load_config("/nonexistent/config.yaml")


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(config.OUTPUT_ROOT_ENV, str(tmp_path))
    assert config.from_dict({"output_dir": "runs/x"}).out == tmp_path / "runs" / "x"


def test_config_hash_changes_with_content():
    a = config.from_dict({})
    b = config.from_dict({"master_seed": 1})
    assert a.config_hash() != b.config_hash() and a.config_hash() == config.from_dict({}).config_hash()
    moved = config.from_dict({"output_dir": "/elsewhere"})
    assert moved.config_hash() == a.config_hash()
