from __future__ import annotations

import json

import numpy as np
import pytest

from rgvlm import cli, dataset
from rgvlm.iql import IQLPolicy, init_params
from rgvlm.annotator import OracleBackend, annotate_trajectory

SMALL = {
    "generator": {"trajectories_per_length": 3, "task_lengths": [1, 2]},
    "iql": {"updates": 15, "batch_size": 16},
    "eval": {"task_lengths": [1, 2], "tasks_per_length": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


def main(cmd, *rest):
    return cli.main([cmd, "--config", "cfg.json", *rest])


def test_overrides_and_validation():
    cfg = cli.load_config(None, ["--iql.gamma=0.95", "--eval.task_lengths=[1,2]", "--annotator.model=m1"], seed=3)
    assert cfg["iql"]["gamma"] == 0.95 and cfg["eval"]["task_lengths"] == [1, 2]
    assert cfg["annotator"]["model"] == "m1"
    assert cfg["seed"] == 3 and cfg["iql"]["seed"] == 3
    assert cli.load_config(None, ["--iql.seed=9"], seed=3)["iql"]["seed"] == 9
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, ["--iql.gama=0.9"])
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, ["--nosuch.field=1"])
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, ["positional"])


def test_bad_values_exit_1(workdir):
    assert main("gen-data", "--out", "d", "--generator.suboptimality=2") == cli.EXIT_VALIDATION
    assert main("train", "--dataset", "missing", "--labels", "sparse") == cli.EXIT_VALIDATION


def test_full_pipeline(workdir, capsys):
    assert main("gen-data", "--out", "data") == 0
    out = capsys.readouterr().out
    assert "length 1: 3" in out and "length 2: 3" in out
    manifest = dataset.read_manifest(workdir / "data")
    assert manifest["count"] == 6

    assert main("label", "--dataset", "data", "--source", "combined") == cli.EXIT_VALIDATION
    assert "dense labels first" in capsys.readouterr().err
    assert main("label", "--dataset", "data", "--source", "sparse") == 0
    assert len(dataset.read_labels(workdir / "data", "sparse")) == 6
    assert main("label", "--dataset", "data", "--source", "lvlm", "--backend", "oracle") == cli.EXIT_VALIDATION
    assert main("label", "--dataset", "data", "--source", "oracle") == 0
    assert main("label", "--dataset", "data", "--source", "combined") == 0
    assert main("label", "--dataset", "data", "--source", "frame_sim") == 0

    assert main("train", "--dataset", "data", "--labels", "combined", "--out", "t_c") == 0
    assert (workdir / "t_c" / "policy.bin").exists()
    assert (workdir / "t_c" / "metrics.csv").read_text().startswith("update,v_loss,q_loss,policy_loss,mean_advantage")
    assert main("train", "--dataset", "data", "--labels", "sparse", "--out", "t_s") == 0
    assert main("train", "--dataset", "data", "--labels", "oracle", "--out", "t_o", "--iql.seed=1") == 0
    assert main("train", "--dataset", "data", "--labels", "seq_sim", "--out", "t_x") == cli.EXIT_VALIDATION

    assert main("eval", "--artifact", "t_c/policy.bin", "--out", "ev") == 0
    assert main("eval", "--artifact", "t_s/policy.bin", "--out", "ev") == 0
    assert sorted(p.name for p in (workdir / "ev").iterdir()) == [
        "eval_combined_fixed.csv",
        "eval_combined_randomized.csv",
        "eval_sparse_fixed.csv",
        "eval_sparse_randomized.csv",
    ]
    capsys.readouterr()
    reports = [str(p) for p in sorted((workdir / "ev").iterdir())]
    assert main("report", *reports, "--baseline", "sparse", "--out", "rep") == 0
    assert "combined" in capsys.readouterr().out
    table = json.loads((workdir / "rep" / "comparison.json").read_text())
    assert table["baseline"] == "sparse" and set(table["drops"]) == {"combined", "sparse"}
    assert main("report", *reports, "--baseline", "nope", "--out", "rep") == cli.EXIT_VALIDATION
    assert "combined, sparse" in capsys.readouterr().err

    raw = bytearray((workdir / "t_c" / "policy.bin").read_bytes())
    raw[-1] ^= 1
    (workdir / "bad.bin").write_bytes(bytes(raw))
    assert main("eval", "--artifact", "bad.bin", "--out", "ev2") == cli.EXIT_VALIDATION
    assert "checksum" in capsys.readouterr().err


def test_label_resume_issues_only_missing_conversations(workdir, monkeypatch):
    assert main("gen-data", "--out", "data") == 0
    trajs = dataset.read_dataset(workdir / "data")
    backend = OracleBackend()
    config = cli.load_config("cfg.json")
    monkeypatch.setattr(cli, "make_backend", lambda *a: backend)
    # simulate an interrupted run: label the first half only
    for t in trajs[:3]:
        dataset.append_label(workdir / "data", annotate_trajectory(backend, t, sleep=lambda s: None))
    before = backend.calls
    cli.cmd_label(config, workdir / "data", "oracle")
    expected = sum(2 * -(-len(t) // 8) for t in trajs[3:])
    assert backend.calls - before == expected
    assert [l.trajectory_id for l in dataset.read_labels(workdir / "data", "oracle")] == [t.id for t in trajs]


def test_label_failures_exit_2(workdir, monkeypatch):
    assert main("gen-data", "--out", "data") == 0
    # a cache-replay backend with an empty cache cannot answer anything
    assert main("label", "--dataset", "data", "--source", "lvlm", "--backend", "cache-replay", "--cache-dir", "empty") == cli.EXIT_BACKEND


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(workdir, monkeypatch):
    assert main("gen-data", "--out", "data") == 0
    assert main("label", "--dataset", "data", "--source", "sparse") == 0
    assert main("train", "--dataset", "data", "--labels", "sparse", "--out", "t", "--iql.learning_rate=1e300") == cli.EXIT_DIVERGENCE


def test_zero_updates_artifact_equals_init(workdir):
    assert main("gen-data", "--out", "data") == 0
    assert main("label", "--dataset", "data", "--source", "sparse") == 0
    assert main("train", "--dataset", "data", "--labels", "sparse", "--out", "t", "--iql.updates=0") == 0
    pol = IQLPolicy.load(workdir / "t" / "policy.bin")
    init = init_params(pol.encoder_.dim, 7, (128, 128), np.random.default_rng(0).spawn(2)[0])
    assert np.array_equal(pol.params_.policy_net.flat(), init.policy_net.flat())
