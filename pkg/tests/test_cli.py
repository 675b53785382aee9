import json

import numpy as np
import pytest

from dmnc import cli
from dmnc.checkpoint import load_checkpoint


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


TINY_TRAIN = ["--embed", "8", "--hidden", "12", "--cells", "4", "--word", "6",
              "--read-heads", "1", "--iterations", "4", "--batch", "3",
              "--log-every", "0"]


@pytest.fixture()
def sum_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("sumdata")
    code = cli.main(["gen-data", "--task", "sum", "--lmax", "3",
                     "--value-max", "6", "--n", "30", "--eval-n", "12",
                     "--out-dir", str(path)])
    assert code == 0
    return path


@pytest.fixture()
def emr_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("emrdata")
    code = cli.main(["gen-data", "--task", "emr", "--patients", "12",
                     "--n-diag", "6", "--n-proc", "4", "--cross-labels", "8",
                     "--history-labels", "3", "--out-dir", str(path)])
    assert code == 0
    return path


@pytest.fixture()
def sum_run(sum_data, tmp_path_factory, capsys):
    out = tmp_path_factory.mktemp("sumrun")
    code, stdout, _ = run(capsys, "train", "--task", "sum", "--data",
                          str(sum_data / "sum_train.jsonl"), *TINY_TRAIN,
                          "--out-dir", str(out))
    assert code == 0
    return out, last_json(stdout)


def test_gen_data_sum_reruns_byte_identical(tmp_path, capsys):
    for sub in ("a", "b"):
        code, _, _ = run(capsys, "gen-data", "--task", "sum", "--lmax", "3",
                         "--value-max", "5", "--n", "20", "--eval-n", "8",
                         "--out-dir", str(tmp_path / sub), "--seed", "4")
        assert code == 0
    for name in ("sum_train.jsonl", "sum_eval.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()


def test_gen_data_emr_writes_three_splits(emr_data, capsys):
    names = {"emr_train.jsonl", "emr_valid.jsonl", "emr_test.jsonl"}
    assert names <= {p.name for p in emr_data.iterdir()}
    first = json.loads((emr_data / "emr_train.jsonl").read_text().splitlines()[0])
    assert first["header"]["cross_labels"] == 8
    assert first["header"]["n_label"] == 11


def test_gen_data_rejects_bad_sizes(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--task", "sum", "--lmax", "0",
                       "--out-dir", str(tmp_path))
    assert code == 1
    assert "lmax" in err


def test_unknown_command_and_missing_flags_are_usage_errors(capsys):
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "train", "--task", "sum")[0] == 1  # --data required
    assert run(capsys, "gen-data", "--task", "nope")[0] == 1


def test_unwritable_output_is_a_data_error(sum_data, capsys):
    code, _, err = run(capsys, "train", "--task", "sum", "--data",
                       str(sum_data / "sum_train.jsonl"), *TINY_TRAIN,
                       "--out-dir", "/proc/invalid/denied")
    assert code == 2
    assert err


def test_missing_data_file_is_a_data_error(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--task", "sum", "--data",
                     str(tmp_path / "absent.jsonl"), "--out-dir", str(tmp_path))
    assert code == 2


def test_train_writes_log_and_final_checkpoint(sum_run):
    out, summary = sum_run
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(l)["iter"] for l in lines] == [1, 2, 3, 4]
    assert all(set(json.loads(l)) == {"iter", "loss", "wall_ms"} for l in lines)
    ckpt = load_checkpoint(out / "checkpoint_final.json")
    assert ckpt.iteration == 4
    assert summary["iterations"] == 4
    assert summary["checkpoint_sha256"]


def test_train_periodic_checkpoints(sum_data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--task", "sum", "--data",
                     str(sum_data / "sum_train.jsonl"), *TINY_TRAIN,
                     "--checkpoint-every", "2", "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "checkpoint_000002.json").exists()
    assert not (tmp_path / "checkpoint_000004.json").exists()  # final covers it
    assert (tmp_path / "checkpoint_final.json").exists()


def test_train_same_seed_same_hash(sum_data, tmp_path, capsys):
    hashes = []
    for _ in range(2):
        out = tmp_path / "run"
        if out.exists():
            for p in out.iterdir():
                p.unlink()
        code, stdout, _ = run(capsys, "train", "--task", "sum", "--data",
                              str(sum_data / "sum_train.jsonl"), *TINY_TRAIN,
                              "--out-dir", str(out))
        assert code == 0
        hashes.append(last_json(stdout)["checkpoint_sha256"])
    assert hashes[0] == hashes[1]


def test_resume_continues_iteration_counter(sum_data, sum_run, capsys):
    out, _ = sum_run
    code, stdout, _ = run(capsys, "train", "--task", "sum", "--data",
                          str(sum_data / "sum_train.jsonl"), "--resume",
                          str(out / "checkpoint_final.json"),
                          "--iterations", "3", "--log-every", "0",
                          "--out-dir", str(out))
    assert code == 0
    assert last_json(stdout)["iterations"] == 7
    iters = [json.loads(l)["iter"]
             for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert iters == [1, 2, 3, 4, 5, 6, 7]
    assert load_checkpoint(out / "checkpoint_final.json").iteration == 7


def test_resume_matches_unbroken_run(sum_data, sum_run, tmp_path, capsys):
    out, _ = sum_run  # 4 iterations, then 3 more
    run(capsys, "train", "--task", "sum", "--data",
        str(sum_data / "sum_train.jsonl"), "--resume",
        str(out / "checkpoint_final.json"), "--iterations", "3",
        "--log-every", "0", "--out-dir", str(out))
    i = TINY_TRAIN.index("--iterations")
    flags = TINY_TRAIN[:i + 1] + ["7"] + TINY_TRAIN[i + 2:]
    code, _, _ = run(capsys, "train", "--task", "sum", "--data",
                     str(sum_data / "sum_train.jsonl"), *flags,
                     "--out-dir", str(tmp_path))
    assert code == 0
    a = load_checkpoint(out / "checkpoint_final.json").parameters
    b = load_checkpoint(tmp_path / "checkpoint_final.json").parameters
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_rejects_mismatched_data(sum_run, tmp_path, capsys):
    out, _ = sum_run
    run(capsys, "gen-data", "--task", "sum", "--lmax", "3", "--value-max",
        "9", "--n", "10", "--eval-n", "5", "--out-dir", str(tmp_path))
    code, _, err = run(capsys, "train", "--task", "sum", "--data",
                       str(tmp_path / "sum_train.jsonl"), "--resume",
                       str(out / "checkpoint_final.json"),
                       "--out-dir", str(out))
    assert code == 2
    assert "vocab" in err


def test_eval_report_fields_and_determinism(sum_data, sum_run, capsys):
    out, _ = sum_run
    reports = []
    for _ in range(2):
        code, stdout, _ = run(capsys, "eval", "--checkpoint",
                              str(out / "checkpoint_final.json"), "--data",
                              str(sum_data / "sum_eval.jsonl"),
                              "--out-dir", str(out))
        assert code == 0
        reports.append(stdout)
    assert reports[0] == reports[1]
    report = json.loads(reports[0])
    assert set(report) == {"task", "metrics", "data", "config",
                           "checkpoint_sha256"}
    assert report["task"] == "sum"
    assert 0.0 <= report["metrics"]["sequence_accuracy"] <= 1.0
    assert report["config"]["model_config"]["hidden"] == 12
    on_disk = json.loads((out / "eval_report.json").read_text())
    assert on_disk == report


def test_eval_lmax_generates_fresh_set(sum_run, capsys):
    out, _ = sum_run
    code, stdout, _ = run(capsys, "eval", "--checkpoint",
                          str(out / "checkpoint_final.json"), "--lmax", "5",
                          "--n", "8", "--out-dir", str(out))
    assert code == 0
    report = json.loads(stdout)
    assert report["data"]["generated"]["lmax"] == 5
    assert report["metrics"]["n"] == 8


def test_eval_vocab_mismatch_is_a_data_error(sum_run, tmp_path, capsys):
    out, _ = sum_run
    run(capsys, "gen-data", "--task", "sum", "--lmax", "3", "--value-max",
        "9", "--n", "6", "--eval-n", "6", "--out-dir", str(tmp_path))
    code, _, err = run(capsys, "eval", "--checkpoint",
                       str(out / "checkpoint_final.json"), "--data",
                       str(tmp_path / "sum_eval.jsonl"), "--out-dir", str(out))
    assert code == 2
    assert "value_max" in err


def test_eval_untrained_model_scores_near_chance(tmp_path, capsys):
    """With 99 output symbols an untrained model free-runs at ~1/99."""
    from dmnc.baselines import make_model
    from dmnc.checkpoint import save_checkpoint
    from dmnc.config import ModelConfig, RunConfig, TrainConfig
    mc = ModelConfig(vocab_in1=50, vocab_in2=50, vocab_out=99, embed=8,
                     hidden=12, cells=4, word=6, read_heads=1,
                     output="sequence")
    rc = RunConfig(task="sum", model="dmnc_late", model_config=mc,
                   train_config=TrainConfig(iterations=1, batch=1), seed=0)
    model = make_model(rc.model, mc, rc.seed)
    ckpt = tmp_path / "untrained.json"
    save_checkpoint(ckpt, rc, model)
    code, stdout, _ = run(capsys, "eval", "--checkpoint", str(ckpt),
                          "--lmax", "10", "--n", "200",
                          "--out-dir", str(tmp_path))
    assert code == 0
    acc = json.loads(stdout)["metrics"]["sequence_accuracy"]
    assert acc < 0.05, f"untrained accuracy {acc} is suspiciously high"


def test_eval_sum_needs_data_or_lmax(sum_run, capsys):
    out, _ = sum_run
    code, _, _ = run(capsys, "eval", "--checkpoint",
                     str(out / "checkpoint_final.json"), "--out-dir", str(out))
    assert code == 1


def test_emr_train_eval_history_metric(emr_data, tmp_path, capsys):
    code, stdout, _ = run(capsys, "train", "--task", "emr", "--model",
                          "dual_lstm", "--data",
                          str(emr_data / "emr_train.jsonl"), "--embed", "6",
                          "--hidden", "8", "--iterations", "3",
                          "--log-every", "0", "--out-dir", str(tmp_path))
    assert code == 0
    code, stdout, _ = run(capsys, "eval", "--checkpoint",
                          str(tmp_path / "checkpoint_final.json"), "--data",
                          str(emr_data / "emr_test.jsonl"),
                          "--out-dir", str(tmp_path))
    assert code == 0
    metrics = json.loads(stdout)["metrics"]
    assert {"macro_auc", "macro_f1", "p_at_1", "history_p_at_1"} <= set(metrics)


def test_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lmax": 4, "value-max": 9}))
    code, stdout, _ = run(capsys, "gen-data", "--task", "sum", "--lmax", "2",
                          "--value-max", "3", "--n", "5", "--eval-n", "5",
                          "--config", str(cfg), "--out-dir", str(tmp_path))
    assert code == 0
    summary = last_json(stdout)
    assert summary["lmax"] == 4
    assert summary["value_max"] == 9


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"not-a-flag": 1}))
    code, _, err = run(capsys, "gen-data", "--task", "sum", "--config",
                       str(cfg), "--out-dir", str(tmp_path))
    assert code == 2
    assert "not-a-flag" in err
    cfg.write_text("{broken")
    assert run(capsys, "gen-data", "--task", "sum", "--config", str(cfg),
               "--out-dir", str(tmp_path))[0] == 2


def test_out_dir_env_var_default(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DMNC_OUT_DIR", str(tmp_path / "fromenv"))
    code, _, _ = run(capsys, "gen-data", "--task", "sum", "--lmax", "2",
                     "--value-max", "3", "--n", "4", "--eval-n", "4")
    assert code == 0
    assert (tmp_path / "fromenv" / "sum_train.jsonl").exists()


def test_dump_gates_rows_and_header(sum_data, sum_run, capsys):
    out, _ = sum_run
    code, stdout, _ = run(capsys, "dump-gates", "--checkpoint",
                          str(out / "checkpoint_final.json"), "--data",
                          str(sum_data / "sum_eval.jsonl"), "--index", "1")
    assert code == 0
    lines = [json.loads(l) for l in stdout.strip().splitlines()]
    assert "header" in lines[0]
    assert lines[0]["header"]["index"] == 1
    rows = lines[1:]
    sample = json.loads((sum_data / "sum_eval.jsonl").read_text().splitlines()[2])
    assert len(rows) == len(sample["view1"]) + len(sample["view2"])
    for row in rows:
        assert set(row) == {"view", "step", "event_index", "g_w", "g_c"}
        assert 0.0 < row["g_w"] < 1.0
        assert row["g_c"] == ""  # late fusion holds no cache gate


def test_dump_gates_early_mode_reports_cache_gate(sum_data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--task", "sum", "--model",
                     "dmnc_early", "--data", str(sum_data / "sum_train.jsonl"),
                     *TINY_TRAIN, "--out-dir", str(tmp_path))
    assert code == 0
    code, stdout, _ = run(capsys, "dump-gates", "--checkpoint",
                          str(tmp_path / "checkpoint_final.json"), "--data",
                          str(sum_data / "sum_eval.jsonl"))
    assert code == 0
    rows = [json.loads(l) for l in stdout.strip().splitlines()][1:]
    assert all(isinstance(row["g_c"], float) and 0.0 < row["g_c"] < 1.0
               for row in rows)


def test_dump_gates_writes_file(sum_data, sum_run, tmp_path, capsys):
    out, _ = sum_run
    target = tmp_path / "gates.jsonl"
    code, stdout, _ = run(capsys, "dump-gates", "--checkpoint",
                          str(out / "checkpoint_final.json"), "--data",
                          str(sum_data / "sum_eval.jsonl"), "--out",
                          str(target))
    assert code == 0
    assert stdout == ""
    assert len(target.read_text().splitlines()) >= 2


def test_dump_gates_rejects_baselines_and_bad_index(sum_data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--task", "sum", "--model", "dual_lstm",
                     "--data", str(sum_data / "sum_train.jsonl"), *TINY_TRAIN,
                     "--out-dir", str(tmp_path))
    assert code == 0
    code, _, err = run(capsys, "dump-gates", "--checkpoint",
                       str(tmp_path / "checkpoint_final.json"), "--data",
                       str(sum_data / "sum_eval.jsonl"))
    assert code == 2
    assert "dual_lstm" in err


def test_dump_gates_index_out_of_range(sum_data, sum_run, capsys):
    out, _ = sum_run
    code, _, err = run(capsys, "dump-gates", "--checkpoint",
                       str(out / "checkpoint_final.json"), "--data",
                       str(sum_data / "sum_eval.jsonl"), "--index", "99")
    assert code == 2
    assert "99" in err


def test_gradcheck_passes_quickly(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--stride", "60")
    assert code == 0
    lines = [json.loads(l) for l in stdout.strip().splitlines()]
    assert lines[-1]["passed"] is True
    covered = {(l["model"], l["output"]) for l in lines if "param" in l}
    assert len(covered) == 8


def test_gradcheck_detects_injected_fault(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--stride", "120",
                          "--inject-fault")
    assert code == 3
    failed = [json.loads(l) for l in stdout.strip().splitlines()
              if json.loads(l).get("failed")]
    assert failed and all(f["worst_param"] for f in failed)


def test_gradcheck_fault_hook_restores_tanh(capsys):
    from dmnc import tensor as T
    original = T.tanh
    run(capsys, "gradcheck", "--stride", "200", "--inject-fault")
    assert T.tanh is original
