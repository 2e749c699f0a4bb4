import json

import numpy as np
import pytest

from pkmem import __version__
from pkmem.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, main
from pkmem.trainer.config import TrainConfig, save_config
from pkmem.trainer.loop import MetricsLog

TINY = dict(vocab=64, dim=16, depth=2, heads=2, ffn_hidden=16, memory_placement=[1], half_n=8, v_dim=24, k=4,
            key_dim=16, steps=12, batch_size=16, warmup=2, num_facts=80, eval_interval=4, memory_lr_mult=10.0)


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    save_config(TrainConfig(**TINY), p)
    return p


def first_line(path):
    return path.read_text().splitlines()[0]


def test_verify_topk_small_matrix(tmp_path, capsys):
    rc = main(["verify-topk", "--half-n", "4,8", "--k", "1,4", "--seeds", "5", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    head = first_line(tmp_path / "verify_topk.txt")
    assert head.startswith(f"# pkmem {__version__} config=") and head.endswith("seed=0")


def test_verify_topk_fault_and_empty(capsys):
    assert main(["verify-topk", "--half-n", "4", "--k", "2", "--seeds", "2", "--inject-fault"]) == EXIT_VERIFY
    out = capsys.readouterr().out
    assert "MISMATCH" in out and "expected" in out.lower()
    assert main(["verify-topk", "--seed-list", ""]) == EXIT_OK
    assert "vacuous" in capsys.readouterr().out


def test_bench_bag_grid_and_plot(tmp_path, capsys):
    rc = main(["bench-bag", "--dims", "8,16", "--num-values", "256", "--batch", "16", "--k", "4",
               "--repeats", "2", "--workers-list", "1,2", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    lines = (tmp_path / "bench_bag.csv").read_text().splitlines()
    assert lines[0].startswith("# pkmem") and lines[1].startswith("strategy,N_v,n,B,k,workers,repeat")
    assert len(lines) == 2 + 3 * 2 * 2 * 2 * 2  # strategies x dims x skews x workers x repeats
    assert (tmp_path / "bench_bag.png").stat().st_size > 0
    assert "winner" in (tmp_path / "bench_ranking.txt").read_text()
    assert "checksums: 48/48" in capsys.readouterr().out


def test_bench_bag_zero_repeats_header_only(tmp_path):
    assert main(["bench-bag", "--dims", "8", "--repeats", "0", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "bench_bag.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("strategy,")
    assert not (tmp_path / "bench_bag.png").exists()


def test_bench_bag_unknown_strategy():
    assert main(["bench-bag", "--strategies", "magic", "--repeats", "0"]) == EXIT_CONFIG


def test_shard_check(tmp_path, capsys):
    rc = main(["shard-check", "--groups", "1,2,4", "--dim", "16", "--num-values", "128", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "G=1: PASS" in out and "zero bytes exchanged" in out
    rep = json.loads((tmp_path / "shard_check.json").read_text())
    assert rep["header"].startswith("pkmem") and [c["G"] for c in rep["cases"]] == [1, 2, 4]
    assert main(["shard-check", "--groups", "3", "--dim", "16"]) == EXIT_CONFIG


def test_train_single_run(tmp_path, cfg_path, capsys):
    rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--seed", "3"])
    assert rc == EXIT_OK
    assert first_line(tmp_path / "memory.jsonl").endswith("seed=3")
    assert (tmp_path / "memory.csv").read_text().splitlines()[1] == "step,loss,eval_nll,recall"
    assert (tmp_path / "memory.png").exists()
    assert "final: step 12" in capsys.readouterr().out


def test_train_paired(tmp_path, cfg_path):
    rc = main(["train", "--config", str(cfg_path), "--paired", "--out", str(tmp_path), "--no-plots"])
    assert rc == EXIT_OK
    for name in ("dense.jsonl", "memory.jsonl", "dense.csv", "memory.csv", "comparison.json"):
        assert (tmp_path / name).exists()
    summary = json.loads((tmp_path / "comparison.json").read_text())
    assert {"dense_steps", "memory_steps", "memory_faster", "memory_lower_nll"} <= set(summary)
    assert not (tmp_path / "paired.png").exists()


def test_train_resume_identical(tmp_path, cfg_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--config", str(cfg_path), "--out", str(full), "--no-plots"]) == EXIT_OK
    assert main(["train", "--config", str(cfg_path), "--checkpoint-every", "8",
                 "--out", str(part), "--no-plots"]) == EXIT_OK
    ckpt = part / "memory.step8.ckpt.npz"
    rc = main(["train", "--resume", str(ckpt), "--out", str(part / "resumed"), "--no-plots"])
    assert rc == EXIT_OK
    a = MetricsLog.read_jsonl(full / "memory.jsonl").records
    b = MetricsLog.read_jsonl(part / "resumed" / "memory.jsonl").records
    assert a == b


def test_train_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "dim": 16,\n  "heads": 2.5\n}\n')
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "line 3" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["train", "--preset", "nope"]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_abort(tmp_path, cfg_path):
    cfg = json.loads(cfg_path.read_text())
    cfg["lr"] = 1e30
    cfg["grad_clip"] = 0.0
    p = tmp_path / "explode.json"
    p.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(p), "--steps", "40"]) == EXIT_NUMERIC


def test_ablate(tmp_path, cfg_path):
    rc = main(["ablate", "--config", str(cfg_path), "--axis", "placement", "--values", "0,1,0-1",
               "--steps", "4", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    lines = (tmp_path / "ablate_placement.csv").read_text().splitlines()
    assert lines[0].startswith("# pkmem") and len(lines) == 5
    assert [l.split(",")[1] for l in lines[2:]] == ["0", "1", "0-1"]
    assert (tmp_path / "ablate_placement.png").exists()
    assert main(["ablate", "--config", str(cfg_path), "--axis", "memory_size", "--values", "50"]) == EXIT_CONFIG


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--grad-seeds", "1", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gradcheck: PASS" in out and "toy_model" in out
    assert first_line(tmp_path / "gradcheck.txt").startswith("# pkmem")


def test_deterministic_flag_same_output(tmp_path, cfg_path):
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--deterministic", "--out", str(tmp_path / d),
                     "--no-plots"]) == EXIT_OK
    assert (tmp_path / "a" / "memory.jsonl").read_text() == (tmp_path / "b" / "memory.jsonl").read_text()
    assert np.isfinite(MetricsLog.read_jsonl(tmp_path / "a" / "memory.jsonl").final()["eval_nll"])
