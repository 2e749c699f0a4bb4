import json
import math

import numpy as np
import pytest

from pkmem.embedding_bag import SparseGrad
from pkmem.tensor import Tensor
from pkmem.trainer import (ConfigError, MetricsLog, NumericAbort, TrainConfig, ablate, apply_axis, build_model,
                           dense_baseline, gen_facts, load_checkpoint, load_config, run, save_checkpoint, setup,
                           train, write_ablation_csv)
from pkmem.trainer.ablate import is_non_decreasing
from pkmem.trainer.config import PRESETS, load_preset, scale_placement
from pkmem.trainer.optim import AdamHyper, SparseRowAdam, lr_at

from oracles import dense_adam


def small(**changes) -> TrainConfig:
    base = TrainConfig(vocab=64, dim=16, depth=2, heads=2, ffn_hidden=16, memory_placement=[1], half_n=8,
                       v_dim=24, k=4, key_dim=16, steps=20, batch_size=16, warmup=5, num_facts=100,
                       eval_interval=5, memory_lr_mult=10.0)
    return base.replace(**changes)


# -- data

def test_gen_facts_deterministic():
    a = gen_facts(500, 128, seed=3)
    b = gen_facts(500, 128, seed=3)
    assert a.to_bytes() == b.to_bytes()
    assert gen_facts(500, 128, seed=4).digest() != a.digest()


def test_gen_facts_unambiguous_10k_exhaustive():
    d = gen_facts(10_000, 512, seed=0)
    seen = {}
    for (s1, s2), r, o in zip(d.subjects.tolist(), d.relations.tolist(), d.objects.tolist()):
        key = (s1, s2, r)
        assert key not in seen
        seen[key] = o
    assert len(seen) == 10_000 and d.is_unambiguous()
    assert d.relations.max() < 16 and d.subjects.min() >= 16 and d.objects.min() >= 16


def test_gen_facts_subject_pool_and_eval_subset():
    d = gen_facts(1000, 512, seed=1, num_subjects=32, eval_size=200)
    assert d.subjects.max() < 16 + 32
    assert len(d.eval_idx) == 200 and set(d.eval_idx.tolist()) <= set(range(1000))
    assert d.inputs.shape == (1000, 3)
    assert "->" in d.render(0)


def test_gen_facts_errors():
    with pytest.raises(ValueError):
        gen_facts(10, 17, 0)
    with pytest.raises(ValueError):
        gen_facts(5000, 64, 0, num_subjects=4)
    with pytest.raises(ValueError):
        gen_facts(10, 64, 0, num_subjects=100)


# -- model

def test_dense_baseline_and_placement_errors():
    cfg = small()
    model = build_model(dense_baseline(cfg.model_config()))
    assert model.pool is None and model.param_counts()["memory"] == 0
    with pytest.raises(ConfigError):
        build_model(small(memory_placement=[2]).model_config())
    with pytest.raises(ConfigError):
        build_model(small(memory_placement=[1, 1]).model_config())


def test_shared_pool_param_accounting():
    one = build_model(small(depth=3, memory_placement=[1]).model_config())
    three = build_model(small(depth=3, memory_placement=[0, 1, 2]).model_config())
    assert one.param_counts()["memory"] == three.param_counts()["memory"] == 2 * 8 * 8 + 64 * 24
    dense = build_model(dense_baseline(small(depth=3, memory_placement=[1]).model_config()))
    assert one.param_counts()["total"] - dense.param_counts()["total"] == \
        one.param_counts()["memory"] + 2 * 16 * 24 - 3 * 16 * 16


def test_scale_placement():
    assert scale_placement([4, 12, 20], 24, 4) == [1, 2, 3]
    assert scale_placement([12], 24, 8) == [4]


def test_presets_load():
    for name in PRESETS:
        cfg = load_preset(name)
        cfg.validate()
        assert cfg.memory_placement
    with pytest.raises(ConfigError):
        load_preset("nope")


# -- config files

def test_config_round_trip_and_diagnostics(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "dim": 16,\n  "heads": "two"\n}\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)
    p.write_text('{\n  "dim": 16,\n  "bogus": 1\n}\n')
    with pytest.raises(ConfigError, match="line 3: unknown field.*bogus"):
        load_config(p)
    p.write_text('{\n  "dim": 16,\n  "depth": \n}\n')
    with pytest.raises(ConfigError, match="line 4 column 1"):
        load_config(p)
    p.write_text('{"memory_placement": [7]}')
    with pytest.raises(ConfigError, match="memory_placement"):
        load_config(p)
    p.write_text(json.dumps(small().to_dict()))
    assert load_config(p) == small()
    assert small().config_hash() == small().config_hash() != small(seed=1).config_hash()


# -- optimizer

def test_lr_schedule():
    assert lr_at(1, 1.0, 10, 100) == pytest.approx(0.1)
    assert lr_at(10, 1.0, 10, 100) == pytest.approx(1.0)
    assert lr_at(100, 1.0, 10, 100, 0.1) == pytest.approx(0.1)
    vals = [lr_at(s, 1.0, 10, 100) for s in range(10, 101)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_sparse_adam_no_rows_untouched():
    table = Tensor(np.random.default_rng(0).standard_normal((10, 3)))
    before = table.data.copy()
    opt = SparseRowAdam(table, AdamHyper())
    opt.step(0.1, SparseGrad.empty(3, np.float64))
    opt.step(0.1, None)
    assert np.array_equal(table.data, before) and opt.allocated == 0


def test_sparse_adam_matches_dense_when_all_rows_touched():
    rng = np.random.default_rng(1)
    table = Tensor(rng.standard_normal((6, 4)), precision="wide")
    p = table.data.copy()
    m, v = np.zeros_like(p), np.zeros_like(p)
    opt = SparseRowAdam(table, AdamHyper(0.9, 0.98, 1e-8))
    for t in range(1, 6):
        g = rng.standard_normal((6, 4))
        opt.step(0.01, SparseGrad(np.arange(6), g))
        p, m, v = dense_adam(p, g, m, v, t, 0.01, 0.9, 0.98, 1e-8)
    np.testing.assert_allclose(table.data, p, rtol=1e-12)


def test_sparse_adam_summed_rows_and_lazy_bias_correction():
    rng = np.random.default_rng(2)
    table = Tensor(rng.standard_normal((5, 2)), precision="wide")
    start = table.data.copy()
    opt = SparseRowAdam(table, AdamHyper(0.9, 0.98, 1e-8))
    g_a = SparseGrad(np.array([1, 3]), rng.standard_normal((2, 2)))
    g_b = SparseGrad(np.array([3]), rng.standard_normal((1, 2)))
    opt.step(0.05, g_a.merge(g_b))  # two layers hitting row 3: one update, summed grad
    g3 = g_a.grads[1] + g_b.grads[0]
    ref, _, _ = dense_adam(start[3], g3, 0, 0, 1, 0.05, 0.9, 0.98, 1e-8)
    np.testing.assert_allclose(table.data[3], ref, rtol=1e-12)
    # row 4 first touched on the optimizer's second step still uses t=1
    g4 = rng.standard_normal((1, 2))
    opt.step(0.05, SparseGrad(np.array([4]), g4))
    ref, _, _ = dense_adam(start[4], g4[0], 0, 0, 1, 0.05, 0.9, 0.98, 1e-8)
    np.testing.assert_allclose(table.data[4], ref, rtol=1e-12)
    assert opt.touched_rows().tolist() == [1, 3, 4]
    np.testing.assert_array_equal(table.data[[0, 2]], start[[0, 2]])


# -- training loop

def test_lr_zero_keeps_loss_constant():
    st = setup(small(lr=0.0, steps=15))
    log = run(st)
    nll = log.column("eval_nll")
    assert len(nll) == 3 and max(nll) == min(nll)


def test_deterministic_replay():
    a = run(setup(small()))
    b = run(setup(small()))
    assert a.records == b.records


def test_resume_reproduces_curve(tmp_path):
    full = run(setup(small()))
    st = setup(small())
    run(st, steps=10)
    save_checkpoint(st, tmp_path / "ck.npz")
    resumed = load_checkpoint(tmp_path / "ck.npz")
    assert resumed.opt.step == 10
    assert run(resumed).records == full.records


def test_untouched_value_rows_bit_stable():
    st = setup(small(half_n=16, steps=10))
    before = st.model.pool.V.data.copy()
    run(st)
    touched = st.opt.values.touched_rows()
    untouched = np.setdiff1d(np.arange(256), touched)
    assert len(untouched) > 0
    np.testing.assert_array_equal(st.model.pool.V.data[untouched], before[untouched])
    assert not np.array_equal(st.model.pool.V.data[touched], before[touched])


def test_numeric_abort():
    st = setup(small())
    st.model.lm_head.data[0, 0] = np.inf
    with pytest.raises(NumericAbort):
        run(st)


def test_train_entry_point_learns():
    cfg = small(steps=60, lr=1e-2)
    st = setup(cfg)
    log = train(st.model, st.data, 60, cfg=cfg)
    assert log.final()["step"] == 60
    assert log.column("train_loss")[-1] < log.column("train_loss")[0]


def test_metrics_log_io(tmp_path):
    log = MetricsLog([{"step": 5, "train_loss": 1.0, "eval_nll": 2.0, "recall": 0.5},
                      {"step": 10, "train_loss": 0.5, "eval_nll": 1.0, "recall": 0.95}])
    assert log.steps_to_recall(0.9) == 10 and log.steps_to_recall(0.99) == math.inf
    log.write_jsonl(tmp_path / "m.jsonl", header="pkmem test")
    assert (tmp_path / "m.jsonl").read_text().startswith("# pkmem test\n")
    assert MetricsLog.read_jsonl(tmp_path / "m.jsonl").records == log.records
    log.write_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "step,loss,eval_nll,recall"


# -- ablation

def test_apply_axis():
    base = small(depth=3)
    assert apply_axis(base, "placement", [0, 2]).memory_placement == [0, 2]
    assert apply_axis(base, "num_memory_layers", 2).memory_placement == [1, 2]
    assert apply_axis(base, "key_dim", 8).key_dim == 8
    assert apply_axis(base, "memory_size", 256).half_n == 16
    v = apply_axis(base, "v_dim", 6)
    assert v.half_n ** 2 * v.v_dim == 64 * 24 and not v.use_swilu
    with pytest.raises(ConfigError):
        apply_axis(base, "memory_size", 200)
    with pytest.raises(ConfigError):
        apply_axis(base, "v_dim", 7)
    with pytest.raises(ConfigError):
        apply_axis(base, "depth", 2)


def test_ablate_runs_and_writes_csv(tmp_path):
    rows = ablate("memory_size", [16, 64], small(steps=10), seeds=[0, 1])
    assert [(r.seed, r.value) for r in rows] == [(0, "16"), (0, "64"), (1, "16"), (1, "64")]
    assert rows[1].memory_params > rows[0].memory_params
    write_ablation_csv(rows, tmp_path / "a.csv", header="h")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "# h" and len(lines) == 6
    assert set(is_non_decreasing(rows)) == {0, 1}
