import subprocess
import sys

import numpy as np
import pytest

from canonseg import data as D
from canonseg import groups as G
from canonseg import prompts as P
from canonseg import train as TR


def tiny_config(**overrides):
    base = dict(
        seed=3,
        epochs_stage1=2,
        epochs_stage2=2,
        epochs_stage3=1,
        pairs_per_epoch=64,
        batch_size=8,
        chans=(4, 6, 8),
        embed_dim=16,
        canon_hidden=2,
        canon_kernel=5,
        canon_pool_to=8,
    )
    base.update(overrides)
    return TR.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    man = D.generate_dataset(D.PhantomSpec(image_size=32, seed=5), 24, root)
    return TR.load_arrays(man)


@pytest.fixture(scope="module")
def bank(tiny_data):
    return P.default_bank(tiny_data.class_names)


class TestOptimizer:
    def test_adamw_decoupled_decay(self):
        opt = TR.AdamW(weight_decay=0.5)
        p = {"w": np.array([1.0], dtype=np.float32)}
        g = {"w": np.array([0.0], dtype=np.float32)}
        out = opt.step(p, g, lr=0.1)
        # zero gradient: only the decoupled decay acts (Adam term is exactly 0/eps)
        assert abs(out["w"][0] - (1.0 - 0.1 * 0.5 * 1.0)) < 1e-6

    def test_missing_grads_leave_param(self):
        opt = TR.AdamW()
        p = {"a": np.ones(2, dtype=np.float32), "b": np.ones(2, dtype=np.float32)}
        out = opt.step(p, {"a": np.ones(2, dtype=np.float32)}, lr=0.1)
        assert np.array_equal(out["b"], p["b"])
        assert not np.array_equal(out["a"], p["a"])

    def test_cosine_schedule_endpoints(self):
        assert TR.cosine_lr(0, 100, 1e-4, 1e-6) == pytest.approx(1e-4)
        assert TR.cosine_lr(99, 100, 1e-4, 1e-6) == pytest.approx(1e-6)
        mid = TR.cosine_lr(50, 101, 1e-4, 1e-6)
        assert 1e-6 < mid < 1e-4


class TestStages:
    def test_stage1_requires_canonical(self, tiny_data, bank):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        broken = TR.ArrayDataset(
            images=tiny_data.images, masks=tiny_data.masks, present=tiny_data.present,
            sample_ids=tiny_data.sample_ids, class_names=tiny_data.class_names,
            canonical=False,
        )
        with pytest.raises(TR.NonCanonicalDataset):
            TR.train_stage1(cfg, broken, model)

    def test_stage2_requires_prompts(self, tiny_data, bank):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        with pytest.raises(TR.MissingPrompts):
            TR.train_stage2(cfg, tiny_data, [], model)

    def test_stage1_touches_only_canonicalizer(self, tiny_data, bank):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        before = {n: t.data.copy() for n, t in model.parameters()}
        TR.train_stage1(cfg, tiny_data, model)
        after = dict(model.parameters())
        for name in before:
            if name.startswith("canon."):
                assert not np.array_equal(after[name].data, before[name])
            else:
                assert after[name].data.tobytes() == before[name].tobytes()

    def test_stage2_leaves_canonicalizer_bit_identical(self, tiny_data, bank):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        pool = TR.build_prompt_pool(tiny_data, bank, cfg.seed)
        before = {n: t.data.copy() for n, t in model.canonicalizer.parameters()}
        TR.train_stage2(cfg, tiny_data, pool, model)
        for name, t in model.canonicalizer.parameters():
            assert t.data.tobytes() == before[name].tobytes()

    def test_stage1_loss_decreases(self, tiny_data, bank):
        cfg = tiny_config(epochs_stage1=3)
        model = TR.build_model(cfg, bank)
        hist = TR.train_stage1(cfg, tiny_data, model)
        assert hist[-1] < hist[0]

    def test_stage3_runs_and_updates_everything(self, tiny_data, bank):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        pool = TR.build_prompt_pool(tiny_data, bank, cfg.seed)
        before = {n: t.data.copy() for n, t in model.parameters()}
        TR.train_stage3(cfg, tiny_data, pool, model, canonicalize=True)
        after = dict(model.parameters())
        changed = [n for n in before if not np.array_equal(after[n].data, before[n])]
        assert any(n.startswith("canon.") for n in changed)
        assert any(n.startswith("seg.") for n in changed)


class TestCheckpoint:
    def test_round_trip_bit_identical_outputs(self, tiny_data, bank, tmp_path, rng):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        TR.save_checkpoint(tmp_path / "ckpt", model, cfg, tiny_data.class_names, [1])
        loaded, meta = TR.load_checkpoint(tmp_path / "ckpt")
        assert meta["stages_completed"] == [1]
        x = rng.random((32, 32)).astype(np.float32)
        prompt = P.generate_informed(1, bank, 7)
        a = model.segment(x, prompt)
        b = loaded.segment(x, prompt)
        assert a.probs.tobytes() == b.probs.tobytes()
        assert np.array_equal(a.intent_logits, b.intent_logits)
        assert a.g_hat == b.g_hat

    def test_all_params_restored_bitwise(self, tiny_data, bank, tmp_path):
        cfg = tiny_config()
        model = TR.build_model(cfg, bank)
        TR.save_checkpoint(tmp_path / "c2", model, cfg, tiny_data.class_names, [])
        loaded, _ = TR.load_checkpoint(tmp_path / "c2")
        orig = dict(model.parameters())
        for name, t in loaded.parameters():
            assert t.data.tobytes() == orig[name].data.tobytes(), name


class TestPromptPool:
    def test_pool_covers_absent_classes(self, tiny_data, bank):
        pool = TR.build_prompt_pool(tiny_data, bank, 0)
        informed = [p for p in pool if p.kind == P.KIND_INFORMED]
        # every class id appears for every sample, present or not
        per_sample = len(bank.class_names)
        assert len(informed) == tiny_data.size * per_sample
        agnostic = [p for p in pool if p.kind == P.KIND_AGNOSTIC]
        assert agnostic and all(p.target_class is not None for p in agnostic)

    def test_pool_deterministic(self, tiny_data, bank):
        a = TR.build_prompt_pool(tiny_data, bank, 4)
        b = TR.build_prompt_pool(tiny_data, bank, 4)
        assert a == b


def run_cli(args, env=None):
    import os
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "canonseg.cli", *args],
        capture_output=True, text=True, env=full_env, timeout=600,
    )


class TestCli:
    def test_unknown_subcommand_exits_2(self):
        proc = run_cli(["frobnicate"])
        assert proc.returncode == 2
        assert "usage" in (proc.stderr + proc.stdout).lower()

    def test_selfcheck_passes(self):
        proc = run_cli(["selfcheck"])
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert proc.stdout.count("ok ") >= 7

    def test_gen_data_and_prompts(self, tmp_path):
        proc = run_cli([
            "gen-data", "--out", str(tmp_path), "--n-train", "6", "--n-val", "2",
            "--n-test", "2", "--size", "32", "--seed", "1", "--transformed",
        ])
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "train" / "manifest.json").exists()
        assert (tmp_path / "test_transformed" / "manifest.json").exists()
        proc = run_cli([
            "gen-prompts", "--data", str(tmp_path / "train"), "--out",
            str(tmp_path / "prompts.jsonl"), "--seed", "2",
        ])
        assert proc.returncode == 0, proc.stderr
        prompts = P.read_prompts_jsonl(tmp_path / "prompts.jsonl")
        assert prompts and all(p.sample_id is not None for p in prompts)

    def test_missing_data_exits_1(self, tmp_path):
        proc = run_cli(["gen-prompts", "--data", str(tmp_path / "nope"), "--out", "x.jsonl"])
        assert proc.returncode == 1
        assert "error" in proc.stderr.lower()


class TestDeterminism:
    def test_two_tiny_runs_identical(self, tmp_path):
        """gen-data + train + eval twice with one seed; metric CSVs must match."""
        env = {"OPENBLAS_NUM_THREADS": "1", "OMP_NUM_THREADS": "1"}
        csvs = []
        for tag in ("a", "b"):
            root = tmp_path / tag
            proc = run_cli([
                "gen-data", "--out", str(root), "--n-train", "12", "--n-val", "4",
                "--n-test", "4", "--size", "32", "--seed", "9",
            ], env=env)
            assert proc.returncode == 0, proc.stderr
            proc = run_cli([
                "train", "--data", str(root / "train"), "--out", str(root / "ckpt"),
                "--stage", "all", "--seed", "9", "--epochs", "1,1,1",
            ], env=env)
            assert proc.returncode == 0, proc.stderr
            proc = run_cli([
                "eval", "--ckpt", str(root / "ckpt"), "--data", str(root / "test"),
                "--out-csv", str(root / "metrics.csv"), "--seed", "9",
            ], env=env)
            assert proc.returncode == 0, proc.stderr
            csvs.append((root / "metrics.csv").read_bytes())
        assert csvs[0] == csvs[1]
