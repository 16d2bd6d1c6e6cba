"""End-to-end oracles; minutes of CPU, run with `pytest -m slow`."""
import itertools
import json
import warnings

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.stats import norm

from evaluation.metrics import auc, is_localized, sens_spec
from evaluation.report import build_report
from evaluation.stats import bootstrap_ci, delong_test, permutation_test
from main import cli
from models.maskformer import cimt_forward, permute_clusters
from models.params import ModelDims, ModelParams
from phantoms.dataset import load_dataset, make_splits, save_dataset
from phantoms.phantom import DifficultyConfig, generate_sample, phantom_geometry
from tensor.core import Tensor, no_grad
from training.s4c import s4c_select_threshold
from training.trainer import train
from utils.checkpoint import load_checkpoint
from utils.config import RunConfig, config_hash

pytestmark = pytest.mark.slow


def _pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _tumor_minus_wall(seed, cfg, extents):
    sample = generate_sample(seed, cfg, extents, positive=True)
    geometry, _ = phantom_geometry(seed, cfg, extents, positive=True)
    assert geometry.tumor.any()
    image = sample.image[0]
    return float(image[geometry.tumor].mean() - image[geometry.wall & ~geometry.tumor].mean())


class TestStatisticsOracles:
    def test_auc_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            # coarse scores so ties are common
            scores = rng.integers(0, 6, size=n) / 5.0
            assert auc(scores, labels) == pytest.approx(_pair_count_auc(scores, labels), abs=1e-12)

    def test_delong_of_identical_models(self):
        rng = np.random.default_rng(1)
        labels = np.array([0] * 30 + [1] * 30)
        scores = rng.normal(size=60) + labels
        assert delong_test(scores, scores, labels).p == 1.0

    def test_permutation_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(2)
        labels = np.ones(10, dtype=int)
        for _ in range(5):
            preds_a = (rng.uniform(size=10) < 0.8).astype(int)
            preds_b = (rng.uniform(size=10) < 0.4).astype(int)
            diffs = preds_a - preds_b
            observed = abs(diffs.sum())
            exact = np.mean([abs(np.dot(s, diffs)) >= observed for s in itertools.product([-1, 1], repeat=10)])
            p = permutation_test(preds_a, preds_b, labels, "sens", replicas=20000, seed=int(rng.integers(1000)))
            assert abs(p - exact) < 0.01

    @pytest.mark.parametrize("stratified", [False, True])
    def test_bootstrap_auc_coverage(self, stratified):
        shift = 1.0
        true_auc = norm.cdf(shift / np.sqrt(2.0))
        labels = np.array([0] * 100 + [1] * 100)
        covered = 0
        for world in range(500):
            rng = np.random.default_rng(10_000 + world)
            scores = rng.normal(size=200) + shift * labels
            interval = bootstrap_ci(auc, (scores, labels), replicas=300, seed=world,
                                    strata=labels if stratified else None)
            covered += interval.low <= true_auc <= interval.high
        assert 0.93 <= covered / 500 <= 0.97


class TestPhantomOracles:
    def test_tumor_contrast_moment(self):
        cfg = DifficultyConfig.resolve("easy")
        diffs = [_tumor_minus_wall(seed, cfg, (24, 24, 24)) for seed in range(100)]
        expected = cfg.contrast_delta * cfg.wall_std
        assert np.mean(diffs) == pytest.approx(expected, rel=0.2)

    def test_separability_shrinks_with_contrast(self):
        means = []
        for delta in (3.0, 2.0, 1.0, 0.5, 0.0):
            cfg = DifficultyConfig.resolve({"preset": "hard", "contrast_delta": delta})
            means.append(np.mean([_tumor_minus_wall(seed, cfg, (24, 24, 24)) for seed in range(200)]))
        assert all(a >= b for a, b in zip(means, means[1:]))


class TestThresholdOracle:
    def test_youden_selection_matches_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            volumes = rng.integers(0, 60, size=n) + 15 * labels
            unique = sorted(set(volumes.tolist()))
            candidates = [(a + b) / 2.0 for a, b in zip(unique, unique[1:])] + [unique[-1] + 0.5]
            best, best_j = None, -1.0
            for t in candidates:
                j = sum(sens_spec(volumes, labels, t))
                if j > best_j:
                    best, best_j = t, j
            assert s4c_select_threshold(volumes, labels) == best


class TestLocalizationBoundary:
    def test_strict_threshold(self):
        assert not is_localized(0.01)
        assert is_localized(0.0100001)


class TestTrainedCheckpoint:
    def test_assignment_and_permutation_invariance(self, trained):
        ckpt = load_checkpoint(trained["cimt"] / "checkpoint")
        dims = ModelDims.from_config(RunConfig.from_dict(ckpt.config).model)
        params = ModelParams.from_arrays(ckpt.tensors, dtype=np.float64)
        sample = load_dataset(trained["data"]).samples("test")[0]
        x = Tensor(sample.image[:, 4:12, 4:12, 4:12].astype(np.float64), dtype=np.float64)
        perm = list(np.random.default_rng(4).permutation(dims.n_queries))
        with no_grad():
            base, _, assignment = cimt_forward(x, params, dims)
            permuted, _, _ = cimt_forward(x, permute_clusters(params, perm), dims)
        np.testing.assert_allclose(assignment.probs.data.sum(axis=0), 1.0, atol=1e-6)
        np.testing.assert_allclose(permuted.seg_logits.data, base.seg_logits.data, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(permuted.cls_logits.data, base.cls_logits.data, rtol=1e-5, atol=1e-8)


class TestDeterminism:
    def test_cli_pipeline_is_byte_identical(self, tmp_path, monkeypatch, tiny_config):
        monkeypatch.delenv("CIMT_SEED", raising=False)
        config = tmp_path / "run.json"
        config.write_text(json.dumps(tiny_config()))
        runner = CliRunner()
        for attempt in ("a", "b"):
            root = tmp_path / attempt
            steps = [
                ["gen", "--config", str(config), "--out", "data"],
                ["train", "--config", str(config), "--data", "data", "--out", "run", "--preset", "cimt"],
                ["eval", "--checkpoint", "run/checkpoint", "--data", "data", "--out", "report"],
            ]
            for step in steps:
                result = runner.invoke(cli, ["--workdir", str(root), "--seed", "5"] + step)
                assert result.exit_code == 0, result.output

        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), str(rel)


class TestEasyPhantoms:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_cimt_separates_easy_cases(self, tmp_path, seed):
        cfg = RunConfig.from_dict({"data": {"n_train": 200, "n_val": 50, "n_test": 100, "difficulty": "easy"}})
        index = make_splits(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.prevalence,
                            base_seed=seed, cfg=cfg.data.difficulty, extents=tuple(cfg.data.extents))
        dataset = load_dataset(save_dataset(index, tmp_path / "data", config_hash=config_hash(cfg)))
        train("cimt", dataset, cfg, tmp_path / "run", seed=seed)
        report = build_report(tmp_path / "run" / "checkpoint", dataset, "test")
        assert report["auc"]["point"] >= 0.95


class TestHardPhantoms:
    def test_preset_ordering(self, tmp_path):
        cfg = RunConfig.from_dict({"data": {"n_train": 200, "n_val": 50, "n_test": 100, "difficulty": "hard"}})
        aucs = {preset: [] for preset in ("cimt", "unet-joint", "unet-s4c")}
        for seed in range(5):
            index = make_splits(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.prevalence,
                                base_seed=seed, cfg=cfg.data.difficulty, extents=tuple(cfg.data.extents))
            dataset = load_dataset(save_dataset(index, tmp_path / f"data{seed}", config_hash=config_hash(cfg)))
            for preset in aucs:
                run = tmp_path / f"{preset}-{seed}"
                train(preset, dataset, cfg, run, seed=seed)
                aucs[preset].append(build_report(run / "checkpoint", dataset, "test")["auc"]["point"])
        mean = {preset: float(np.mean(values)) for preset, values in aucs.items()}
        assert mean["cimt"] >= mean["unet-joint"] >= mean["unet-s4c"], mean
        if mean["cimt"] - mean["unet-s4c"] < 0.02:
            warnings.warn(f"cimt leads unet-s4c by less than 0.02 AUC on hard phantoms: {mean}")
