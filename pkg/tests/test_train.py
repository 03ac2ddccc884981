"""Training loop tests: determinism, schedule, abort path, augmentation."""

import json

import numpy as np
import pytest

from rockit import simscene as ss
from rockit.losses import LossConfig
from rockit.model import ModelConfig
from rockit.train import (
    AugmentConfig,
    OptimizerConfig,
    TrainAbort,
    augment_pair,
    train,
)

TINY_MODEL = dict(enc_channels=[6, 8], feat_dim=8, c1_intra=6, c2_inter=2)
FAST_LOSS = dict(queries_per_object=6, negs_per_query=8, patch_N=8, patch_stride=8)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    cfg = ss.DatasetConfig(n_scenes=2, pairs_per_scene=3, n_objects=2, canvas=(64, 64), seed=21)
    out = tmp_path_factory.mktemp("train_ds")
    manifest = ss.generate_dataset(cfg, out)
    return ss.load_dataset(manifest)


class TestAugmentation:
    def test_invariants_preserved(self, tiny_dataset):
        pair = tiny_dataset.all_pairs()[0]
        for seed in range(10):
            rng = np.random.default_rng(seed)
            aug = augment_pair(pair, rng, AugmentConfig())
            rows, cols = np.nonzero(aug.covisibility)
            if len(rows) == 0:
                continue
            warped = ss.apply_homography(
                aug.homography12, np.stack([cols, rows], axis=1).astype(float)
            )
            xr = np.rint(warped[:, 0]).astype(int)
            yr = np.rint(warped[:, 1]).astype(int)
            assert np.array_equal(
                aug.frame1.label_map[rows, cols], aug.frame2.label_map[yr, xr]
            )
            assert aug.frame1.image.min() >= 0 and aug.frame1.image.max() <= 1

    def test_disabled_is_identity(self, tiny_dataset):
        pair = tiny_dataset.all_pairs()[0]
        aug = augment_pair(pair, np.random.default_rng(0), AugmentConfig(enabled=False))
        assert aug is pair

    def test_deterministic(self, tiny_dataset):
        pair = tiny_dataset.all_pairs()[0]
        a = augment_pair(pair, np.random.default_rng(4), AugmentConfig())
        b = augment_pair(pair, np.random.default_rng(4), AugmentConfig())
        assert np.array_equal(a.frame1.image, b.frame1.image)
        assert np.array_equal(a.homography12, b.homography12)

    def test_clean_renders_follow_frame1_rotation(self, tiny_dataset):
        # object pixels of I0 must stay aligned with frame1's object pixels
        pair = tiny_dataset.all_pairs()[0]
        aug = augment_pair(pair, np.random.default_rng(7), AugmentConfig())
        for oid, fr in aug.clean_renders.items():
            mask1 = aug.frame1.label_map == oid
            mask0 = fr.label_map == oid
            assert (mask1 & mask0).sum() >= 0.9 * mask1.sum()


class TestTrainLoop:
    def test_lr_zero_leaves_params_unchanged(self, tiny_dataset):
        res = train(
            tiny_dataset,
            ModelConfig(**TINY_MODEL),
            LossConfig(**FAST_LOSS),
            OptimizerConfig(lr=0.0, epochs=1),
            AugmentConfig(enabled=False),
            seed=5,
            max_steps=2,
        )
        from rockit.model import init_params

        fresh = init_params(ModelConfig(**TINY_MODEL), seed=[5, 0])
        for name, p in res.net.params.items():
            assert np.array_equal(p.value, fresh[name].value), name

    def test_loss_decreases(self, tiny_dataset):
        res = train(
            tiny_dataset,
            ModelConfig(**TINY_MODEL),
            LossConfig(**FAST_LOSS),
            OptimizerConfig(lr=1e-3, epochs=10),
            seed=6,
            max_steps=50,
        )
        losses = [m["loss_total"] for m in res.metrics]
        assert np.mean(losses[:10]) > np.mean(losses[-10:])

    def test_deterministic_checkpoints(self, tiny_dataset, tmp_path):
        kw = dict(
            model_config=ModelConfig(**TINY_MODEL),
            loss_config=LossConfig(**FAST_LOSS),
            optimizer_config=OptimizerConfig(lr=1e-3, epochs=1),
            seed=7,
            max_steps=4,
        )
        r1 = train(tiny_dataset, out_dir=tmp_path / "a", **kw)
        r2 = train(tiny_dataset, out_dir=tmp_path / "b", **kw)
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
        assert r1.metrics_path.read_text() == r2.metrics_path.read_text()

    def test_resume_bit_identical(self, tiny_dataset, tmp_path):
        kw = dict(
            model_config=ModelConfig(**TINY_MODEL),
            loss_config=LossConfig(**FAST_LOSS),
            optimizer_config=OptimizerConfig(lr=1e-3, epochs=2),
            seed=8,
        )
        full = train(tiny_dataset, out_dir=tmp_path / "full", max_steps=6, **kw)
        part = train(tiny_dataset, out_dir=tmp_path / "part", max_steps=3, **kw)
        resumed = train(
            tiny_dataset, out_dir=tmp_path / "part", max_steps=6,
            resume=part.checkpoint_path, **kw,
        )
        assert full.checkpoint_path.read_bytes() == resumed.checkpoint_path.read_bytes()
        assert full.metrics_path.read_text() == resumed.metrics_path.read_text()

    def test_metrics_schema(self, tiny_dataset, tmp_path):
        res = train(
            tiny_dataset,
            ModelConfig(**TINY_MODEL),
            LossConfig(**FAST_LOSS),
            OptimizerConfig(lr=1e-3, epochs=1),
            seed=9,
            out_dir=tmp_path,
            max_steps=3,
        )
        lines = res.metrics_path.read_text().strip().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[0])
        for key in ("step", "lr", "loss_total", "loss_r", "loss_ds", "loss_dc", "grad_norm"):
            assert key in rec

    def test_lr_schedule_drop(self, tiny_dataset):
        res = train(
            tiny_dataset,
            ModelConfig(**TINY_MODEL),
            LossConfig(**FAST_LOSS),
            OptimizerConfig(lr=1e-3, epochs=2, lr_drop_frac=0.5, lr_drop_factor=0.1),
            AugmentConfig(enabled=False),
            seed=10,
            max_steps=8,
        )
        lrs = [m["lr"] for m in res.metrics]
        assert lrs[0] == pytest.approx(1e-3)
        assert lrs[-1] == pytest.approx(1e-4)

    def test_nan_aborts_with_dump(self, tiny_dataset, tmp_path):
        with pytest.raises(TrainAbort):
            train(
                tiny_dataset,
                ModelConfig(**TINY_MODEL),
                LossConfig(**FAST_LOSS),
                OptimizerConfig(lr=1e22, epochs=1),
                seed=11,
                out_dir=tmp_path,
                max_steps=10,
            )
        assert list(tmp_path.glob("nan_dump_step*.rocktnsr"))
