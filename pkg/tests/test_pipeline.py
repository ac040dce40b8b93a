import json
import math
import os

import numpy as np
import pytest

from mimcspt.checkpoint import load_checkpoint, save_checkpoint
from mimcspt.data import LABEL_READS, load_corpus
from mimcspt.model import VitConfig, init_params, vit_nano
from mimcspt.pipeline import (
    HeadSpec,
    StageConfig,
    build_finetune_model,
    classifier_forward,
    evaluate_top1,
    materialize_init_checkpoint,
    mixup_batch,
    params_hash,
    run_stage,
    segmenter_forward,
    supervised_loss,
)
from mimcspt.pretext import mim_forward_loss, sample_mask
from mimcspt.synth import DomainSpec, gen_synthetic_domain
from mimcspt.tensor import Rng, ShapeError, Tensor


@pytest.fixture(scope="module")
def nano():
    return vit_nano()


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe_corpora")
    canon = DomainSpec(kind="canonical", classes=4, image_size=32)
    over = DomainSpec(kind="overhead", classes=4, image_size=32)
    return {
        "pretrain": gen_synthetic_domain(canon, 32, seed=1, out_dir=root / "pre",
                                         corpus_id="pre", labeled=False),
        "train": gen_synthetic_domain(over, 16, seed=2, out_dir=root / "tr",
                                      corpus_id="tr", split="train"),
        "test": gen_synthetic_domain(over, 16, seed=3, out_dir=root / "te",
                                     corpus_id="te", split="test"),
    }


def tiny_stage(role, corpora, tmp_path, **kw):
    defaults = dict(epochs=2, batch_size=8, warmup_epochs=0, seed=11)
    defaults.update(kw)
    return StageConfig(role=role, corpus=[corpora["pretrain"]], **defaults)


class TestSupervisedLoss:
    def test_perfect_prediction_near_zero(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
        assert float(supervised_loss(logits, np.array([0]), 0.0).data) < 1e-6

    def test_uniform_logits_give_ln_k(self):
        for k, s in ((10, 0.1), (10, 0.0), (4, 0.3)):
            logits = Tensor(np.zeros((3, k)))
            loss = supervised_loss(logits, np.array([0, 1, k - 1]), s)
            assert float(loss.data) == pytest.approx(math.log(k), rel=1e-6)

    def test_mixup_two_point_oracle(self):
        # soft target (0.5, 0.5) on two equal logits, others effectively -inf
        logits = Tensor(np.array([[3.0, 3.0, -100.0, -100.0]]))
        soft = np.array([[0.5, 0.5, 0.0, 0.0]])
        loss = supervised_loss(logits, soft, 0.0)
        assert float(loss.data) == pytest.approx(math.log(2), rel=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            supervised_loss(Tensor(np.zeros((1, 3))), np.array([3]), 0.0)

    def test_smoothing_range_check(self):
        with pytest.raises(ValueError):
            supervised_loss(Tensor(np.zeros((1, 3))), np.array([0]), 1.0)


class TestMixup:
    def test_lambda_one_identity(self):
        imgs = Rng(1).uniform(size=(4, 8, 8, 3)).astype(np.float32)
        labels = np.array([0, 1, 2, 3])

        class Forced(Rng):
            def beta(self, a, b):
                return 1.0

        mixed, soft = mixup_batch(imgs, labels, 0.8, Forced(2), num_classes=4)
        np.testing.assert_allclose(mixed, imgs, atol=1e-7)
        np.testing.assert_array_equal(soft, np.eye(4)[labels])

    def test_half_lambda_soft_labels(self):
        class Forced(Rng):
            def beta(self, a, b):
                return 0.5

            def permutation(self, n):
                return np.array([1, 0])

        imgs = np.stack([np.zeros((4, 4, 3)), np.ones((4, 4, 3))]).astype(np.float32)
        mixed, soft = mixup_batch(imgs, np.array([0, 1]), 0.8, Forced(3), num_classes=2)
        np.testing.assert_allclose(mixed, np.full((2, 4, 4, 3), 0.5))
        np.testing.assert_allclose(soft, [[0.5, 0.5], [0.5, 0.5]])

    def test_beta_mean_monte_carlo(self):
        rng = Rng(4)
        draws = [rng.beta(0.8, 0.8) for _ in range(10_000)]
        assert 0.48 <= float(np.mean(draws)) <= 0.52

    def test_batch_of_one_warns_and_passes_through(self):
        imgs = np.zeros((1, 4, 4, 3), dtype=np.float32)
        with pytest.warns(UserWarning):
            mixed, soft = mixup_batch(imgs, np.array([1]), 0.8, Rng(5), num_classes=3)
        np.testing.assert_array_equal(mixed, imgs)
        np.testing.assert_array_equal(soft, [[0.0, 1.0, 0.0]])


class TestFinetuneModel:
    def test_decoder_dropped_and_head_added(self, nano, tmp_path):
        path = materialize_init_checkpoint(nano, 7, tmp_path / "init.ckpt")
        ck = load_checkpoint(path)
        params = build_finetune_model(ck, HeadSpec("classification", 4), nano)
        assert not any(k.startswith("decoder.") for k in params)
        assert "head.weight" in params and "head.bias" in params

    def test_untrained_head_uniform_logits_ln_k(self, nano, tmp_path):
        path = materialize_init_checkpoint(nano, 8, tmp_path / "init.ckpt")
        params = build_finetune_model(load_checkpoint(path),
                                      HeadSpec("classification", 5), nano)
        img = Rng(9).uniform(size=(2, 32, 32, 3)).astype(np.float32)
        logits = classifier_forward(img, params, nano)
        assert logits.shape == (2, 5)
        np.testing.assert_array_equal(logits.data, np.zeros((2, 5), dtype=np.float32))
        loss = supervised_loss(logits, np.array([0, 3]), 0.0)
        assert float(loss.data) == pytest.approx(math.log(5), rel=1e-6)

    def test_segmentation_head_shape(self, nano, tmp_path):
        path = materialize_init_checkpoint(nano, 10, tmp_path / "init.ckpt")
        params = build_finetune_model(load_checkpoint(path),
                                      HeadSpec("segmentation", 3), nano)
        img = Rng(11).uniform(size=(2, 32, 32, 3)).astype(np.float32)
        logits = segmenter_forward(img, params, nano)
        assert logits.shape == (2, 4, 4, 3)

    def test_shape_mismatch_lists_tensors(self, nano, tmp_path):
        path = materialize_init_checkpoint(nano, 12, tmp_path / "init.ckpt")
        ck = load_checkpoint(path)
        ck.tensors["encoder.patch_embed.weight"] = np.zeros((10, 10), dtype=np.float32)
        with pytest.raises(ShapeError, match="encoder.patch_embed.weight"):
            build_finetune_model(ck, HeadSpec("classification", 4), nano)

    def test_missing_encoder_rejected(self, nano, tmp_path):
        p = tmp_path / "noenc.ckpt"
        save_checkpoint(p, {"decoder.mask_token": np.zeros(32, dtype=np.float32)},
                        {"provenance": []})
        with pytest.raises(ValueError):
            build_finetune_model(load_checkpoint(p), HeadSpec("classification", 4), nano)


class TestRunStage:
    def test_pretrain_smoke_convergence(self, nano, corpora, tmp_path):
        stage = StageConfig(role="pretrain", corpus=[corpora["pretrain"]], epochs=7,
                            batch_size=8, warmup_epochs=0, base_lr=1e-3, seed=5,
                            augment=False, stage_id="p")
        ckpt = run_stage(stage, nano, tmp_path / "run")
        epochs = [json.loads(l) for l in open(tmp_path / "run" / "epochs.jsonl")]
        assert epochs[-1]["mean_loss"] < epochs[0]["mean_loss"]
        ck = load_checkpoint(ckpt)
        assert ck.provenance == ["p"]
        assert ck.has_prefix("encoder.") and ck.has_prefix("decoder.")
        assert ck.has_prefix("optim.m.")

    def test_pretrain_never_reads_labels(self, nano, corpora, tmp_path):
        before = LABEL_READS.count
        stage = StageConfig(role="pretrain", corpus=[corpora["train"]], epochs=1,
                            batch_size=8, warmup_epochs=0, seed=6, stage_id="p2")
        run_stage(stage, nano, tmp_path / "run2")
        assert LABEL_READS.count == before

    def test_determinism_bit_identical_checkpoints(self, nano, corpora, tmp_path):
        cfg = dict(role="pretrain", corpus=[corpora["pretrain"]], epochs=2,
                   batch_size=8, warmup_epochs=1, seed=7, stage_id="d")
        p1 = run_stage(StageConfig(**cfg), nano, tmp_path / "r1")
        p2 = run_stage(StageConfig(**cfg), nano, tmp_path / "r2")
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_continue_warm_start_and_lineage(self, nano, corpora, tmp_path):
        s1 = StageConfig(role="pretrain", corpus=[corpora["pretrain"]], epochs=2,
                         batch_size=8, warmup_epochs=0, seed=8, stage_id="stage1")
        ck1_path = run_stage(s1, nano, tmp_path / "s1")
        ck1 = load_checkpoint(ck1_path)

        s2 = StageConfig(role="continue", corpus=[corpora["train"]], epochs=1,
                         batch_size=8, warmup_epochs=0, seed=9,
                         init_checkpoint=ck1_path, stage_id="stage2")
        ck2_path = run_stage(s2, nano, tmp_path / "s2")
        ck2 = load_checkpoint(ck2_path)

        assert ck2.provenance == ["stage1", "stage2"]
        model_only = {k: v for k, v in ck1.tensors.items()
                      if k.startswith(("encoder.", "decoder."))}
        assert ck2.meta["init_params_hash"] == params_hash(model_only)

        # warm start exactness: stage-2 params at step 0 reproduce stage-1 loss
        probe = Rng(10).uniform(size=(4, 32, 32, 3)).astype(np.float32)
        plans = [sample_mask(nano.num_tokens, 0.75, Rng(11)) for _ in range(4)]
        l1, _ = mim_forward_loss(probe, ck1.model_params(), nano, plans)
        l2, _ = mim_forward_loss(probe, load_checkpoint(ck1_path).model_params(),
                                 nano, plans)
        assert abs(float(l1.data) - float(l2.data)) < 1e-6

    def test_continue_requires_decoder(self, nano, corpora, tmp_path):
        init = materialize_init_checkpoint(nano, 13, tmp_path / "i.ckpt")
        ck = load_checkpoint(init)
        enc_only = {k: v for k, v in ck.tensors.items() if k.startswith("encoder.")}
        p = tmp_path / "enc_only.ckpt"
        save_checkpoint(p, enc_only, ck.meta)
        stage = StageConfig(role="continue", corpus=[corpora["pretrain"]], epochs=1,
                            init_checkpoint=str(p), stage_id="x")
        with pytest.raises(ValueError):
            run_stage(stage, nano, tmp_path / "xx")

    def test_finetune_trains_and_evaluates(self, nano, corpora, tmp_path):
        init = materialize_init_checkpoint(nano, 14, tmp_path / "init.ckpt")
        stage = StageConfig(role="finetune", corpus=[corpora["train"]], epochs=3,
                            batch_size=8, warmup_epochs=0, seed=15,
                            init_checkpoint=init, head=HeadSpec("classification", 4),
                            eval_corpus=corpora["test"], stage_id="ft")
        ckpt = run_stage(stage, nano, tmp_path / "ft")
        epochs = [json.loads(l) for l in open(tmp_path / "ft" / "epochs.jsonl")]
        assert all("metric" in e for e in epochs)
        assert 0.0 <= epochs[-1]["metric"] <= 1.0
        ck = load_checkpoint(ckpt)
        assert ck.has_prefix("head.")
        assert not ck.has_prefix("decoder.")

    def test_metrics_schema(self, nano, corpora, tmp_path):
        stage = StageConfig(role="pretrain", corpus=[corpora["pretrain"]], epochs=1,
                            batch_size=16, warmup_epochs=0, seed=16, stage_id="m")
        run_stage(stage, nano, tmp_path / "m")
        lines = [json.loads(l) for l in open(tmp_path / "m" / "metrics.jsonl")]
        assert len(lines) == 2  # 32 images / 16
        for rec in lines:
            assert set(rec) == {"step", "epoch", "stage", "lr", "loss", "wall_ms"}

    def test_empty_corpus_errors(self, nano, tmp_path):
        man = tmp_path / "empty.jsonl"
        man.write_text('{"header": {"corpus_id": "e", "split": "train", "image_size": 32}}\n')
        stage = StageConfig(role="pretrain", corpus=[str(man)], epochs=1, stage_id="e")
        with pytest.raises(ValueError):
            run_stage(stage, nano, tmp_path / "e")


class TestEvaluateTop1:
    def test_scores_in_unit_interval(self, nano, corpora, tmp_path):
        init = materialize_init_checkpoint(nano, 17, tmp_path / "i.ckpt")
        params = build_finetune_model(load_checkpoint(init),
                                      HeadSpec("classification", 4), nano)
        top1 = evaluate_top1(params, nano, load_corpus(corpora["test"]))
        assert 0.0 <= top1 <= 1.0
