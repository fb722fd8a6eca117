import itertools
import math

import numpy as np
import pytest

from medimp.config import CohortConfig, FreezePolicy, ImageEncoderConfig, RunConfig, TextEncoderConfig, TrainConfig
from medimp.contrastive import (
    LOGIT_SCALE,
    AdamW,
    MedimpModel,
    PromptSampler,
    Trainer,
    adamw_step,
    clamp_logit_scale,
    contrastive_loss,
    cosine_similarity_matrix,
    info_nce_directional,
    initial_logit_scale,
    lr_at,
    retrieval_accuracy,
)
from medimp.exceptions import CheckpointError, ConfigError, EvaluationError
from medimp.imaging import Volume
from medimp.numerics import Parameter, grad_check
from medimp.promptgen import build_vocab, load_bank, load_rules, tokenize_batch
from medimp.schemas import ClinicalRecord, Exam, PairedSample
from medimp.synthcohort import gen_cohort

SMALL_IMAGE = ImageEncoderConfig(input_shape=(6, 6, 6), widths=(4, 8), blocks=(1, 1), embed_dim=4, pool_heads=2)
SMALL_TEXT = TextEncoderConfig(layers=2, width=8, heads=2, ff_width=16, max_len=12, embed_dim=4)


def _brute_force_loss(f_i, f_t, scale):
    b = len(f_i)
    sim = [[float(np.dot(f_i[r], f_t[c]) / (np.linalg.norm(f_i[r]) * np.linalg.norm(f_t[c]))) for c in range(b)] for r in range(b)]
    i2t = t2i = 0.0
    for r in range(b):
        i2t -= scale * sim[r][r] - math.log(sum(math.exp(scale * sim[r][c]) for c in range(b)))
        t2i -= scale * sim[r][r] - math.log(sum(math.exp(scale * sim[c][r]) for c in range(b)))
    return (i2t + t2i) / 2


class TestCosine:
    def test_orthonormal_rows(self):
        eye = np.eye(3)
        np.testing.assert_allclose(cosine_similarity_matrix(eye, eye).data, eye, atol=1e-12)

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(0)
        v, w = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
        np.testing.assert_allclose(cosine_similarity_matrix(2 * v, w).data, cosine_similarity_matrix(v, w).data)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        sim = cosine_similarity_matrix(a, b).data
        for r, c in itertools.product(range(3), range(3)):
            expected = a[r] @ b[c] / (np.linalg.norm(a[r]) * np.linalg.norm(b[c]))
            assert abs(sim[r, c] - expected) < 1e-10
        assert np.all(np.abs(sim) <= 1.0)


class TestInfoNce:
    def test_single_pair_is_zero(self):
        assert info_nce_directional(np.array([[0.3]]), 0.07).item() == 0.0

    def test_identical_embeddings(self):
        f = np.ones((4, 3))
        sim = cosine_similarity_matrix(f, f)
        assert abs(info_nce_directional(sim, 0.07).item() - 4 * math.log(4)) < 1e-6
        assert abs(contrastive_loss(f, f, initial_logit_scale(0.07)).item() - 4 * math.log(4)) < 1e-6

    def test_two_orthonormal_pairs(self):
        sim = cosine_similarity_matrix(np.eye(2), np.eye(2))
        expected = 2 * math.log(1 + math.exp(-1))
        assert abs(info_nce_directional(sim, 1.0, "i2t").item() - expected) < 1e-5
        assert abs(info_nce_directional(sim, 1.0, "t2i").item() - expected) < 1e-5

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            info_nce_directional(np.eye(2), 1.0, "both")


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        rng = np.random.default_rng(2)
        assert contrastive_loss(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), 2.0).item() == 0.0

    @pytest.mark.parametrize("seed", range(50))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        b = 1 + seed % 4
        f_i, f_t = rng.normal(size=(b, 5)), rng.normal(size=(b, 5))
        s = rng.uniform(0.0, 3.0)
        assert abs(contrastive_loss(f_i, f_t, s).item() - _brute_force_loss(f_i, f_t, math.exp(s))) < 1e-8

    def test_symmetric_inputs(self):
        f = np.random.default_rng(3).normal(size=(4, 6))
        sim = cosine_similarity_matrix(f, f)
        tau = 1.0 / math.exp(2.0)
        i2t = info_nce_directional(sim, tau, "i2t").item()
        assert i2t == pytest.approx(info_nce_directional(sim, tau, "t2i").item(), abs=1e-12)
        assert contrastive_loss(f, f, 2.0).item() == pytest.approx(i2t, abs=1e-12)

    def test_rescaling_one_embedding(self):
        rng = np.random.default_rng(4)
        f_i, f_t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        scaled = f_i.copy()
        scaled[2] *= 7.5
        assert contrastive_loss(scaled, f_t, 1.5).item() == pytest.approx(contrastive_loss(f_i, f_t, 1.5).item(), abs=1e-12)

    def test_permuting_pairs(self):
        rng = np.random.default_rng(5)
        f_i, f_t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        perm = np.array([2, 0, 3, 1])
        assert contrastive_loss(f_i[perm], f_t[perm], 1.0).item() == pytest.approx(
            contrastive_loss(f_i, f_t, 1.0).item(), abs=1e-12
        )

    def test_non_negative(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            assert contrastive_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.uniform(0, 4)).item() >= 0.0

    def test_sharper_scale_helps_dominant_diagonal(self):
        f_i = np.eye(4) + 0.1
        f_t = np.eye(4) + 0.05
        losses = [contrastive_loss(f_i, f_t, s).item() for s in np.linspace(0.0, math.log(100), 12)]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_scale_is_clipped_inside_the_loss(self):
        rng = np.random.default_rng(7)
        f_i, f_t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert contrastive_loss(f_i, f_t, 9.0).item() == pytest.approx(contrastive_loss(f_i, f_t, math.log(100)).item())

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        b = 2 + seed % 3
        f_i = Parameter("f_i", rng.normal(size=(b, 4)))
        f_t = Parameter("f_t", rng.normal(size=(b, 4)))
        s = Parameter("s", np.array(rng.uniform(0.5, 3.0)))
        err = grad_check(lambda: contrastive_loss(f_i, f_t, s), [f_i, f_t, s], h=1e-4)
        assert err < 1e-4


class TestLogitScale:
    def test_initial_value(self):
        s = initial_logit_scale(0.07)
        assert s == pytest.approx(2.6593, abs=1e-4)
        assert math.exp(s) == pytest.approx(1 / 0.07, abs=1e-6)

    def test_clamp_active(self):
        assert math.exp(clamp_logit_scale(math.log(150))) == pytest.approx(100.0)

    def test_clamp_inactive(self):
        assert clamp_logit_scale(math.log(50)) == math.log(50)


class TestSchedule:
    @pytest.mark.parametrize(
        "config",
        [TrainConfig(epochs=200, warmup_epochs=40, base_lr=5e-5), TrainConfig()],
        ids=["long", "default"],
    )
    def test_anchor_points(self, config):
        w, total, base = config.warmup_epochs, config.epochs, config.base_lr
        assert lr_at(0, config) == 0.0
        assert lr_at(w, config) == base
        assert lr_at(total, config) == pytest.approx(0.0, abs=1e-20)
        assert lr_at((w + total) / 2, config) == pytest.approx(base / 2, rel=1e-12)

    def test_long_schedule_values(self):
        config = TrainConfig(epochs=200, warmup_epochs=40, base_lr=5e-5)
        assert lr_at(40, config) == 5e-5
        assert lr_at(120, config) == pytest.approx(2.5e-5, rel=1e-12)
        assert lr_at(20, config) == pytest.approx(2.5e-5, rel=1e-12)

    def test_no_warmup(self):
        config = TrainConfig(epochs=10, warmup_epochs=0, base_lr=1.0)
        assert lr_at(0, config) == 1.0


class TestAdamW:
    def test_zero_gradient_decays_only(self):
        p = Parameter("w", np.array([[1.0, -2.0], [3.0, 0.5]]))
        before = p.data.copy()
        adamw_step([p], {"w": np.zeros((2, 2))}, {}, lr=0.1, wd=0.02, beta1=0.9, beta2=0.999, t=1)
        np.testing.assert_allclose(p.data, 0.998 * before, rtol=1e-12)

    def test_first_step_moves_by_lr(self):
        p = Parameter("w", np.array(1.0))
        adamw_step([p], {"w": np.array(3.7)}, {}, lr=0.01, wd=0.0, beta1=0.9, beta2=0.999, t=1)
        assert p.data == pytest.approx(1.0 - 0.01, abs=1e-9)

    def test_scalar_reference_trajectory(self):
        a, lr, wd, b1, b2, eps = 2.0, 0.05, 0.1, 0.9, 0.999, 1e-8
        p = Parameter("w", np.array([0.8]))
        moments = {}
        ref, m, v = 0.8, 0.0, 0.0
        for t in range(1, 6):
            adamw_step([p], {"w": a * p.data}, moments, lr, wd, b1, b2, t, eps)
            g = a * ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat, v_hat = m / (1 - b1**t), v / (1 - b2**t)
            ref = ref * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
            assert abs(p.data[0] - ref) < 1e-10

    def test_frozen_untouched(self):
        p = Parameter("w", np.ones((2, 2)), trainable=False)
        adamw_step([p], {"w": np.ones((2, 2))}, {}, lr=0.1, wd=0.5, beta1=0.9, beta2=0.999, t=1)
        np.testing.assert_array_equal(p.data, np.ones((2, 2)))

    def test_step_count_starts_at_one(self):
        with pytest.raises(ValueError):
            adamw_step([], {}, {}, lr=0.1, wd=0.0, beta1=0.9, beta2=0.999, t=0)

    def test_no_decay_for_vectors_and_named(self):
        config = TrainConfig(weight_decay=0.5)
        matrix = Parameter("w", np.ones((2, 2)))
        vector = Parameter("b", np.ones(2))
        scale = Parameter(LOGIT_SCALE, np.ones((1, 1)))
        optimizer = AdamW([matrix, vector, scale], config, no_decay=[LOGIT_SCALE])
        assert optimizer.should_decay(matrix)
        assert not optimizer.should_decay(vector)
        assert not optimizer.should_decay(scale)
        zeros = {p.name: np.zeros(p.shape) for p in optimizer.params}
        optimizer.step(zeros, lr=0.1)
        np.testing.assert_allclose(matrix.data, 0.95)
        np.testing.assert_array_equal(vector.data, 1.0)
        np.testing.assert_array_equal(scale.data, 1.0)


def _records(n):
    exams = list(Exam)
    return [
        ClinicalRecord(
            subject_id=f"S{i:03d}",
            exam=exams[i % 4],
            gfr_value=10.0 + 7.0 * i,
            creat_prev=None if i % 4 == 0 else 100.0 + 5.0 * i,
            creat_curr=110.0 + 3.0 * (i % 5),
            donor_age_value=20.0 + 5.0 * i,
        )
        for i in range(n)
    ]


def _samples(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        PairedSample(Volume(voxels=rng.normal(size=(6, 6, 6)) + 0.2 * i), record) for i, record in enumerate(_records(n))
    ]


def _run_config(**train):
    defaults = dict(batch_size=4, epochs=3, warmup_epochs=1, base_lr=1e-2)
    defaults.update(train)
    return RunConfig.model_validate(
        {
            "seed": 11,
            "cohort": {"volume_shape": [6, 6, 6]},
            "prompts": {"max_len": 12},
            "image_encoder": SMALL_IMAGE.model_dump(),
            "text_encoder": SMALL_TEXT.model_dump(),
            "train": defaults,
        }
    )


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["the gfr is low", "the gfr is high", "at one month follow-up exam"])


class TestModel:
    def test_initial_temperature(self, vocab):
        model = MedimpModel(SMALL_IMAGE, SMALL_TEXT, vocab)
        assert math.exp(float(model.logit_scale.data)) == pytest.approx(1 / 0.07, abs=1e-6)
        assert model.temperature == pytest.approx(0.07)

    def test_checkpoint_round_trip(self, vocab):
        model = MedimpModel(SMALL_IMAGE, SMALL_TEXT, vocab, seed=3)
        model.logit_scale.data = np.array(3.1)
        clone = MedimpModel.from_checkpoint(model.to_checkpoint())
        assert clone.vocab == vocab
        assert float(clone.logit_scale.data) == 3.1
        voxels = np.random.default_rng(0).uniform(size=(2, 6, 6, 6))
        tokens = tokenize_batch(["the gfr is low", "the gfr is high"], vocab, SMALL_TEXT.max_len)
        np.testing.assert_array_equal(clone.embed_images(voxels), model.embed_images(voxels))
        np.testing.assert_array_equal(clone.embed_texts(tokens), model.embed_texts(tokens))

    def test_checkpoint_missing_metadata(self, vocab):
        checkpoint = MedimpModel(SMALL_IMAGE, SMALL_TEXT, vocab).to_checkpoint()
        del checkpoint.metadata["vocab"]
        with pytest.raises(CheckpointError):
            MedimpModel.from_checkpoint(checkpoint)

    def test_checkpoint_wrong_tensor(self, vocab):
        checkpoint = MedimpModel(SMALL_IMAGE, SMALL_TEXT, vocab).to_checkpoint()
        checkpoint.tensors["image.stem.weight"] = np.zeros(3)
        with pytest.raises(CheckpointError):
            MedimpModel.from_checkpoint(checkpoint)


class TestRetrieval:
    def test_perfect_alignment(self):
        emb = np.eye(8)
        assert retrieval_accuracy(emb, emb, batch_size=4) == 1.0

    def test_duplicate_texts_share_credit(self):
        eye = np.eye(4)
        texts = np.stack([eye[0], eye[0], eye[2], eye[3]])
        images = np.stack([eye[2] + 0.1 * eye[3], eye[0], eye[2], eye[3]])
        # row 0 misses, row 1 ties between texts 0 and 1, rows 2 and 3 hit
        for seed in range(3):
            assert retrieval_accuracy(images, texts, batch_size=4, seed=seed) == pytest.approx(2.5 / 4)

    def test_needs_a_full_batch(self):
        with pytest.raises(EvaluationError):
            retrieval_accuracy(np.eye(3), np.eye(3), batch_size=4)


class TestPromptSampler:
    def test_manual_mode_is_constant(self):
        config = _run_config().prompts
        sampler = PromptSampler(config, "manual", load_bank(), load_rules(), seed=0)
        record = _records(1)[0]
        assert {sampler.text_for(record, e) for e in range(5)} == {sampler.text_for(record, 0)}

    def test_pre_expanded_pool_cycles(self):
        config = _run_config().prompts.model_copy(update={"resample_per_epoch": False, "n_augmentations": 3})
        sampler = PromptSampler(config, "augmented", load_bank(), load_rules(), seed=0)
        record = _records(2)[1]
        assert sampler.text_for(record, 0) == sampler.text_for(record, 3)
        assert sampler.text_for(record, 1) == sampler.text_for(record, 4)


class TestFit:
    def test_deterministic(self):
        a = Trainer(_run_config()).fit(_samples(8))
        b = Trainer(_run_config()).fit(_samples(8))
        assert a.logit_scale == b.logit_scale
        assert a.tensors.keys() == b.tensors.keys()
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_logit_scale_stays_clipped(self):
        trainer = Trainer(_run_config(init_temperature=0.005, epochs=5, base_lr=0.1))
        checkpoint = trainer.fit(_samples(8))
        assert math.exp(checkpoint.logit_scale) <= 100.0 + 1e-9
        assert all(row["exp_logit_scale"] <= 100.0 + 1e-9 for row in trainer.history)

    def test_batch_larger_than_dataset(self):
        with pytest.raises(ConfigError):
            Trainer(_run_config(batch_size=16)).fit(_samples(8))

    def test_loss_decreases_on_planted_cohort(self):
        cohort_config = CohortConfig(n_subjects=10, split_fractions=(0.8, 0.0, 0.2), volume_shape=(6, 6, 6), spacing=(1.0, 1.0, 1.0))
        train = gen_cohort(rng_seed=4, config=cohort_config).samples("train")
        trainer = Trainer(_run_config(epochs=8, prompt_mode="manual"))
        trainer.fit(train)
        losses = [row["loss_per_pair"] for row in trainer.history if row["split"] == "train"]
        assert len(losses) == 8
        assert losses[-1] < losses[0]

    @pytest.mark.parametrize("policy", [FreezePolicy(mode="first_k", k=1), FreezePolicy(mode="ln_only")], ids=["first_k", "ln_only"])
    def test_frozen_parameters_unchanged(self, policy):
        trainer = Trainer(_run_config(freeze=policy.model_dump()))
        checkpoint = trainer.fit(_samples(8))
        model = trainer.model
        fresh = trainer.build_model(_samples(8))
        frozen = [p for p in model.text.parameters() if not p.trainable]
        trainable = [p for p in model.text.parameters() if p.trainable]
        assert frozen and trainable
        for p in frozen:
            np.testing.assert_array_equal(p.data, fresh.store[p.name].data)
            np.testing.assert_array_equal(checkpoint.tensors[p.name], fresh.store[p.name].data)
        assert any(not np.array_equal(p.data, fresh.store[p.name].data) for p in trainable)

    def test_ln_only_trains_block_norms_and_projection(self):
        trainer = Trainer(_run_config(freeze=FreezePolicy(mode="ln_only").model_dump()))
        trainer.fit(_samples(8))
        trainable = {p.name for p in trainer.model.text.parameters() if p.trainable}
        assert trainable and all(".ln" in n or ".projection." in n for n in trainable)
        assert not any(n.startswith("text.embeddings.ln") for n in trainable)

    def test_metrics_csv(self, tmp_path):
        path = tmp_path / "metrics.csv"
        samples = _samples(12)
        Trainer(_run_config()).fit(samples[:8], val=samples[8:], metrics_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,split,loss_sum,loss_per_pair,exp_logit_scale,lr"
        assert len(lines) == 1 + 2 * 3
