import json
import math
import struct
import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest

from medimp.cli.checkpoint import decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint
from medimp.cli.export import LABEL_COLUMNS, embedding_matrix, export_embeddings, read_embeddings, write_embeddings
from medimp.cli.gradsuite import CASES, results_table, run_grad_suite
from medimp.cli.plotting import count_markers, render_scatter_svg
from medimp.cli.tsne import conditional_probabilities, joint_probabilities, tsne_2d
from medimp.config import CohortConfig, ImageEncoderConfig, TextEncoderConfig
from medimp.contrastive import MedimpModel
from medimp.exceptions import CheckpointError, ConfigError
from medimp.main import build_parser, main
from medimp.promptgen import build_vocab
from medimp.schemas import CHECKPOINT_MAGIC, Checkpoint
from medimp.synthcohort import gen_cohort

SMALL_IMAGE = ImageEncoderConfig(input_shape=(6, 6, 6), widths=(4, 8), blocks=(1, 1), embed_dim=4, pool_heads=2)
SMALL_TEXT = TextEncoderConfig(layers=2, width=8, heads=2, ff_width=16, max_len=24, embed_dim=4)


def _checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    tensors = {
        "image.stem.w": rng.normal(size=(4, 1, 3, 3, 3)).astype(np.float32).astype(np.float64),
        "text.token": rng.normal(size=(10, 8)).astype(np.float32).astype(np.float64),
        "bias": rng.normal(size=3).astype(np.float32).astype(np.float64),
    }
    return Checkpoint(logit_scale=math.log(1 / 0.07), tensors=tensors, metadata={"vocab": ["a", "b"]})


class TestCheckpointFile:
    def test_round_trip_is_bit_exact(self, tmp_path):
        ckpt = _checkpoint()
        path = write_checkpoint(tmp_path / "model.ckpt", ckpt)
        loaded = read_checkpoint(path)
        assert loaded.logit_scale == ckpt.logit_scale
        assert loaded.metadata == ckpt.metadata
        assert sorted(loaded.tensors) == sorted(ckpt.tensors)
        for name, value in ckpt.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], value)

    def test_encoding_is_stable(self):
        assert encode_checkpoint(_checkpoint(1)) == encode_checkpoint(_checkpoint(1))
        assert encode_checkpoint(_checkpoint(1)).startswith(CHECKPOINT_MAGIC)

    def test_bad_magic(self):
        payload = b"NOTACKPT" + encode_checkpoint(_checkpoint())[8:]
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(payload)

    def test_version_mismatch_names_both(self):
        payload = bytearray(encode_checkpoint(_checkpoint()))
        payload[8:12] = struct.pack("<I", 7)
        with pytest.raises(CheckpointError, match="version 7.*version 1"):
            decode_checkpoint(bytes(payload))

    @pytest.mark.parametrize("cut", [4, 10, 20, 60, -1])
    def test_truncation(self, cut):
        payload = encode_checkpoint(_checkpoint())
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(payload[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(encode_checkpoint(_checkpoint()) + b"\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "absent.ckpt")

    def test_model_checkpoint_through_file(self, tmp_path):
        model = MedimpModel(SMALL_IMAGE, SMALL_TEXT, build_vocab(["the gfr is low"]), seed=2)
        path = write_checkpoint(tmp_path / "m.ckpt", model.to_checkpoint())
        clone = MedimpModel.from_checkpoint(read_checkpoint(path))
        voxels = np.random.default_rng(0).uniform(size=(2, 6, 6, 6))
        np.testing.assert_allclose(clone.embed_images(voxels), model.embed_images(voxels), atol=1e-5)


@pytest.fixture(scope="module")
def small_cohort():
    config = CohortConfig(n_subjects=6, split_fractions=(0.5, 0.0, 0.5), volume_shape=(6, 6, 6), spacing=(1.0, 1.0, 1.0))
    return gen_cohort(rng_seed=5, config=config)


@pytest.fixture(scope="module")
def model():
    return MedimpModel(SMALL_IMAGE, SMALL_TEXT, build_vocab(["the gfr is low"]), seed=4)


class TestExport:
    def test_real_rows_only(self, model, small_cohort):
        table = export_embeddings(model, small_cohort)
        assert len(table) == sum(len(p.exams) for p in small_cohort.profiles.values())
        assert table.shape[1] == len(LABEL_COLUMNS) + 4
        assert not table["is_augmented"].any()

    def test_augmented_rows_flagged(self, model, small_cohort):
        table = export_embeddings(model, small_cohort, include_augmented=2, seed=1)
        n_exams = sum(len(p.exams) for p in small_cohort.profiles.values())
        assert len(table) == 3 * n_exams
        assert table["is_augmented"].sum() == 2 * n_exams
        assert table.shape[1] == 6 + 4

    def test_deterministic(self, model, small_cohort):
        a = export_embeddings(model, small_cohort, include_augmented=1, seed=3)
        b = export_embeddings(model, small_cohort, include_augmented=1, seed=3)
        pd.testing.assert_frame_equal(a, b)

    def test_csv_round_trip(self, model, small_cohort, tmp_path):
        table = export_embeddings(model, small_cohort, include_augmented=1)
        loaded = read_embeddings(write_embeddings(tmp_path / "embeddings.csv", table))
        assert list(loaded.columns) == list(table.columns)
        assert loaded["is_augmented"].tolist() == table["is_augmented"].tolist()
        np.testing.assert_allclose(embedding_matrix(loaded), embedding_matrix(table), rtol=1e-8)

    def test_missing_table(self, tmp_path):
        with pytest.raises(ConfigError):
            read_embeddings(tmp_path / "embeddings.csv")


@pytest.fixture(scope="module")
def cloud():
    rng = np.random.default_rng(0)
    return np.concatenate([rng.normal(size=(30, 5)), rng.normal(loc=4.0, size=(30, 5))])


class TestTsne:
    @pytest.mark.parametrize("perplexity", [5.0, 10.0, 15.0])
    def test_rows_match_perplexity(self, cloud, perplexity):
        p, _ = conditional_probabilities(cloud, perplexity)
        for row in p:
            q = row[row > 0]
            entropy_bits = -(q * np.log2(q)).sum()
            assert abs(2**entropy_bits - perplexity) < 1e-2
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        np.testing.assert_array_equal(np.diag(p), 0.0)

    def test_joint_is_symmetric_and_normalized(self, cloud):
        p = joint_probabilities(cloud, 10.0)
        np.testing.assert_allclose(p, p.T, atol=1e-15)
        assert abs(p.sum() - 1.0) < 1e-10

    def test_deterministic(self, cloud):
        a = tsne_2d(cloud, perplexity=10, iterations=60, seed=2)
        b = tsne_2d(cloud, perplexity=10, iterations=60, seed=2)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (60, 2)
        assert np.isfinite(a).all()

    def test_separates_clusters(self, cloud):
        y = tsne_2d(cloud, perplexity=10, iterations=250, seed=0)
        within = np.linalg.norm(y[:30] - y[:30].mean(axis=0), axis=1).mean()
        between = np.linalg.norm(y[:30].mean(axis=0) - y[30:].mean(axis=0))
        assert between > within

    def test_infeasible_perplexity(self, cloud):
        with pytest.raises(ConfigError, match="perplexity"):
            conditional_probabilities(cloud[:12], 4.0)


class TestScatter:
    @pytest.fixture(scope="class")
    def points(self):
        rng = np.random.default_rng(1)
        coords = rng.normal(size=(23, 2))
        labels = [["low", "high", "medium", "very low"][i % 4] for i in range(23)]
        augmented = [i % 3 == 0 for i in range(23)]
        return coords, labels, augmented

    def test_one_marker_per_row(self, points):
        svg = render_scatter_svg(*points, variable="gfr")
        assert count_markers(svg) == 23

    def test_well_formed(self, points):
        root = ET.fromstring(render_scatter_svg(*points, variable="creat"))
        assert root.tag.endswith("svg")

    def test_byte_identical(self, points):
        assert render_scatter_svg(*points, variable="exam") == render_scatter_svg(*points, variable="exam")

    def test_misaligned_inputs(self, points):
        coords, labels, augmented = points
        with pytest.raises(ValueError):
            render_scatter_svg(coords[:-1], labels, augmented, "gfr")

    def test_non_finite(self, points):
        coords, labels, augmented = points
        bad = coords.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            render_scatter_svg(bad, labels, augmented, "gfr")


class TestGradSuite:
    def test_subset_passes(self):
        results = run_grad_suite(configurations=3, seed=0, names=["elementwise", "softmax", "layer_norm", "contrastive_loss"])
        assert [r.name for r in results] == ["elementwise", "softmax", "layer_norm", "contrastive_loss"]
        assert all(r.passed for r in results)
        assert "PASS" in results_table(results)

    def test_every_case_builds(self):
        rng = np.random.default_rng(0)
        for name, case in CASES.items():
            f, params = case(rng)
            assert np.isfinite(f().item()), name
            assert params, name


PIPELINE_CONFIG = {
    "seed": 3,
    "cohort": {
        "n_subjects": 40,
        "split_fractions": [0.5, 0.0, 0.5],
        "volume_shape": [6, 6, 6],
        "spacing": [1.0, 1.0, 1.0],
    },
    "prompts": {"max_len": 24, "n_augmentations": 2},
    "image_encoder": SMALL_IMAGE.model_dump(mode="json"),
    "text_encoder": SMALL_TEXT.model_dump(mode="json"),
    "train": {"batch_size": 4, "epochs": 2, "warmup_epochs": 1, "base_lr": 1e-2},
    "downstream": {"heads": 2, "ff_width": 8, "epochs": 5, "threshold": 125.0},
    "plot": {"perplexity": 5.0, "iterations": 40, "augmented_per_exam": 1},
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "run.json"
    path.write_text(json.dumps(PIPELINE_CONFIG))
    return path


@pytest.fixture(scope="module")
def pipeline(config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for command in ("synth", "prompts", "pretrain", "embed"):
        assert main([command, "--config", str(config_path), "--out", str(out)]) == 0, command
    return out


class TestCommands:
    def test_outputs_written(self, pipeline):
        assert (pipeline / "cohort" / "manifest.json").is_file()
        assert (pipeline / "model.ckpt").is_file()
        metrics = pd.read_csv(pipeline / "metrics.csv")
        assert len(metrics) == 2
        assert list(metrics["split"]) == ["train", "train"]

    def test_prompts_jsonl(self, pipeline):
        lines = (pipeline / "prompts.jsonl").read_text().splitlines()
        manifest = json.loads((pipeline / "cohort" / "manifest.json").read_text())
        n_exams = sum(len(s["exams"]) for s in manifest["subjects"])
        assert len(lines) == 2 * n_exams
        assert all("text" in json.loads(line) for line in lines)

    def test_embedding_table(self, pipeline):
        table = read_embeddings(pipeline / "embeddings.csv")
        assert table.shape[1] == 6 + 4
        assert table["is_augmented"].sum() == len(table) // 2

    def test_pretrain_is_reproducible(self, pipeline, config_path, tmp_path):
        for command in ("synth", "pretrain"):
            assert main([command, "--config", str(config_path), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "model.ckpt").read_bytes() == (pipeline / "model.ckpt").read_bytes()
        assert len(pd.read_csv(tmp_path / "metrics.csv")) == 2

    def test_seed_flag_changes_cohort(self, config_path, tmp_path):
        assert main(["synth", "--config", str(config_path), "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--config", str(config_path), "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
        a = json.loads((tmp_path / "a" / "cohort" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "cohort" / "manifest.json").read_text())
        assert a["seed"] == 3 and b["seed"] == 4

    def test_env_seed(self, config_path, tmp_path, monkeypatch):
        monkeypatch.setenv("MEDIMP_SEED", "9")
        assert main(["synth", "--config", str(config_path), "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "cohort" / "manifest.json").read_text())["seed"] == 9
        assert main(["synth", "--config", str(config_path), "--out", str(tmp_path / "flag"), "--seed", "2"]) == 0
        assert json.loads((tmp_path / "flag" / "cohort" / "manifest.json").read_text())["seed"] == 2

    def test_eval_report(self, pipeline, config_path, capsys):
        assert main(["eval", "--config", str(config_path), "--out", str(pipeline)]) == 0
        report = pd.read_csv(pipeline / "report.csv")
        assert list(report["horizon"]) == ["2y", "3y", "4y", "Mean"]
        assert "AUC" in capsys.readouterr().out.upper()

    def test_eval_cross_validation(self, pipeline, config_path, capsys):
        assert main(["eval", "--config", str(config_path), "--out", str(pipeline), "--cv", "3", "--untrained"]) == 0
        assert (pipeline / "report_cv3_untrained.csv").is_file()
        assert "±" in capsys.readouterr().out

    def test_plot(self, pipeline, config_path):
        args = ["plot", "--config", str(config_path), "--out", str(pipeline)]
        assert main(args) == 0
        files = sorted(p.name for p in (pipeline / "plots").iterdir())
        assert files == ["tsne_creat.svg", "tsne_donor_age.svg", "tsne_exam.svg", "tsne_gfr.svg"]
        first = (pipeline / "plots" / "tsne_gfr.svg").read_bytes()
        n_rows = len(read_embeddings(pipeline / "embeddings.csv"))
        assert count_markers(first.decode("utf-8")) == n_rows
        assert main(args + ["--variables", "gfr"]) == 0
        assert (pipeline / "plots" / "tsne_gfr.svg").read_bytes() == first


class TestDispatch:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--bogus"])
        assert exc.value.code == 2

    def test_global_flags_after_subcommand(self):
        args = build_parser().parse_args(["--seed", "1", "synth", "--out", "x"])
        assert args.seed == 1 and str(args.out) == "x"
        args = build_parser().parse_args(["synth", "--seed", "5"])
        assert args.seed == 5

    def test_missing_config(self, tmp_path, capsys):
        assert main(["synth", "--config", str(tmp_path / "absent.json")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"epochs": 2, "warmup_epochs": 5}}))
        assert main(["synth", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_missing_inputs(self, tmp_path):
        assert main(["pretrain", "--out", str(tmp_path)]) == 1
        assert main(["plot", "--out", str(tmp_path)]) == 1

    def test_single_fold(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path), "--cv", "1"]) == 1

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--configs", "2"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert all(name in out for name in CASES)

    def test_gradcheck_default_configurations(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("PASS") == len(CASES)
