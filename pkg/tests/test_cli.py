import dataclasses
import json

import numpy as np
import pytest

from foresight.cli import main
from foresight.features import FeatureSequence
from foresight.io import (
    load_checkpoint,
    load_corpus,
    load_features,
    load_head,
    load_pca,
    save_checkpoint,
    save_features,
)
from foresight.model import ForecasterConfig, init_weights

from conftest import TINY

SPEC_SMALL = {
    "n_sequences": 6,
    "n_frames": 4,
    "grid_h": 2,
    "grid_w": 2,
    "channels": 4,
    "n_classes": 3,
    "blobs_min": 1,
    "blobs_max": 2,
    "eval_fraction": 0.2,
}


@pytest.fixture
def corpus_dir(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SPEC_SMALL))
    out = tmp_path / "corpus"
    assert main(["gen-corpus", "--spec", str(spec_path), "--seed", "5", "--out", str(out)]) == 0
    return out


class TestGenCorpus:
    def test_writes_manifest_and_files(self, corpus_dir, capsys):
        assert (corpus_dir / "manifest.json").is_file()
        loaded = load_corpus(corpus_dir)
        assert len(loaded.items) == 6
        assert loaded.class_count == 3

    def test_prints_summary(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SPEC_SMALL))
        main(["gen-corpus", "--spec", str(spec_path), "--seed", "5", "--out", str(tmp_path / "c")])
        out = capsys.readouterr().out
        assert "5 train + 1 eval" in out

    def test_bad_spec_json(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text("{nope")
        rc = main(["gen-corpus", "--spec", str(spec_path), "--seed", "1", "--out", str(tmp_path / "c")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_spec_field(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({**SPEC_SMALL, "gravity": 9.8}))
        rc = main(["gen-corpus", "--spec", str(spec_path), "--seed", "1", "--out", str(tmp_path / "c")])
        assert rc == 1


class TestPcaFit:
    def test_fit_and_subsample(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "codec.pca"
        rc = main([
            "pca-fit", "--features", str(corpus_dir), "--dim", "3",
            "--samples", "50", "--seed", "0", "--out", str(out),
        ])
        assert rc == 0
        model = load_pca(out)
        assert model.c_in == 4 and model.d_out == 3
        assert "pca:" in capsys.readouterr().out

    def test_samples_larger_than_corpus_uses_all(self, corpus_dir, tmp_path):
        out = tmp_path / "codec.pca"
        rc = main([
            "pca-fit", "--features", str(corpus_dir), "--dim", "2",
            "--samples", "100000", "--seed", "0", "--out", str(out),
        ])
        assert rc == 0
        assert load_pca(out).d_out == 2

    def test_missing_dir(self, tmp_path, capsys):
        rc = main([
            "pca-fit", "--features", str(tmp_path / "nowhere"), "--dim", "2",
            "--samples", "10", "--seed", "0", "--out", str(tmp_path / "x"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


def write_run_config(path, corpus_dir, curve=None, **train_overrides):
    train = {"total_steps": 4, "batch_size": 2, "lr": 1e-3, "warmup_steps": 1, "seed": 0}
    train.update(train_overrides)
    data = {"corpus": str(corpus_dir)}
    if curve:
        data["curve"] = str(curve)
    doc = {"model": dataclasses.asdict(TINY), "train": train, "data": data}
    path.write_text(json.dumps(doc))


class TestTrain:
    def test_trains_and_writes_checkpoint(self, corpus_dir, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        curve_path = tmp_path / "curve.csv"
        write_run_config(cfg_path, corpus_dir, curve=curve_path)
        ckpt = tmp_path / "model.ckpt"
        rc = main(["train", "--config", str(cfg_path), "--out", str(ckpt)])
        assert rc == 0
        ck = load_checkpoint(ckpt)
        assert ck.weights.config == TINY
        assert ck.train_config.total_steps == 4
        lines = curve_path.read_text().strip().splitlines()
        assert lines[0] == "step,phase,lr,loss"
        assert len(lines) == 5
        assert "final loss" in capsys.readouterr().out

    def test_missing_corpus_key(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        doc = {"model": dataclasses.asdict(TINY), "train": {"total_steps": 2, "batch_size": 1}}
        cfg_path.write_text(json.dumps(doc))
        rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "m")])
        assert rc == 1
        assert "data.corpus" in capsys.readouterr().err


@pytest.fixture
def trained_ckpt(corpus_dir, tmp_path):
    cfg_path = tmp_path / "run.json"
    write_run_config(cfg_path, corpus_dir)
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", str(cfg_path), "--out", str(ckpt)]) == 0
    return ckpt


@pytest.fixture
def context_file(corpus_dir, tmp_path):
    item = load_corpus(corpus_dir).items[0]
    ctx = FeatureSequence(item.features.data[:2].copy(), (0, 1))
    p = tmp_path / "context.feat"
    save_features(p, ctx)
    return p


class TestForecast:
    def test_rollout_steps(self, trained_ckpt, context_file, tmp_path):
        out = tmp_path / "pred.feat"
        rc = main([
            "forecast", "--ckpt", str(trained_ckpt), "--context", str(context_file),
            "--steps", "2", "--out", str(out),
        ])
        assert rc == 0
        pred = load_features(out)
        assert pred.data.shape == (2, 2, 2, 4)
        assert pred.frame_ids == (2, 3)

    def test_sliding_matches_plain_when_crop_is_grid(self, trained_ckpt, context_file, tmp_path):
        plain = tmp_path / "plain.feat"
        slid = tmp_path / "slid.feat"
        main([
            "forecast", "--ckpt", str(trained_ckpt), "--context", str(context_file),
            "--steps", "2", "--out", str(plain),
        ])
        rc = main([
            "forecast", "--ckpt", str(trained_ckpt), "--context", str(context_file),
            "--steps", "2", "--sliding", "2,2,1,1", "--out", str(slid),
        ])
        assert rc == 0
        assert np.array_equal(load_features(plain).data, load_features(slid).data)

    def test_interp_pos(self, trained_ckpt, tmp_path):
        rng = np.random.default_rng(0)
        big = FeatureSequence(
            rng.standard_normal((2, 3, 3, 4)).astype(np.float32), (0, 1)
        )
        ctx = tmp_path / "big.feat"
        save_features(ctx, big)
        out = tmp_path / "pred_big.feat"
        rc = main([
            "forecast", "--ckpt", str(trained_ckpt), "--context", str(ctx),
            "--steps", "1", "--interp-pos", "3,3", "--out", str(out),
        ])
        assert rc == 0
        assert load_features(out).data.shape == (1, 3, 3, 4)

    def test_grid_mismatch_fails(self, trained_ckpt, tmp_path, capsys):
        rng = np.random.default_rng(0)
        ctx = tmp_path / "bad.feat"
        save_features(
            ctx,
            FeatureSequence(rng.standard_normal((2, 3, 3, 4)).astype(np.float32), (0, 1)),
        )
        rc = main([
            "forecast", "--ckpt", str(trained_ckpt), "--context", str(ctx),
            "--steps", "1", "--out", str(tmp_path / "x.feat"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_sliding_format(self, trained_ckpt, context_file, tmp_path, capsys):
        rc = main([
            "forecast", "--ckpt", str(trained_ckpt), "--context", str(context_file),
            "--steps", "1", "--sliding", "2,2", "--out", str(tmp_path / "x.feat"),
        ])
        assert rc == 1
        assert "crop_h,crop_w,stride_h,stride_w" in capsys.readouterr().err


EVAL_SPEC = {
    "n_sequences": 4,
    "n_frames": 21,
    "grid_h": 2,
    "grid_w": 2,
    "channels": 4,
    "n_classes": 3,
    "blobs_min": 1,
    "blobs_max": 2,
    "eval_fraction": 0.25,
}


@pytest.fixture
def eval_world(tmp_path):
    spec_path = tmp_path / "espec.json"
    spec_path.write_text(json.dumps(EVAL_SPEC))
    corpus = tmp_path / "ecorpus"
    assert main(["gen-corpus", "--spec", str(spec_path), "--seed", "9", "--out", str(corpus)]) == 0

    heads = tmp_path / "heads"
    heads.mkdir()
    for task in ("seg", "depth", "normals"):
        rc = main([
            "heads-fit", "--features", str(corpus), "--targets", str(corpus),
            "--task", task, "--l2", "1e-4", "--out", str(heads / f"{task}.head"),
        ])
        assert rc == 0

    cfg = ForecasterConfig(1, 8, 2, 4, 5, 4, 2, 2)
    ckpt = tmp_path / "eval.ckpt"
    save_checkpoint(ckpt, init_weights(cfg, seed=1))
    return corpus, heads, ckpt


class TestHeadsFit:
    def test_heads_load_and_have_right_shape(self, eval_world):
        corpus, heads, _ = eval_world
        seg = load_head(heads / "seg.head")
        assert seg.task == "seg" and seg.class_count == 3 and seg.weight.shape == (3, 4)
        dep = load_head(heads / "depth.head")
        assert dep.weight.shape == (1, 4)
        nrm = load_head(heads / "normals.head")
        assert nrm.weight.shape == (3, 4)

    def test_oracle_heads_are_accurate(self, eval_world):
        corpus, heads, _ = eval_world
        loaded = load_corpus(corpus)
        seg = load_head(heads / "seg.head")
        it = loaded.items[0]
        pred = seg.apply(it.features.data)
        assert (pred == it.labels).mean() > 0.9


class TestEvaluate:
    def test_json_report(self, eval_world, tmp_path, capsys):
        corpus, heads, ckpt = eval_world
        report = tmp_path / "report.json"
        capsys.readouterr()
        rc = main([
            "evaluate", "--ckpt", str(ckpt), "--corpus", str(corpus),
            "--schedule", "short", "--heads", str(heads), "--report", str(report),
        ])
        assert rc == 0
        printed = capsys.readouterr().out
        doc = json.loads(printed)
        assert doc == json.loads(report.read_text())
        assert doc["schedule"] == "short"
        assert doc["context_ids"] == [8, 11, 14, 17]
        assert doc["target_id"] == 20
        assert doc["n_sequences"] == 1  # eval split only
        assert set(doc["metrics"]) == {"oracle", "copy_last", "prediction"}
        oracle = doc["metrics"]["oracle"]
        assert oracle["abs_rel"] is not None
        assert oracle["miou_all"] is not None

    def test_falls_back_to_all_items_without_eval_split(self, tmp_path, capsys):
        spec = dict(EVAL_SPEC, n_sequences=2, eval_fraction=0.0)
        spec_path = tmp_path / "s.json"
        spec_path.write_text(json.dumps(spec))
        corpus = tmp_path / "c2"
        main(["gen-corpus", "--spec", str(spec_path), "--seed", "3", "--out", str(corpus)])
        heads = tmp_path / "h2"
        heads.mkdir()
        main([
            "heads-fit", "--features", str(corpus), "--targets", str(corpus),
            "--task", "depth", "--l2", "1e-4", "--out", str(heads / "depth.head"),
        ])
        cfg = ForecasterConfig(1, 8, 2, 4, 5, 4, 2, 2)
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, init_weights(cfg, seed=1))
        report = tmp_path / "r.json"
        capsys.readouterr()  # drain the gen-corpus / heads-fit lines
        rc = main([
            "evaluate", "--ckpt", str(ckpt), "--corpus", str(corpus),
            "--schedule", "mid", "--heads", str(heads), "--report", str(report),
        ])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["n_sequences"] == 2
        assert doc["metrics"]["oracle"]["miou_all"] is None

    def test_no_heads_dir(self, eval_world, tmp_path, capsys):
        corpus, _, ckpt = eval_world
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main([
            "evaluate", "--ckpt", str(ckpt), "--corpus", str(corpus),
            "--schedule", "short", "--heads", str(empty), "--report", str(tmp_path / "r.json"),
        ])
        assert rc == 1
        assert "no head files" in capsys.readouterr().err

    def test_unknown_schedule_rejected_by_argparse(self, eval_world, tmp_path):
        corpus, heads, ckpt = eval_world
        with pytest.raises(SystemExit):
            main([
                "evaluate", "--ckpt", str(ckpt), "--corpus", str(corpus),
                "--schedule", "huge", "--heads", str(heads), "--report", str(tmp_path / "r"),
            ])


class TestGradcheck:
    def test_passes_with_defaults(self, corpus_dir, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        write_run_config(cfg_path, corpus_dir)
        rc = main(["gradcheck", "--config", str(cfg_path)])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["passed"] is True
        assert doc["max_rel_err"] < 1e-4

    def test_fails_with_impossible_tol(self, corpus_dir, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        write_run_config(cfg_path, corpus_dir)
        rc = main(["gradcheck", "--config", str(cfg_path), "--tol", "1e-18"])
        assert rc == 1
        doc = json.loads(capsys.readouterr().out)
        assert doc["passed"] is False


def test_missing_subcommand_exits():
    with pytest.raises(SystemExit):
        main([])


def test_missing_file_is_reported(tmp_path, capsys):
    rc = main([
        "forecast", "--ckpt", str(tmp_path / "none.ckpt"),
        "--context", str(tmp_path / "none.feat"), "--steps", "1",
        "--out", str(tmp_path / "o.feat"),
    ])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
