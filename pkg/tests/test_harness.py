import math

import numpy as np
import pytest
import torch

from checkpoint import CheckpointError, checkpoint_load, checkpoint_save, read_checkpoint
from config import ALL_VARIANTS, DESK_PRESET, model_hash
from dataset import DatasetError, SequenceDataset, generate_dataset, load_manifest
from evaluation import EvalRow, evaluate, summarize
from export import inspect_window
from matrix import EVAL_SPLITS, StudyRow, rank, run_name, run_one, run_pretrain_study, run_variant_matrix
from model import WorldModel
from muvo import build_parser, gen_config, main
from training import LAST_CHECKPOINT_NAME, METRIC_LOG_NAME, compute_loss, read_metric_log, train

# ============================================================================
# Dataset
# ============================================================================


def test_manifest_lists_every_split(tiny_data):
    manifest = load_manifest(tiny_data)
    assert [e.split for e in manifest.entries] == ["train", "train", "val_rl", "val_ds"]
    assert all(e.frames == 6 for e in manifest.entries)
    assert len({e.seed for e in manifest.entries}) == 4


def test_windows_per_episode(tiny_data, tiny_cfg):
    data = SequenceDataset(tiny_data, "train", tiny_cfg)
    assert len(data) == 2 * (6 - 3 + 1)
    assert data.windows[:4] == [(0, 0), (0, 1), (0, 2), (0, 3)]


def test_batch_shapes(tiny_data, tiny_cfg):
    batch = SequenceDataset(tiny_data, "train", tiny_cfg).collate([0, 5])
    assert batch.rgb.shape == (2, 3, 3, 32, 64)
    assert batch.range_view.shape == (2, 3, 4, 8, 32)
    assert batch.actions.shape == (2, 3, 3)
    assert batch.occupancy.shape == (2, 3, 16, 16, 8)
    assert set(torch.unique(batch.occupancy).tolist()) <= {0.0, 1.0}
    assert batch.keys == [("train", 0, 0), ("train", 1, 1)]


def test_dataset_without_occupancy(tiny_data, tiny_cfg):
    batch = SequenceDataset(tiny_data, "val_rl", tiny_cfg, with_occupancy=False).collate([0])
    assert batch.occupancy is None


def test_missing_dataset_raises(tmp_path, tiny_cfg):
    with pytest.raises(DatasetError):
        SequenceDataset(tmp_path, "train", tiny_cfg)


def test_window_longer_than_episode_raises(tiny_data, tiny_cfg):
    cfg = tiny_cfg.model_copy(update={"seq_len": 7, "observed_m": 5, "future_n": 2})
    with pytest.raises(DatasetError, match="no window"):
        SequenceDataset(tiny_data, "train", cfg)


def test_generate_refuses_non_empty_dir(tmp_path, tiny_cfg):
    (tmp_path / "keep.txt").write_text("x")
    with pytest.raises(DatasetError, match="not empty"):
        generate_dataset(tiny_cfg, tmp_path)


def test_generate_is_byte_identical(tmp_path, tiny_cfg):
    cfg = tiny_cfg.model_copy(
        update={"dataset": tiny_cfg.dataset.model_copy(update={"train_episodes": 1, "frames": 3})}
    )
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


# ============================================================================
# Model forward
# ============================================================================


@pytest.mark.parametrize("occupancy", [True, False])
@pytest.mark.parametrize("latent", ["1D", "2D"])
@pytest.mark.parametrize("tag", ALL_VARIANTS)
def test_forward_shapes_and_finite_loss(tiny_data, tiny_cfg, tag, latent, occupancy):
    torch.manual_seed(0)
    cfg = tiny_cfg.model_copy(update={"variant_tag": tag, "latent_mode": latent, "occupancy_head": occupancy})
    batch = SequenceDataset(tiny_data, "train", cfg).collate([0, 1])
    out = WorldModel(cfg)(batch, observed_m=2, noise="mean")

    assert (out.batch_size, out.length) == (2, 3)
    assert len(out.rollout.states) == 3
    assert len(out.rollout.posteriors) == 2
    assert out.decoded.image_probs[0].shape == (6, 3, 32, 64)
    assert out.decoded.range_views[0].shape == (6, 4, 8, 32)
    if occupancy:
        assert out.decoded.occupancy.shape == (6, 16, 16, 8)
    else:
        assert out.decoded.occupancy is None

    report = compute_loss(out, batch, cfg)
    assert torch.isfinite(report.total)
    report.total.backward()


def test_observed_frames_out_of_range(tiny_data, tiny_cfg):
    batch = SequenceDataset(tiny_data, "train", tiny_cfg).collate([0])
    with pytest.raises(ValueError):
        WorldModel(tiny_cfg)(batch, observed_m=0)


def test_voxel_parameters_only_with_head(tiny_cfg):
    assert WorldModel(tiny_cfg).voxel_parameter_names()
    assert not WorldModel(tiny_cfg.model_copy(update={"occupancy_head": False})).voxel_parameter_names()


# ============================================================================
# Checkpoints
# ============================================================================


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    torch.manual_seed(0)
    a = WorldModel(tiny_cfg)
    path = checkpoint_save(tmp_path / "a.mvck", a, tiny_cfg, step=7)
    torch.manual_seed(1)
    b = WorldModel(tiny_cfg)
    ckpt = checkpoint_load(path, b, tiny_cfg)
    assert ckpt.header.step == 7
    for name, value in _state(a).items():
        torch.testing.assert_close(b.state_dict()[name], value, rtol=0, atol=0)


def test_checkpoint_truncated(tmp_path, tiny_cfg):
    path = checkpoint_save(tmp_path / "a.mvck", WorldModel(tiny_cfg), tiny_cfg, step=0)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_checkpoint_failed_load_leaves_model_untouched(tmp_path, tiny_cfg):
    path = checkpoint_save(tmp_path / "a.mvck", WorldModel(tiny_cfg), tiny_cfg, step=0)
    path.write_bytes(path.read_bytes()[:-10])
    model = WorldModel(tiny_cfg)
    before = _state(model)
    with pytest.raises(CheckpointError):
        checkpoint_load(path, model, tiny_cfg)
    for name, value in before.items():
        torch.testing.assert_close(model.state_dict()[name], value, rtol=0, atol=0)


def test_checkpoint_hash_scopes(tmp_path, tiny_cfg):
    path = checkpoint_save(tmp_path / "a.mvck", WorldModel(tiny_cfg), tiny_cfg, step=0)
    other = tiny_cfg.model_copy(update={"steps": 99})
    with pytest.raises(CheckpointError, match="config hash"):
        checkpoint_load(path, WorldModel(other), other)
    checkpoint_load(path, WorldModel(other), other, match="model")
    checkpoint_load(path, WorldModel(other), other, force=True)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.mvck"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


# ============================================================================
# Training
# ============================================================================


def test_train_writes_log_and_checkpoints(tiny_data, tiny_cfg, tmp_path):
    result = train(tiny_cfg, tiny_data, tmp_path / "run")
    assert result.checkpoint.exists()
    assert (tmp_path / "run" / "step_000001.mvck").exists()
    records = read_metric_log(result.metric_log)
    assert {r.step for r in records} == {1, 2}
    assert {"total", "kl"} <= {r.term for r in records}
    assert all(math.isfinite(r.value) for r in records if r.term == "total")
    assert read_checkpoint(result.checkpoint).header.step == 2


def test_train_is_deterministic(tiny_data, tiny_cfg, tmp_path):
    a = train(tiny_cfg, tiny_data, tmp_path / "a")
    b = train(tiny_cfg, tiny_data, tmp_path / "b")
    assert a.metric_log.read_text() == b.metric_log.read_text()
    pa = read_checkpoint(a.checkpoint).params()
    pb = read_checkpoint(b.checkpoint).params()
    for name in pa:
        np.testing.assert_array_equal(pa[name], pb[name])


def test_resume_continues_step_count(tiny_data, tiny_cfg, tmp_path):
    first = train(tiny_cfg.model_copy(update={"steps": 1}), tiny_data, tmp_path / "run")
    cfg = tiny_cfg.model_copy(update={"steps": 2})
    # steps is part of the config hash, so resuming under a new budget needs force
    result = train(cfg, tiny_data, tmp_path / "run", resume=first.checkpoint, force=True)
    assert read_checkpoint(result.checkpoint).header.step == 2
    assert {r.step for r in read_metric_log(result.metric_log)} == {1, 2}


@pytest.mark.slow
def test_ptf_freezes_everything_but_the_voxel_head(tiny_data, tiny_cfg, tmp_path):
    pre_cfg = tiny_cfg.model_copy(update={"occupancy_head": False})
    pre = train(pre_cfg, tiny_data, tmp_path / "pre")

    cfg = tiny_cfg.model_validate(
        {**tiny_cfg.model_dump(), "occupancy_head": True, "pretrain_mode": "PTF", "checkpoint_path": str(pre.checkpoint)}
    )
    assert model_hash(cfg) == model_hash(pre_cfg)
    fine = train(cfg, tiny_data, tmp_path / "ptf")

    before = read_checkpoint(pre.checkpoint).params()
    after = read_checkpoint(fine.checkpoint).params()
    voxel = WorldModel(cfg).voxel_parameter_names()
    assert voxel and voxel.isdisjoint(before)
    for name, value in before.items():
        np.testing.assert_array_equal(after[name], value)


def _pretrained(tiny_data, tiny_cfg, run_dir):
    return train(tiny_cfg.model_copy(update={"occupancy_head": False}), tiny_data, run_dir).checkpoint


def _with_pretrained(tiny_cfg, mode, checkpoint, **update):
    return tiny_cfg.model_validate(
        {**tiny_cfg.model_dump(), "occupancy_head": True, "pretrain_mode": mode, "checkpoint_path": str(checkpoint), **update}
    )


@pytest.mark.slow
def test_pto_starts_from_pretrained_weights_and_trains_everything(tiny_data, tiny_cfg, tmp_path):
    pre = _pretrained(tiny_data, tiny_cfg, tmp_path / "pre")
    # a tiny step size keeps every weight within reach of its starting value
    cfg = _with_pretrained(tiny_cfg, "PTO", pre, lr=1e-6)
    open_run = train(cfg, tiny_data, tmp_path / "pto")

    before = read_checkpoint(pre).params()
    after = read_checkpoint(open_run.checkpoint).params()
    assert WorldModel(cfg).voxel_parameter_names() <= set(after)
    for name, value in before.items():
        np.testing.assert_allclose(after[name], value, rtol=0, atol=1e-5)
    assert any(not np.array_equal(after[name], value) for name, value in before.items())


@pytest.mark.slow
def test_ptf_occupancy_iou_improves_over_training(tiny_data, tiny_cfg, tmp_path):
    pre = _pretrained(tiny_data, tiny_cfg, tmp_path / "pre")
    cfg = _with_pretrained(tiny_cfg, "PTF", pre, steps=2000, lr=1e-3, checkpoint_every=100)
    train(cfg, tiny_data, tmp_path / "ptf")

    iou = [
        evaluate(tmp_path / "ptf" / f"step_{step:06d}.mvck", cfg, tiny_data, "train").summary["observed/iou_pos"].mean
        for step in range(100, 2001, 100)
    ]
    # 500-step moving average over checkpoints 100 steps apart
    smooth = np.convolve(iou, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) >= -1e-3), smooth
    assert smooth[-1] > smooth[0]


def test_training_loss_trends_down(tiny_data, tiny_cfg, tmp_path):
    cfg = tiny_cfg.model_copy(update={"steps": 30, "lr": 1e-3, "checkpoint_every": 30})
    result = train(cfg, tiny_data, tmp_path / "run")
    totals = [r.value for r in read_metric_log(result.metric_log) if r.term == "total"]
    k = 5
    assert len(totals) == 30
    assert np.mean(totals[-k:]) < np.mean(totals[:k])



# ============================================================================
# Evaluation and studies
# ============================================================================


def test_evaluate_one_row_per_window(tiny_data, tiny_cfg, tmp_path):
    result = train(tiny_cfg, tiny_data, tmp_path / "run")
    ev = evaluate(result.checkpoint, tiny_cfg, tiny_data, "val_rl", out_dir=tmp_path / "eval")
    assert len(ev.rows) == 4
    assert [r.start for r in ev.rows] == [0, 1, 2, 3]
    for key in ("observed/psnr", "future/psnr", "observed/chamfer", "future/chamfer", "observed/iou_pos"):
        assert key in ev.summary
        assert ev.summary[key].count <= 4
    assert any((tmp_path / "eval").iterdir())


def test_summarize_ignores_nan():
    rows = [
        EvalRow(split="val_rl", episode=0, start=0, metrics={"future/chamfer": 1.0}),
        EvalRow(split="val_rl", episode=0, start=1, metrics={"future/chamfer": math.nan}),
        EvalRow(split="val_rl", episode=0, start=2, metrics={"future/chamfer": 3.0}),
    ]
    s = summarize(rows)["future/chamfer"]
    assert (s.mean, s.std, s.count) == (2.0, 1.0, 2)


def test_inspect_window_dumps_every_frame(tiny_data, tiny_cfg, tmp_path):
    result = train(tiny_cfg.model_copy(update={"steps": 1}), tiny_data, tmp_path / "run")
    cfg = tiny_cfg.model_copy(update={"steps": 1})
    written = inspect_window(result.checkpoint, cfg, tiny_data, "val_rl", 0, tmp_path / "dump")
    assert len(written) == 3 * 6
    assert all(p.exists() for p in written)
    with pytest.raises(IndexError):
        inspect_window(result.checkpoint, cfg, tiny_data, "val_rl", 99, tmp_path / "dump")


def test_run_one_turns_failures_into_rows(tiny_cfg, tmp_path):
    rows = run_one("fusion", tiny_cfg, tmp_path / "missing", tmp_path / "out")
    assert [r.split for r in rows] == list(EVAL_SPLITS)
    assert all(r.error and "DatasetError" in r.error for r in rows)


def test_rank_orders_by_direction():
    def row(run, psnr, chamfer):
        return StudyRow(
            study="fusion",
            run=run,
            variant_tag="RV-WOB-TR",
            latent_mode="2D",
            occupancy_head=True,
            pretrain_mode="NPT",
            split="val_rl",
            metrics={"future/psnr": psnr, "future/chamfer": chamfer},
        )

    ranking = rank([row("a", 10.0, 2.0), row("b", 12.0, 3.0), row("c", 11.0, math.nan)])
    assert [e.run for e in ranking["val_rl"]["future/psnr"]] == ["b", "c", "a"]
    assert [e.run for e in ranking["val_rl"]["future/chamfer"]] == ["a", "b"]


@pytest.mark.slow
def test_variant_matrix_runs_every_cell(tiny_data, tiny_cfg, tmp_path):
    report = run_variant_matrix(tiny_cfg, tiny_data, tmp_path / "fusion", steps=10)
    assert len(report.rows) == len(ALL_VARIANTS) * len(EVAL_SPLITS)
    assert not report.failed
    assert {r.variant_tag for r in report.rows} == set(ALL_VARIANTS)
    for tag in ALL_VARIANTS:
        run_dir = tmp_path / "fusion" / run_name(tiny_cfg.model_copy(update={"variant_tag": tag, "steps": 10}))
        assert read_checkpoint(run_dir / LAST_CHECKPOINT_NAME).header.step == 10
        totals = [r.value for r in read_metric_log(run_dir / METRIC_LOG_NAME) if r.term == "total"]
        assert len(totals) == 10 and all(math.isfinite(v) for v in totals)


@pytest.mark.slow
@pytest.mark.parametrize("occupancy", [True, False])
@pytest.mark.parametrize("latent", ["1D", "2D"])
def test_every_variant_trains_ten_steps(tiny_data, tiny_cfg, tmp_path, latent, occupancy):
    for tag in ALL_VARIANTS:
        cfg = tiny_cfg.model_copy(
            update={"variant_tag": tag, "latent_mode": latent, "occupancy_head": occupancy, "steps": 10, "checkpoint_every": 10}
        )
        result = train(cfg, tiny_data, tmp_path / tag)
        assert result.checkpoint.exists()
        totals = [r.value for r in read_metric_log(result.metric_log) if r.term == "total"]
        assert len(totals) == 10 and all(math.isfinite(v) for v in totals), tag


@pytest.mark.slow
def test_single_variant_report_is_repeatable(tiny_data, tiny_cfg, tmp_path):
    variants = ("PP-BEV-AVG",)
    a = run_variant_matrix(tiny_cfg, tiny_data, tmp_path / "a", steps=2, variants=variants)
    b = run_variant_matrix(tiny_cfg, tiny_data, tmp_path / "b", steps=2, variants=variants)
    assert a.model_dump() == b.model_dump()


@pytest.mark.slow
def test_pretrain_study_reports_occupancy_for_every_mode(tiny_data, tiny_cfg, tmp_path):
    report = run_pretrain_study(tiny_cfg, tiny_data, tmp_path / "pretrain", steps=2)
    assert not report.failed
    assert sorted((r.pretrain_mode, r.split) for r in report.rows) == sorted(
        (mode, split) for mode in ("NPT", "PTF", "PTO") for split in EVAL_SPLITS
    )
    for row in report.rows:
        for name in ("iou_pos", "iou_neg", "precision", "recall"):
            assert math.isfinite(row.metrics[f"future/{name}"]), (row.run, row.split, name)


@pytest.mark.slow
def test_overfit_reaches_quality_thresholds(tmp_path):
    cfg = DESK_PRESET.model_copy(
        update={
            "variant_tag": "RV-WOB-TR",
            "latent_mode": "2D",
            "occupancy_head": True,
            "steps": 3000,
            "lr": 5e-4,
            "checkpoint_every": 3000,
            "dataset": DESK_PRESET.dataset.model_copy(update={"train_episodes": 8, "val_rl_episodes": 0, "val_ds_episodes": 0, "frames": 6}),
        }
    )
    generate_dataset(cfg, tmp_path / "data")
    assert len(SequenceDataset(tmp_path / "data", "train", cfg)) == 8

    result = train(cfg, tmp_path / "data", tmp_path / "run")
    summary = evaluate(result.checkpoint, cfg, tmp_path / "data", "train").summary
    assert summary["observed/psnr"].mean >= 22.0
    assert summary["future/psnr"].mean >= 16.0
    assert summary["observed/chamfer"].mean <= 0.5
    assert summary["observed/iou_pos"].mean >= 0.5



# ============================================================================
# Command line
# ============================================================================


def test_cli_config_prints_hashes(capsys, monkeypatch):
    monkeypatch.delenv("MUVO_SEED", raising=False)
    assert main(["config", "--preset", "tiny"]) == 0
    out = capsys.readouterr().out
    assert "variant_tag = \"RV-WOB-TR\"" in out
    assert "# model_hash = " in out


def test_cli_reports_failure_exit_code(tmp_path):
    assert main(["eval", "--preset", "tiny", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "none.mvck")]) == 2


def test_cli_gen_flags(tmp_path, monkeypatch):
    monkeypatch.delenv("MUVO_SEED", raising=False)
    out = tmp_path / "data"
    argv = ["gen", "--preset", "tiny", "--seed", "7", "--episodes", "1", "--frames", "2", "--out", str(out), "--domain-shift"]
    assert main(argv) == 0
    manifest = load_manifest(out)
    assert [(e.split, e.seed, e.frames) for e in manifest.entries] == [
        ("train", 7, 2),
        ("val_rl", 10007, 2),
        ("val_ds", 20007, 2),
    ]


def test_cli_gen_without_domain_shift(tiny_cfg):
    args = build_parser().parse_args(["gen", "--data", "somewhere", "--episodes", "8", "--no-domain-shift"])
    assert args.out == "somewhere"
    cfg = gen_config(tiny_cfg, args)
    assert (cfg.dataset.train_episodes, cfg.dataset.val_rl_episodes, cfg.dataset.val_ds_episodes) == (8, 2, 0)
    assert cfg.dataset.frames == tiny_cfg.dataset.frames
