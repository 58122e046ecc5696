"""Tests for the training loop, history, resume and evaluation."""
import math

import numpy as np
import pytest
import torch

from m2net.checkpoint import LATEST_NAME, checkpoint_filename, load_checkpoint
from m2net.errors import DatasetError, NonFiniteLossError
from m2net.imaging import to_image
from m2net.main import EXIT_OK, main
from m2net.model import M2Net
from m2net.schemas import LossWeights, TrainConfig
from m2net.synth import generate_directory, load_quadruple_dir
from m2net.training import (
    HISTORY_COLUMNS,
    HISTORY_NAME,
    Trainer,
    build_from_checkpoint,
    epoch_order,
    evaluate,
    evaluate_predictions,
    hf_separation,
    lr_schedule,
    read_history,
    train,
    write_eval_csv,
)


def _params(module):
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def _state(module):
    return {name: t.detach().clone() for name, t in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ── Schedule and ordering ──────────────────────────────────────────────────

@pytest.mark.unit
@pytest.mark.parametrize("epoch, expected", [(0, 2e-4), (9, 2e-4), (10, 1e-4), (25, 5e-5)])
def test_lr_schedule_halves_every_ten_epochs(epoch, expected):
    """Test the step-halving learning rate."""
    assert lr_schedule(epoch, 2e-4) == pytest.approx(expected)


@pytest.mark.unit
def test_lr_schedule_rejects_negative_epoch():
    """Test negative epochs are rejected."""
    with pytest.raises(ValueError):
        lr_schedule(-1, 2e-4)


@pytest.mark.unit
def test_epoch_order_is_seeded_permutation():
    """Test epoch order depends only on (n, seed, epoch)."""
    order = epoch_order(10, seed=1, epoch=3)
    assert sorted(order) == list(range(10))
    assert epoch_order(10, seed=1, epoch=3) == order
    assert epoch_order(10, seed=1, epoch=4) != order


# ── Single steps ───────────────────────────────────────────────────────────

@pytest.mark.integration
def test_zero_learning_rate_leaves_parameters(tiny_config, tiny_batch):
    """Test a step with lr 0 changes no parameter."""
    trainer = Trainer(tiny_config.model_copy(update={"base_lr": 0.0}))
    trainer.set_lr(0)
    gen_before, disc_before = _params(trainer.model), _params(trainer.discriminator)
    trainer.train_step(tiny_batch)
    assert _same(gen_before, _params(trainer.model))
    assert _same(disc_before, _params(trainer.discriminator))


@pytest.mark.integration
def test_fresh_trainers_are_deterministic(tiny_config, tiny_batch):
    """Test identical config and batch give identical loss breakdowns."""
    first = Trainer(tiny_config).train_step(tiny_batch)
    second = Trainer(tiny_config).train_step(tiny_batch)
    assert first == second
    assert set(first) == {"loss_d", "loss_g", "loss_content", "loss_per", "loss_rem"}


@pytest.mark.integration
def test_removal_loss_is_weighted_sum(tiny_config, tiny_batch):
    """Test loss_rem combines the terms with the configured weights."""
    config = tiny_config.model_copy(update={"weights": LossWeights(lambda_g=0.5, lambda_content=3.0, lambda_per=2.0)})
    terms = Trainer(config).train_step(tiny_batch)
    expected = 0.5 * terms["loss_g"] + 3.0 * terms["loss_content"] + 2.0 * terms["loss_per"]
    assert terms["loss_rem"] == pytest.approx(expected, rel=1e-5)


@pytest.mark.integration
def test_discriminator_step_touches_only_discriminator(tiny_config, tiny_batch):
    """Test the discriminator update leaves the generator group alone."""
    trainer = Trainer(tiny_config)
    trainer.model.train()
    out = trainer.model(tiny_batch["composite"])
    gen_before, disc_before = _params(trainer.model), _params(trainer.discriminator)

    trainer.discriminator_step(out, tiny_batch["diffuse"])

    assert _same(gen_before, _params(trainer.model))
    assert all(p.grad is None for p in trainer.model.parameters())
    assert not _same(disc_before, _params(trainer.discriminator))


@pytest.mark.integration
def test_generator_step_touches_only_generator(tiny_config, tiny_batch):
    """Test the generator update leaves discriminator parameters and buffers alone."""
    trainer = Trainer(tiny_config)
    trainer.model.train()
    out = trainer.model(tiny_batch["composite"])
    gen_before, disc_before = _params(trainer.model), _state(trainer.discriminator)

    trainer.generator_step(out, tiny_batch["diffuse"])

    assert _same(disc_before, _state(trainer.discriminator))
    assert all(p.grad is None for p in trainer.discriminator.parameters())
    assert not _same(gen_before, _params(trainer.model))


@pytest.mark.integration
def test_non_finite_loss_names_term(tiny_config, tiny_batch):
    """Test a NaN input stops training with the first non-finite term."""
    trainer = Trainer(tiny_config)
    disc_before = _params(trainer.discriminator)
    batch = dict(tiny_batch)
    batch["composite"] = torch.full_like(batch["composite"], float("nan"))
    with pytest.raises(NonFiniteLossError) as excinfo:
        trainer.train_step(batch)
    assert excinfo.value.term == "loss_d"
    assert math.isnan(excinfo.value.value)
    assert _same(disc_before, _params(trainer.discriminator))


@pytest.mark.slow
def test_content_loss_decreases_on_repeated_batch(quadruple):
    """Test the content term falls in nearly every step on one repeated sample."""
    config = TrainConfig(batch_size=1, image_size=32, seed=0,
                         weights=LossWeights(lambda_g=0.0, lambda_content=10.0, lambda_per=1.0))
    trainer = Trainer(config)
    batch = {
        "composite": torch.from_numpy(quadruple.composite).permute(2, 0, 1)[None],
        "diffuse": torch.from_numpy(quadruple.diffuse).permute(2, 0, 1)[None],
    }
    values = [trainer.train_step(batch)["loss_content"] for _ in range(51)]
    decreases = sum(b < a for a, b in zip(values, values[1:]))
    assert decreases >= 45


# ── Runs ───────────────────────────────────────────────────────────────────

@pytest.mark.integration
def test_train_writes_history_and_checkpoints(tmp_path, tiny_dataset, tiny_config):
    """Test a run writes one history row per epoch plus periodic and latest checkpoints."""
    config = tiny_config.model_copy(update={"halve_every": 1})
    result = train(config, tiny_dataset, tmp_path / "run")

    run = tmp_path / "run"
    assert (run / checkpoint_filename(1)).is_file()
    assert (run / checkpoint_filename(2)).is_file()
    assert (run / LATEST_NAME).is_file()
    assert (run / HISTORY_NAME).read_text().splitlines()[0].split(",") == HISTORY_COLUMNS

    history = read_history(run / HISTORY_NAME)
    assert [r.epoch for r in history] == [0, 1]
    assert [r.step for r in history] == [2, 4]
    assert [r.lr for r in history] == [lr_schedule(e, config.base_lr, 1) for e in (0, 1)]
    assert history == result.history
    assert (result.checkpoint.epoch, result.checkpoint.step) == (2, 4)


@pytest.mark.integration
def test_max_steps_caps_generator_steps(tmp_path, tiny_dataset, tiny_config):
    """Test max_steps stops training mid-epoch."""
    config = tiny_config.model_copy(update={"max_steps": 3, "epochs": 5})
    result = train(config, tiny_dataset, tmp_path / "run")
    assert result.checkpoint.step == 3


@pytest.mark.integration
def test_identical_seeds_give_identical_checkpoints(tmp_path, tiny_dataset, tiny_config):
    """Test two runs with one seed produce bit-identical checkpoints."""
    train(tiny_config, tiny_dataset, tmp_path / "a")
    train(tiny_config, tiny_dataset, tmp_path / "b")
    assert (tmp_path / "a" / LATEST_NAME).read_bytes() == (tmp_path / "b" / LATEST_NAME).read_bytes()


@pytest.mark.integration
def test_resume_matches_uninterrupted_run(tmp_path, tiny_dataset, tiny_config):
    """Test resuming from a mid-run checkpoint replays the remaining epochs."""
    config = tiny_config.model_copy(update={"epochs": 4, "checkpoint_every": 2})
    full = train(config, tiny_dataset, tmp_path / "full")
    resumed = train(config, tiny_dataset, tmp_path / "resumed",
                    resume_from=tmp_path / "full" / checkpoint_filename(2))

    assert [r.epoch for r in resumed.history] == [2, 3]
    for a, b in zip(full.history[2:], resumed.history):
        for key in ("loss_d", "loss_g", "loss_content", "loss_per", "loss_rem"):
            assert getattr(b, key) == pytest.approx(getattr(a, key), abs=1e-5)
    for name, tensor in full.checkpoint.model.items():
        assert torch.allclose(resumed.checkpoint.model[name].float(), tensor.float(), atol=1e-5), name


@pytest.mark.integration
def test_resume_keeps_earlier_history_rows(tmp_path, tiny_dataset, tiny_config):
    """Test resuming in the same directory keeps rows of finished epochs only."""
    config = tiny_config.model_copy(update={"epochs": 4, "checkpoint_every": 2})
    run = tmp_path / "run"
    train(config, tiny_dataset, run)
    train(config, tiny_dataset, run, resume_from=run / checkpoint_filename(2))
    assert [r.epoch for r in read_history(run / HISTORY_NAME)] == [0, 1, 2, 3]


@pytest.mark.unit
def test_empty_dataset_rejected(tmp_path, tiny_config):
    """Test training on an empty dataset fails before any work."""
    generate_directory(tmp_path / "data", count=1, seed=0, size=32, test_fraction=0.0)
    empty = load_quadruple_dir(tmp_path / "data", split="test")
    with pytest.raises(DatasetError):
        train(tiny_config, empty, tmp_path / "run")
    assert not (tmp_path / "run" / LATEST_NAME).exists()


# ── Evaluation ─────────────────────────────────────────────────────────────

@pytest.mark.integration
def test_evaluate_is_deterministic_and_read_only(tiny_dataset, tiny_config):
    """Test evaluation repeats exactly and leaves the checkpoint untouched."""
    ckpt = Trainer(tiny_config).state_checkpoint()
    before = {k: v.clone() for k, v in ckpt.model.items()}
    first = evaluate(ckpt, tiny_dataset)
    second = evaluate(ckpt, tiny_dataset)
    assert first == second
    assert _same(before, ckpt.model)
    assert [s.sample_id for s in first.samples] == tiny_dataset.sample_ids
    assert all(0.0 <= s.mask_iou <= 1.0 for s in first.samples)


@pytest.mark.unit
def test_ground_truth_predictions_score_perfectly(tiny_dataset):
    """Test GT used as the prediction hits the PSNR cap and SSIM 1."""
    predictions = {item["sample_id"]: to_image(item["diffuse"]) for item in (tiny_dataset[i] for i in range(len(tiny_dataset)))}
    report = evaluate_predictions(tiny_dataset, predictions)
    assert report.mean_refine.psnr_db == 100.0
    assert report.mean_refine.ssim == pytest.approx(1.0)
    assert report.mean_input.psnr_db < 100.0
    assert report.mean_mask_iou is None


@pytest.mark.unit
def test_report_means_match_samples(tiny_dataset):
    """Test report means are arithmetic means of the rows."""
    predictions = {}
    for i in range(len(tiny_dataset)):
        item = tiny_dataset[i]
        predictions[item["sample_id"]] = np.clip(to_image(item["diffuse"]) + 0.02 * (i + 1), 0.0, 1.0)
    report = evaluate_predictions(tiny_dataset, predictions)
    assert report.mean_refine.psnr_db == pytest.approx(np.mean([s.refine.psnr_db for s in report.samples]))
    assert report.mean_input.ssim == pytest.approx(np.mean([s.input.ssim for s in report.samples]))


@pytest.mark.unit
def test_missing_prediction_names_sample(tiny_dataset):
    """Test a sample without a prediction is reported by id."""
    with pytest.raises(DatasetError, match="q00000"):
        evaluate_predictions(tiny_dataset, {})


@pytest.mark.unit
def test_eval_csv_has_mean_row(tmp_path, tiny_dataset):
    """Test the CSV report lists every sample then a mean row."""
    predictions = {item["sample_id"]: to_image(item["diffuse"]) for item in (tiny_dataset[i] for i in range(len(tiny_dataset)))}
    path = tmp_path / "report.csv"
    write_eval_csv(evaluate_predictions(tiny_dataset, predictions), path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("sample_id,input_psnr,input_ssim")
    assert [line.split(",")[0] for line in lines[1:]] == tiny_dataset.sample_ids + ["mean"]
    assert lines[-1].split(",")[5] == "100.000000"


# ── Overfit acceptance ─────────────────────────────────────────────────────

@pytest.mark.slow
def test_overfit_removes_highlights(tmp_path):
    """Test a short run on 8 samples beats the input by 3 dB, refines D_1 and lights HF on highlights."""
    generate_directory(tmp_path / "data", count=8, seed=0, size=64, test_fraction=0.0)
    dataset = load_quadruple_dir(tmp_path / "data")
    config = TrainConfig(batch_size=4, epochs=250, base_lr=5e-4, halve_every=1000,
                         image_size=64, checkpoint_every=250, max_steps=500, seed=0)
    result = train(config, dataset, tmp_path / "run")
    assert result.checkpoint.step <= 500

    report = evaluate(load_checkpoint(tmp_path / "run" / LATEST_NAME), dataset)
    assert report.mean_refine.psnr_db >= report.mean_input.psnr_db + 3.0
    assert report.mean_coarse.psnr_db > report.mean_input.psnr_db
    assert report.mean_refine.psnr_db >= report.mean_coarse.psnr_db - 0.3

    ckpt_path = tmp_path / "run" / LATEST_NAME
    model = build_from_checkpoint(load_checkpoint(ckpt_path))
    assert hf_separation(model, dataset) > 0.0

    for stage in ("coarse", "refine"):
        assert main(["remove", "--input", str(tmp_path / "data" / "q00000_A.png"), "--ckpt", str(ckpt_path),
                     "--out", str(tmp_path / f"{stage}.png"), "--stage", stage]) == EXIT_OK
    assert (tmp_path / "coarse.png").read_bytes() != (tmp_path / "refine.png").read_bytes()


@pytest.mark.unit
def test_hf_separation_of_neutral_feature():
    """Test a constant HF has no separation and samples without a usable mask are skipped."""
    model = M2Net(use_hfe=False)
    mask = torch.zeros(1, 16, 16)
    mask[:, 4:8, 4:8] = 1.0
    items = [
        {"composite": torch.rand(3, 16, 16), "mask": mask},
        {"composite": torch.rand(3, 16, 16), "mask": torch.zeros(1, 16, 16)},
    ]
    assert hf_separation(model, items) == pytest.approx(0.0, abs=1e-7)
    assert hf_separation(model, items[1:]) == 0.0
