"""
Alternating discriminator / generator training, checkpointing and evaluation.

Each step runs one discriminator update (hinge loss on GT vs detached D_2,
both conditioned on the detached highlight feature) followed by one
generator update on the weighted removal loss. HFE parameters train with
the generator group. Data order per epoch is a permutation seeded by
(seed, epoch), so a resumed run replays the uninterrupted one.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from m2net.checkpoint import (
    LATEST_NAME,
    Checkpoint,
    checkpoint_filename,
    load_checkpoint,
    save_checkpoint,
)
from m2net.config import settings
from m2net.errors import CheckpointError, DatasetError, NonFiniteLossError
from m2net.imaging import mask_iou, psnr, ssim, to_image
from m2net.losses import (
    PerceptualExtractor,
    content_loss,
    gan_g_loss,
    hinge_d_loss,
    perceptual_loss,
    removal_loss,
)
from m2net.model import M2Net, StageOutputs, infer
from m2net.networks import PatchDiscriminator
from m2net.profiling import profile_run, profile_step
from m2net.schemas import EvalReport, HistoryRow, MetricReport, SampleEval, TrainConfig

logger = logging.getLogger("m2net.training")

HISTORY_NAME = "history.csv"
HISTORY_COLUMNS = ["epoch", "step", "lr", "L_d", "L_g", "L_content", "L_per", "L_rem"]
TOGGLES = ("use_hfe", "use_cha", "use_ha", "use_ba")


def lr_schedule(epoch: int, base: float, halve_every: int = 10) -> float:
    """Learning rate for a 0-based epoch: base * 0.5 ** (epoch // halve_every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * 0.5 ** (epoch // halve_every)


def epoch_order(n: int, seed: int, epoch: int) -> List[int]:
    """Sample order of one epoch; depends only on (n, seed, epoch)."""
    gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=gen).tolist()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[HistoryRow] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None


class Trainer:
    """Owns the networks, optimizers and progress counters of one run."""

    def __init__(self, config: TrainConfig, device: Optional[str] = None):
        self.config = config
        self.device = torch.device(device or settings.DEVICE)
        torch.manual_seed(config.seed)
        self.model = M2Net.from_config(config).to(self.device)
        self.discriminator = PatchDiscriminator().to(self.device)
        self.perceptual = PerceptualExtractor().to(self.device)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.base_lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.base_lr, betas=betas)
        self.epoch = 0  # Completed epochs
        self.step = 0   # Completed generator steps

    def set_lr(self, epoch: int) -> float:
        lr = lr_schedule(epoch, self.config.base_lr, self.config.halve_every)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def _check_finite(self, term: str, value: torch.Tensor) -> None:
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(term, float(value), self.step)

    def train_step(self, batch: Mapping[str, torch.Tensor]) -> Dict[str, float]:
        """
        One discriminator update then one generator update.

        Returns:
            Unweighted loss terms: loss_d, loss_g, loss_content, loss_per, loss_rem

        Raises:
            NonFiniteLossError: naming the first non-finite term; no update
                of the affected group is applied
        """
        img = batch["composite"].to(self.device)
        gt = batch["diffuse"].to(self.device)
        self.model.train()
        out = self.model(img)

        with profile_step("d_step"):
            loss_d = self.discriminator_step(out, gt)
        with profile_step("g_step"):
            terms = self.generator_step(out, gt)

        self.step += 1
        return {"loss_d": loss_d, **terms}

    def discriminator_step(self, out: StageOutputs, gt: torch.Tensor) -> float:
        """Hinge update of the discriminator on GT vs detached D_2; touches only discriminator state."""
        self.discriminator.train()
        hf = out.hf.detach()
        scores = self.discriminator(torch.cat([gt, out.d2.detach()]), torch.cat([hf, hf]))
        real_scores, fake_scores = scores.chunk(2)
        loss_d = hinge_d_loss(real_scores, fake_scores)
        self._check_finite("loss_d", loss_d)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()
        return float(loss_d)

    def generator_step(self, out: StageOutputs, gt: torch.Tensor) -> Dict[str, float]:
        """Removal-loss update of HFE and both generators; discriminator state is left untouched."""
        # Eval mode keeps the spectral-norm power iteration out of the generator step
        self.discriminator.eval()
        l_g = gan_g_loss(self.discriminator(out.d2, out.hf))
        l_content = content_loss(out.d1, out.d2, gt)
        l_per = perceptual_loss(out.d2, gt, self.perceptual)
        for term, value in (("loss_g", l_g), ("loss_content", l_content), ("loss_per", l_per)):
            self._check_finite(term, value)
        loss = removal_loss(l_g, l_content, l_per, self.config.weights)
        self._check_finite("loss_rem", loss.total)
        self.opt_g.zero_grad(set_to_none=True)
        loss.total.backward()
        self.opt_g.step()
        self.discriminator.zero_grad(set_to_none=True)
        return loss.terms

    def run_epoch(self, dataset: Dataset) -> Optional[HistoryRow]:
        """Train one epoch (or until max_steps); returns the epoch's mean losses."""
        epoch = self.epoch
        lr = self.set_lr(epoch)
        loader = DataLoader(dataset, batch_size=self.config.batch_size,
                            sampler=epoch_order(len(dataset), self.config.seed, epoch))
        totals: Dict[str, float] = {}
        steps = 0
        for batch in loader:
            if self.config.max_steps is not None and self.step >= self.config.max_steps:
                break
            terms = self.train_step(batch)
            for key, value in terms.items():
                totals[key] = totals.get(key, 0.0) + value
            steps += 1
            logger.debug(f"epoch {epoch} step {self.step}: " + ", ".join(f"{k}={v:.5f}" for k, v in terms.items()))
        self.epoch += 1
        if steps == 0:
            return None
        means = {k: v / steps for k, v in totals.items()}
        return HistoryRow(epoch=epoch, step=self.step, lr=lr, **means)

    # ===== State =====

    def state_checkpoint(self) -> Checkpoint:
        model = {f"generator.{k}": v.detach().clone() for k, v in self.model.state_dict().items()}
        model.update({f"discriminator.{k}": v.detach().clone() for k, v in self.discriminator.state_dict().items()})
        optimizer = {}
        for group, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for idx, param in enumerate(opt.param_groups[0]["params"]):
                state = opt.state.get(param)
                if not state:
                    continue
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    value = torch.as_tensor(state[key], dtype=torch.float32)
                    optimizer[f"{group}.{idx}.{key}"] = value.detach().cpu().clone()
        return Checkpoint(
            model=model,
            optimizer=optimizer,
            epoch=self.epoch,
            step=self.step,
            config=self.config.model_dump(mode="json"),
        )

    def load_state(self, ckpt: Checkpoint) -> None:
        """
        Restore parameters, optimizer moments and counters.

        Raises:
            CheckpointError: if the checkpoint was trained with other ablation
                toggles or its tensors do not fit the networks
        """
        saved = ckpt.train_config()
        for toggle in TOGGLES:
            if getattr(saved, toggle) != getattr(self.config, toggle):
                raise CheckpointError(f"checkpoint has {toggle}={getattr(saved, toggle)}, run has {getattr(self.config, toggle)}")
        _load_module(self.model, ckpt, "generator")
        _load_module(self.discriminator, ckpt, "discriminator")
        for group, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for idx, param in enumerate(opt.param_groups[0]["params"]):
                key = f"{group}.{idx}"
                if f"{key}.exp_avg" not in ckpt.optimizer:
                    continue
                exp_avg = ckpt.optimizer[f"{key}.exp_avg"]
                if exp_avg.shape != param.shape:
                    raise CheckpointError(f"optimizer state {key} has shape {tuple(exp_avg.shape)}, parameter has {tuple(param.shape)}")
                opt.state[param] = {
                    "step": ckpt.optimizer[f"{key}.step"].clone(),
                    "exp_avg": exp_avg.clone().to(self.device),
                    "exp_avg_sq": ckpt.optimizer[f"{key}.exp_avg_sq"].clone().to(self.device),
                }
        self.epoch = ckpt.epoch
        self.step = ckpt.step


def _load_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    try:
        module.load_state_dict(ckpt.section(prefix))
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not fit the {prefix}: {e}")


# ===== History =====

def write_history(rows: List[HistoryRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for r in rows:
            writer.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss_d), repr(r.loss_g),
                             repr(r.loss_content), repr(r.loss_per), repr(r.loss_rem)])


def read_history(path: Union[str, Path]) -> List[HistoryRow]:
    with open(path, newline="") as f:
        return [
            HistoryRow(
                epoch=int(row["epoch"]), step=int(row["step"]), lr=float(row["lr"]),
                loss_d=float(row["L_d"]), loss_g=float(row["L_g"]), loss_content=float(row["L_content"]),
                loss_per=float(row["L_per"]), loss_rem=float(row["L_rem"]),
            )
            for row in csv.DictReader(f)
        ]


# ===== Runs =====

@profile_run("train")
def train(config: TrainConfig, dataset: Dataset, out_dir: Union[str, Path],
          resume_from: Optional[Union[str, Path]] = None, device: Optional[str] = None) -> TrainResult:
    """
    Train for config.epochs epochs (or config.max_steps generator steps).

    Writes ckpt-epoch-NNNN.m2ck every config.checkpoint_every epochs,
    latest.m2ck at the end, and history.csv with one row per epoch.

    Raises:
        DatasetError: if the dataset is empty
        CheckpointError: if resume_from cannot be loaded
        OSError: on write failures
    """
    if len(dataset) == 0:
        raise DatasetError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trainer = Trainer(config, device)
    history: List[HistoryRow] = []
    if resume_from is not None:
        trainer.load_state(load_checkpoint(resume_from))
        if (out_dir / HISTORY_NAME).is_file():
            history = [r for r in read_history(out_dir / HISTORY_NAME) if r.epoch < trainer.epoch]
        logger.info(f"Resuming from {resume_from} at epoch {trainer.epoch}, step {trainer.step}")

    logger.info(f"Training '{config.ablation_name()}' on {len(dataset)} samples for {config.epochs} epochs")
    while trainer.epoch < config.epochs:
        if config.max_steps is not None and trainer.step >= config.max_steps:
            break
        row = trainer.run_epoch(dataset)
        if row is not None:
            history.append(row)
            write_history(history, out_dir / HISTORY_NAME)
            logger.info(
                f"epoch {row.epoch} lr={row.lr:g} L_d={row.loss_d:.4f} L_g={row.loss_g:.4f} "
                f"L_content={row.loss_content:.4f} L_per={row.loss_per:.4f} L_rem={row.loss_rem:.4f}"
            )
        if trainer.epoch % config.checkpoint_every == 0:
            save_checkpoint(trainer.state_checkpoint(), out_dir / checkpoint_filename(trainer.epoch))

    ckpt = trainer.state_checkpoint()
    path = save_checkpoint(ckpt, out_dir / LATEST_NAME)
    return TrainResult(checkpoint=ckpt, history=history, checkpoint_path=path)


def build_from_checkpoint(ckpt: Checkpoint, tau: Optional[float] = None) -> M2Net:
    """Instantiate the removal model stored in a checkpoint, in eval mode."""
    config = ckpt.train_config()
    if tau is not None:
        config = TrainConfig(**{**config.model_dump(), "tau": tau})
    model = M2Net.from_config(config)
    _load_module(model, ckpt, "generator")
    return model.eval()


def _metrics(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    return MetricReport(psnr_db=psnr(pred, gt), ssim=ssim(pred, gt))


def evaluate(ckpt: Checkpoint, dataset: Dataset, tau: Optional[float] = None) -> EvalReport:
    """
    PSNR/SSIM of the input, D_1 and D_2 against GT plus mask IoU of the binarized HF.

    Parameters are not modified; results are deterministic.
    """
    model = build_from_checkpoint(ckpt, tau)
    samples = []
    for i in range(len(dataset)):
        item = dataset[i]
        composite, gt = to_image(item["composite"]), to_image(item["diffuse"])
        out = infer(model, composite)
        samples.append(SampleEval(
            sample_id=item["sample_id"],
            input=_metrics(composite, gt),
            coarse=_metrics(to_image(out.d1), gt),
            refine=_metrics(to_image(out.d2), gt),
            mask_iou=mask_iou(out.mask[0, 0], item["mask"][0]),
        ))
    report = EvalReport.from_samples(samples)
    logger.info(f"Evaluated {len(samples)} samples: D_2 PSNR {report.mean_refine.psnr_db:.2f} dB, SSIM {report.mean_refine.ssim:.4f}")
    return report


def hf_separation(model: M2Net, dataset: Dataset) -> float:
    """
    Mean HF intensity inside the GT highlight mask minus the mean outside it.

    Per-sample differences are averaged; samples whose mask is empty or full
    are skipped. Returns 0.0 when no sample qualifies.
    """
    gaps = []
    for i in range(len(dataset)):
        item = dataset[i]
        hf = infer(model, to_image(item["composite"])).hf[0].mean(dim=0)
        inside = item["mask"][0] > 0.5
        if inside.all() or not inside.any():
            continue
        gaps.append((hf[inside].mean() - hf[~inside].mean()).item())
    return float(np.mean(gaps)) if gaps else 0.0


def evaluate_predictions(dataset: Dataset, predictions: Mapping[str, np.ndarray],
                         masks: Optional[Mapping[str, np.ndarray]] = None) -> EvalReport:
    """
    Evaluate externally produced highlight-free images (used as both D_1 and D_2).

    Raises:
        DatasetError: if a sample has no prediction
    """
    samples = []
    for i in range(len(dataset)):
        item = dataset[i]
        sample_id = item["sample_id"]
        if sample_id not in predictions:
            raise DatasetError("no prediction", sample_id=sample_id)
        composite, gt = to_image(item["composite"]), to_image(item["diffuse"])
        pred = _metrics(np.asarray(predictions[sample_id], dtype=np.float32), gt)
        iou = None
        if masks is not None and sample_id in masks:
            iou = mask_iou(masks[sample_id], item["mask"][0])
        samples.append(SampleEval(sample_id=sample_id, input=_metrics(composite, gt), coarse=pred, refine=pred, mask_iou=iou))
    return EvalReport.from_samples(samples)


def write_eval_csv(report: EvalReport, path: Union[str, Path]) -> None:
    """Per-sample rows followed by a `mean` row."""
    def fmt(value: Optional[float]) -> str:
        return "" if value is None else f"{value:.6f}"

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "input_psnr", "input_ssim", "coarse_psnr", "coarse_ssim",
                         "refine_psnr", "refine_ssim", "mask_iou"])
        rows = [(s.sample_id, s.input, s.coarse, s.refine, s.mask_iou) for s in report.samples]
        rows.append(("mean", report.mean_input, report.mean_coarse, report.mean_refine, report.mean_mask_iou))
        for sample_id, inp, coarse, refine, iou in rows:
            writer.writerow([sample_id, fmt(inp.psnr_db), fmt(inp.ssim), fmt(coarse.psnr_db), fmt(coarse.ssim),
                             fmt(refine.psnr_db), fmt(refine.ssim), fmt(iou)])


def load_training_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Load a checkpoint and validate its config snapshot."""
    ckpt = load_checkpoint(path)
    ckpt.train_config()
    return ckpt
