"""Pydantic schemas for configs, manifests and reports."""
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class LossWeights(BaseModel):
    """Weights of the removal loss terms."""
    lambda_g: float = Field(1.0, ge=0.0)
    lambda_content: float = Field(10.0, ge=0.0)
    lambda_per: float = Field(1.0, ge=0.0)

    class Config:
        extra = "forbid"


class TrainConfig(BaseModel):
    """Training run configuration."""
    batch_size: int = Field(4, gt=0)
    epochs: int = Field(30, gt=0)
    base_lr: float = Field(2e-4, ge=0.0)
    halve_every: int = Field(10, gt=0)  # Epochs
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    seed: int = 0
    image_size: int = Field(64, ge=16)
    checkpoint_every: int = Field(5, gt=0)  # Epochs
    max_steps: Optional[int] = Field(None, gt=0)  # Cap on generator steps
    tau: float = Field(0.5, gt=0.0, lt=1.0)
    patch_len: int = Field(2, gt=0)

    # Ablation toggles
    use_hfe: bool = True
    use_cha: bool = True
    use_ha: bool = True
    use_ba: bool = True

    weights: LossWeights = Field(default_factory=LossWeights)

    class Config:
        extra = "forbid"

    def ablation_name(self) -> str:
        """Name of the ablation row this configuration reproduces."""
        if not self.use_hfe and not self.use_cha:
            return "baseline"
        if not self.use_cha:
            return "hfe"
        if self.use_ha and self.use_ba:
            return "full" if self.use_hfe else "cha"
        if self.use_ba:
            return "hfe+ba"
        if self.use_ha:
            return "hfe+ha"
        return "hfe+cha-empty"


class MetricReport(BaseModel):
    """PSNR/SSIM pair for one comparison."""
    psnr_db: float
    ssim: float = Field(..., ge=-1.0, le=1.0)


class SampleEval(BaseModel):
    """Per-sample evaluation row."""
    sample_id: str
    input: MetricReport
    coarse: MetricReport
    refine: MetricReport
    mask_iou: Optional[float] = Field(None, ge=0.0, le=1.0)  # None when no mask was predicted


class EvalReport(BaseModel):
    """Evaluation of input, D_1 and D_2 against the diffuse ground truth."""
    samples: List[SampleEval]
    mean_input: MetricReport
    mean_coarse: MetricReport
    mean_refine: MetricReport
    mean_mask_iou: Optional[float] = None

    @classmethod
    def from_samples(cls, samples: List[SampleEval]) -> "EvalReport":
        """Build a report whose means are arithmetic means of the sample rows."""
        def mean_of(values: List[float]) -> float:
            return sum(values) / len(values) if values else 0.0

        ious = [s.mask_iou for s in samples if s.mask_iou is not None]

        def mean_report(attr: str) -> MetricReport:
            reports = [getattr(s, attr) for s in samples]
            return MetricReport(
                psnr_db=mean_of([r.psnr_db for r in reports]),
                ssim=mean_of([r.ssim for r in reports]),
            )

        return cls(
            samples=samples,
            mean_input=mean_report("input"),
            mean_coarse=mean_report("coarse"),
            mean_refine=mean_report("refine"),
            mean_mask_iou=mean_of(ious) if ious else None,
        )


class HistoryRow(BaseModel):
    """One training step as recorded in history.csv."""
    epoch: int
    step: int
    lr: float
    loss_d: float
    loss_g: float
    loss_content: float
    loss_per: float
    loss_rem: float


class ManifestEntry(BaseModel):
    """One quadruple sample listed in manifest.txt."""
    sample_id: str
    split: Literal["train", "test"] = "train"

    def paths(self, root: Path) -> dict:
        """File paths of the four images of this sample."""
        return {
            "composite": root / f"{self.sample_id}_A.png",
            "diffuse": root / f"{self.sample_id}_D.png",
            "specular": root / f"{self.sample_id}_S.png",
            "mask": root / f"{self.sample_id}_M.png",
        }


class DatasetManifest(BaseModel):
    """Sample ids of a quadruple directory with their split tags."""
    root: Path
    entries: List[ManifestEntry] = []

    @model_validator(mode="after")
    def check_unique_ids(self):
        ids = [e.sample_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest lists duplicate sample ids")
        return self

    def select(self, split: Optional[str]) -> "DatasetManifest":
        """Return the manifest restricted to one split (None keeps everything)."""
        if split is None:
            return self
        return DatasetManifest(root=self.root, entries=[e for e in self.entries if e.split == split])
