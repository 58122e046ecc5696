"""
Command-line entry point.

    python -m m2net detect  --input IMG --ckpt CKPT --out HF.png [--tau 0.5]
    python -m m2net remove  --input IMG --ckpt CKPT --out OUT.png [--stage coarse|refine]
    python -m m2net video   --frames-dir DIR --ckpt CKPT --out-dir DIR [--workers N]
    python -m m2net synth   --out-dir DIR [--count 8] [--seed 0] [--size 64]
    python -m m2net train   --data DIR --out-dir DIR [TrainConfig flags] [--no-hfe --no-cha --no-ha --no-ba]
    python -m m2net eval    --data DIR (--ckpt CKPT | --predictions DIR) --out REPORT.csv

Every subcommand accepts --config FILE with `key=value` lines (keys are the
option names, `-` or `_`); flags given on the command line win. The last
stdout line is `RESULT {json}`.

Exit codes: 0 ok, 2 usage, 3 I/O / dataset / image format, 4 checkpoint.
"""
import argparse
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from m2net.config import settings
from m2net.errors import CheckpointError, M2NetError
from m2net.imaging import load_image, load_mask, save_image, save_mask, to_image
from m2net.model import infer
from m2net.schemas import EvalReport, LossWeights, TrainConfig
from m2net.synth import generate_directory, load_quadruple_dir
from m2net.training import (
    build_from_checkpoint,
    evaluate,
    evaluate_predictions,
    load_training_checkpoint,
    train,
    write_eval_csv,
)

logger = logging.getLogger("m2net.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4


class UsageError(Exception):
    """Bad or missing options after the config overlay is applied."""


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


class CommandSpec:
    """Options of one subcommand: defaults, converters and required names."""

    def __init__(self, parser: argparse.ArgumentParser, handler: Callable[[Dict[str, Any]], Dict[str, Any]]):
        self.parser = parser
        self.handler = handler
        self.defaults: Dict[str, Any] = {}
        self.converters: Dict[str, Callable[[str], Any]] = {}
        self.choices: Dict[str, List[str]] = {}
        self.required: List[str] = []
        parser.add_argument("--config", dest="config", help="key=value file overlaid under the flags")

    def option(self, flag: str, type: Callable[[str], Any] = str, default: Any = None,
               required: bool = False, choices: Optional[List[str]] = None, help: Optional[str] = None) -> None:
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, type=type, choices=choices, help=help)
        self.defaults[dest] = default
        self.converters[dest] = type
        if choices:
            self.choices[dest] = choices
        if required:
            self.required.append(dest)

    def switch(self, flag: str, default: bool = False, help: Optional[str] = None) -> None:
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, action="store_true", help=help)
        self.defaults[dest] = default
        self.converters[dest] = _parse_bool

    def resolve(self, flags: Dict[str, Any], overlay: Dict[str, str]) -> Dict[str, Any]:
        """Defaults, then the config file, then explicit flags."""
        resolved = dict(self.defaults)
        for key, raw in overlay.items():
            if key not in self.converters:
                raise UsageError(f"unknown config key: {key}")
            try:
                value = self.converters[key](raw)
            except ValueError as e:
                raise UsageError(f"config key {key}: {e}")
            if key in self.choices and value not in self.choices[key]:
                raise UsageError(f"config key {key}: {value!r} is not one of {self.choices[key]}")
            resolved[key] = value
        resolved.update({k: v for k, v in flags.items() if k in self.defaults})
        missing = [k for k in self.required if resolved.get(k) is None]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
        return resolved


def read_config_file(path: str) -> Dict[str, str]:
    """Parse `key=value` lines; blank lines and # comments are skipped."""
    overlay = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        overlay[key.strip().replace("-", "_")] = value.strip()
    return overlay


def _frame_key(path: Path):
    numbers = re.findall(r"\d+", path.stem)
    return (int(numbers[-1]) if numbers else float("inf"), path.name)


# ===== Subcommands =====

def cmd_detect(o: Dict[str, Any]) -> Dict[str, Any]:
    model = build_from_checkpoint(load_training_checkpoint(o["ckpt"]), tau=o["tau"])
    out = infer(model, load_image(o["input"]))
    hf_path = Path(o["out"])
    mask_path = hf_path.with_suffix(".mask.png")
    save_image(to_image(out.hf), hf_path)
    save_mask(out.mask[0, 0], mask_path)
    logger.info(f"Wrote highlight feature {hf_path} and mask {mask_path}")
    return {"hf": str(hf_path), "mask": str(mask_path), "mask_fraction": float(out.mask.mean())}


def cmd_remove(o: Dict[str, Any]) -> Dict[str, Any]:
    model = build_from_checkpoint(load_training_checkpoint(o["ckpt"]))
    image = load_image(o["input"])
    out = infer(model, image)
    result = out.d1 if o["stage"] == "coarse" else out.d2
    save_image(to_image(result), o["out"])
    logger.info(f"Wrote {o['stage']} output {o['out']}")
    return {"out": str(o["out"]), "stage": o["stage"], "height": image.shape[0], "width": image.shape[1]}


def cmd_video(o: Dict[str, Any]) -> Dict[str, Any]:
    frames_dir = Path(o["frames_dir"])
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory not found: {frames_dir}")
    frames = []
    for path in frames_dir.iterdir():
        if not path.is_file():
            continue
        if path.suffix.lower() != ".png":
            logger.warning(f"Skipping non-PNG file {path.name}")
            continue
        frames.append(path)
    if not frames:
        raise UsageError(f"no PNG frames in {frames_dir}")
    frames.sort(key=_frame_key)

    model = build_from_checkpoint(load_training_checkpoint(o["ckpt"]))
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(path: Path) -> str:
        out = infer(model, load_image(path))
        save_image(to_image(out.d2), out_dir / path.name)
        return path.name

    with ThreadPoolExecutor(max_workers=max(1, o["workers"])) as executor:
        names = list(executor.map(process, frames))
    logger.info(f"Processed {len(names)} frames into {out_dir}")
    return {"frames": len(names), "out_dir": str(out_dir), "order": names}


def cmd_synth(o: Dict[str, Any]) -> Dict[str, Any]:
    if o["count"] <= 0:
        raise UsageError("--count must be positive")
    if not 0.0 <= o["test_fraction"] < 1.0:
        raise UsageError("--test-fraction must lie in [0, 1)")
    manifest = generate_directory(o["out_dir"], o["count"], o["seed"], o["size"], o["test_fraction"])
    return {
        "out_dir": str(o["out_dir"]),
        "count": len(manifest.entries),
        "train": len(manifest.select("train").entries),
        "test": len(manifest.select("test").entries),
    }


def _train_config(o: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        batch_size=o["batch_size"],
        epochs=o["epochs"],
        base_lr=o["base_lr"],
        halve_every=o["halve_every"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        seed=o["seed"],
        image_size=o["image_size"],
        checkpoint_every=o["checkpoint_every"],
        max_steps=o["max_steps"],
        tau=o["tau"],
        patch_len=o["patch_len"],
        use_hfe=not o["no_hfe"],
        use_cha=not o["no_cha"],
        use_ha=not o["no_ha"],
        use_ba=not o["no_ba"],
        weights=LossWeights(lambda_g=o["lambda_g"], lambda_content=o["lambda_content"], lambda_per=o["lambda_per"]),
    )


def cmd_train(o: Dict[str, Any]) -> Dict[str, Any]:
    config = _train_config(o)
    split = None if o["split"] == "all" else o["split"]
    dataset = load_quadruple_dir(o["data"], split=split, image_size=config.image_size)
    result = train(config, dataset, o["out_dir"], resume_from=o["resume"])
    last = result.history[-1] if result.history else None
    return {
        "ablation": config.ablation_name(),
        "epochs": result.checkpoint.epoch,
        "steps": result.checkpoint.step,
        "checkpoint": str(result.checkpoint_path),
        "final": last.model_dump(exclude={"epoch", "step"}) if last else None,
    }


def _print_summary(report: EvalReport) -> None:
    print(f"{'':8}{'PSNR (dB)':>12}{'SSIM':>10}")
    for label, metrics in (("input", report.mean_input), ("coarse", report.mean_coarse), ("refine", report.mean_refine)):
        print(f"{label:8}{metrics.psnr_db:12.3f}{metrics.ssim:10.4f}")
    if report.mean_mask_iou is not None:
        print(f"mask IoU {report.mean_mask_iou:.4f}")


def cmd_eval(o: Dict[str, Any]) -> Dict[str, Any]:
    if (o["ckpt"] is None) == (o["predictions"] is None):
        raise UsageError("give exactly one of --ckpt and --predictions")
    split = None if o["split"] == "all" else o["split"]

    if o["ckpt"] is not None:
        ckpt = load_training_checkpoint(o["ckpt"])
        size = ckpt.train_config().image_size
        report = evaluate(ckpt, load_quadruple_dir(o["data"], split=split, image_size=size), tau=o["tau"])
    else:
        dataset = load_quadruple_dir(o["data"], split=split)
        pred_dir = Path(o["predictions"])
        predictions, masks = {}, {}
        for sample_id in dataset.sample_ids:
            predictions[sample_id] = load_image(pred_dir / f"{sample_id}.png")
            mask_path = pred_dir / f"{sample_id}.mask.png"
            if mask_path.is_file():
                masks[sample_id] = load_mask(mask_path)
        report = evaluate_predictions(dataset, predictions, masks)

    write_eval_csv(report, o["out"])
    _print_summary(report)
    return {
        "report": str(o["out"]),
        "samples": len(report.samples),
        "psnr": {"input": report.mean_input.psnr_db, "coarse": report.mean_coarse.psnr_db, "refine": report.mean_refine.psnr_db},
        "ssim": {"input": report.mean_input.ssim, "coarse": report.mean_coarse.ssim, "refine": report.mean_refine.ssim},
        "mask_iou": report.mean_mask_iou,
    }


# ===== Parser =====

def build_parser() -> "tuple[argparse.ArgumentParser, Dict[str, CommandSpec]]":
    parser = argparse.ArgumentParser(prog="m2net", description="Specular highlight detection and removal")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: Dict[str, CommandSpec] = {}

    def command(name: str, handler, help: str) -> CommandSpec:
        spec = CommandSpec(sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS), handler)
        commands[name] = spec
        return spec

    c = command("detect", cmd_detect, "write the highlight feature image and its binarized mask")
    c.option("--input", required=True, help="input PNG")
    c.option("--ckpt", required=True, help="checkpoint file")
    c.option("--out", required=True,
             help="highlight feature PNG; the mask is written next to it as <stem>.mask.png (hf.png -> hf.mask.png)")
    c.option("--tau", type=float, default=settings.DEFAULT_TAU, help="binarization threshold")

    c = command("remove", cmd_remove, "write the highlight-free image")
    c.option("--input", required=True)
    c.option("--ckpt", required=True)
    c.option("--out", required=True)
    c.option("--stage", default="refine", choices=["coarse", "refine"])

    c = command("video", cmd_video, "remove highlights from a directory of PNG frames")
    c.option("--frames-dir", required=True)
    c.option("--ckpt", required=True)
    c.option("--out-dir", required=True)
    c.option("--workers", type=int, default=settings.VIDEO_WORKERS)

    c = command("synth", cmd_synth, "generate a synthetic quadruple directory")
    c.option("--out-dir", required=True)
    c.option("--count", type=int, default=8)
    c.option("--seed", type=int, default=0)
    c.option("--size", type=int, default=64)
    c.option("--test-fraction", type=float, default=0.25)

    defaults = TrainConfig()
    toggles = settings.get_ablation_toggles()
    c = command("train", cmd_train, "train the removal model")
    c.option("--data", required=True, help="quadruple directory")
    c.option("--out-dir", required=True, help="checkpoint and history directory")
    c.option("--resume", help="checkpoint to resume from")
    c.option("--split", default="train", choices=["train", "test", "all"])
    c.option("--batch-size", type=int, default=defaults.batch_size)
    c.option("--epochs", type=int, default=defaults.epochs)
    c.option("--base-lr", type=float, default=defaults.base_lr)
    c.option("--halve-every", type=int, default=defaults.halve_every)
    c.option("--beta1", type=float, default=defaults.beta1)
    c.option("--beta2", type=float, default=defaults.beta2)
    c.option("--seed", type=int, default=defaults.seed)
    c.option("--image-size", type=int, default=defaults.image_size)
    c.option("--checkpoint-every", type=int, default=settings.CHECKPOINT_EVERY)
    c.option("--max-steps", type=int)
    c.option("--tau", type=float, default=settings.DEFAULT_TAU)
    c.option("--patch-len", type=int, default=settings.PATCH_LEN)
    c.option("--lambda-g", type=float, default=defaults.weights.lambda_g)
    c.option("--lambda-content", type=float, default=defaults.weights.lambda_content)
    c.option("--lambda-per", type=float, default=defaults.weights.lambda_per)
    for toggle in ("hfe", "cha", "ha", "ba"):
        c.switch(f"--no-{toggle}", default=f"no-{toggle}" in toggles)

    c = command("eval", cmd_eval, "evaluate a checkpoint or a directory of predictions")
    c.option("--data", required=True)
    c.option("--ckpt")
    c.option("--predictions", help="directory of <id>.png predictions (and optional <id>.mask.png)")
    c.option("--out", required=True, help="CSV report path")
    c.option("--split", default="all", choices=["train", "test", "all"])
    c.option("--tau", type=float)

    return parser, commands


def _result(payload: Dict[str, Any]) -> None:
    print("RESULT " + json.dumps(payload, sort_keys=True, default=str))


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    flags = vars(args)
    command = flags.pop("command")
    spec = commands[command]
    code = EXIT_OK
    try:
        overlay = read_config_file(flags.pop("config")) if "config" in flags else {}
        options = spec.resolve(flags, overlay)
        print("config: " + json.dumps({"command": command, **options}, sort_keys=True, default=str))
        summary = {"command": command, "status": "ok", **spec.handler(options)}
    except (UsageError, ValidationError) as e:
        code, summary = EXIT_USAGE, str(e)
        logger.error(f"{command}: {summary}")
    except CheckpointError as e:
        code, summary = EXIT_CHECKPOINT, str(e)
        logger.error(f"{command} failed: {summary}")
    except (OSError, M2NetError) as e:
        code, summary = EXIT_IO, str(e)
        logger.error(f"{command} failed", exc_info=True)

    if code != EXIT_OK:
        print(f"error: {summary}", file=sys.stderr)
        summary = {"command": command, "status": "error", "exit_code": code, "error": summary}
    _result(summary)
    return code


if __name__ == "__main__":
    sys.exit(main())
