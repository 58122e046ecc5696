"""
Binary checkpoint format.

Layout (little-endian throughout):

    magic      9 bytes  b"M2NETCKPT"
    version    u16
    count      u32      number of records
    record * count:
        name_len  u16, name  utf-8
        dtype     u8       1 = float32, 2 = int64, 3 = uint8
        rank      u8, dims u32 * rank
        nbytes    u64, payload

Record names are `model.<module>.<tensor>`, `optim.<group>.<index>.<moment>`
and `meta.epoch`, `meta.step`, `meta.config` (UTF-8 JSON as uint8).
Records are written in insertion order, so load -> save reproduces the
input bytes.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch

from m2net.errors import CheckpointError
from m2net.schemas import TrainConfig

logger = logging.getLogger("m2net.checkpoint")

MAGIC = b"M2NETCKPT"
FORMAT_VERSION = 1
LATEST_NAME = "latest.m2ck"

# dtype code -> (torch dtype, numpy little-endian dtype)
DTYPES = {
    1: (torch.float32, np.dtype("<f4")),
    2: (torch.int64, np.dtype("<i8")),
    3: (torch.uint8, np.dtype("u1")),
}
DTYPE_CODES = {torch_dtype: code for code, (torch_dtype, _) in DTYPES.items()}


@dataclass
class Checkpoint:
    """Parameters, optimizer moments, progress counters and the config snapshot of a run."""
    model: Dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer: Dict[str, torch.Tensor] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.config)
        except ValueError as e:
            raise CheckpointError(f"checkpoint config is not a valid TrainConfig: {e}")

    def section(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Model tensors under `prefix.` with the prefix stripped (a state_dict)."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.model.items() if k.startswith(head)}


def checkpoint_filename(epoch: int) -> str:
    return f"ckpt-epoch-{epoch:04d}.m2ck"


# ===== Encoding =====

def _encode_record(name: str, tensor: torch.Tensor) -> bytes:
    t = tensor.detach().cpu().contiguous()
    if t.dtype not in DTYPE_CODES:
        raise CheckpointError(f"record {name}: unsupported dtype {t.dtype}")
    code = DTYPE_CODES[t.dtype]
    payload = t.numpy().astype(DTYPES[code][1], copy=False).tobytes()
    raw_name = name.encode("utf-8")
    header = struct.pack("<H", len(raw_name)) + raw_name
    header += struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + struct.pack("<Q", len(payload)) + payload


def _records(ckpt: Checkpoint):
    for name, tensor in ckpt.model.items():
        yield f"model.{name}", tensor
    for name, tensor in ckpt.optimizer.items():
        yield f"optim.{name}", tensor
    yield "meta.epoch", torch.tensor(ckpt.epoch, dtype=torch.int64)
    yield "meta.step", torch.tensor(ckpt.step, dtype=torch.int64)
    config = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    yield "meta.config", torch.frombuffer(bytearray(config), dtype=torch.uint8)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records = [_encode_record(name, tensor) for name, tensor in _records(ckpt)]
    head = MAGIC + struct.pack("<HI", ckpt.version, len(records))
    return head + b"".join(records)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: on bad magic, an unsupported version, unknown dtype
            codes, truncation or trailing bytes
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an m2net checkpoint (bad magic)")
    version, count = reader.unpack("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    ckpt = Checkpoint(version=version)
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, rank = reader.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"record {name}: unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I")
        (nbytes,) = reader.unpack("<Q")
        torch_dtype, np_dtype = DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize:
            raise CheckpointError(f"record {name}: payload of {nbytes} bytes does not match dims {dims}")
        array = np.frombuffer(reader.take(nbytes), dtype=np_dtype).reshape(dims)
        tensor = torch.from_numpy(array.astype(np_dtype.newbyteorder("="), copy=True))

        section, _, key = name.partition(".")
        if section == "model":
            ckpt.model[key] = tensor
        elif section == "optim":
            ckpt.optimizer[key] = tensor
        elif name == "meta.epoch":
            ckpt.epoch = int(tensor)
        elif name == "meta.step":
            ckpt.step = int(tensor)
        elif name == "meta.config":
            ckpt.config = json.loads(array.tobytes().decode("utf-8"))
        else:
            raise CheckpointError(f"unknown record {name}")

    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} trailing bytes after last record")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Saved checkpoint {path} (epoch {ckpt.epoch}, step {ckpt.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint file.

    Raises:
        CheckpointError: if the file is missing, unreadable or malformed;
            the message names the path
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}")
    try:
        return decode_checkpoint(data)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}")
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})")
