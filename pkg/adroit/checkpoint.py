"""
Checkpoint format for ADROIT networks

Layout: 8-byte magic, uint32 format version, 32-byte sha256 architecture hash,
uint64 parameter count, then every parameter as little-endian float64 in
``named_parameters`` order. Loading into a module with a different
architecture is an error, never a silent partial load.
"""

import hashlib
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from adroit.core import DatasetFormatError, InvalidArgumentError
from adroit.logger import get_logger

logger = get_logger(__name__)

MAGIC = b"ADRCKPT1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")


class CheckpointError(DatasetFormatError):
    """Checkpoint bytes are truncated, foreign, or belong to another architecture"""


def architecture_hash(module: nn.Module) -> bytes:
    """sha256 over the module structure and every parameter name/shape"""
    h = hashlib.sha256()
    h.update(repr(module).encode("utf-8"))
    for name, param in module.named_parameters():
        h.update(f"{name}:{tuple(param.shape)}".encode("utf-8"))
    return h.digest()


def save_checkpoint(module: nn.Module, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vector = parameters_to_vector(module.parameters()).detach().to(torch.float64).cpu().numpy()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, architecture_hash(module), vector.size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(vector.astype("<f8").tobytes())
    logger.debug(f"💾 Checkpoint {path.name}: {vector.size} parameters")
    return path


def load_checkpoint(module: nn.Module, path: Union[str, Path]) -> nn.Module:
    """Overwrite ``module``'s parameters in place from ``path``"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, arch, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an ADROIT checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if arch != architecture_hash(module):
        raise CheckpointError(f"{path}: architecture does not match {type(module).__name__}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise CheckpointError(f"{path}: expected {count} parameters, found {len(body) // 8}")

    expected = sum(p.numel() for p in module.parameters())
    if expected != count:
        raise InvalidArgumentError(f"{path}: {count} parameters stored, module has {expected}")
    values = np.frombuffer(body, dtype="<f8")
    reference = next(module.parameters())
    with torch.no_grad():
        vector_to_parameters(torch.as_tensor(values.copy(), dtype=reference.dtype), module.parameters())
    return module
