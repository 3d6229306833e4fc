__all__ = [
    "softmax",
    "temperature_scale",
    "normalize_intensity",
    "write_tensor",
    "read_tensor",
    "validate_tensor",
    "TensorCheck",
    "write_case",
    "read_case",
    "list_cases",
    "derive_seed",
    "make_rng",
    "seed_everything",
    "stable_digest",
    "package_version",
]

import base64
import functools
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Final, Union

import numpy as np
import torch

from .misc import (
    ImageSlice,
    LabelMap,
    LogitMap,
    NonFiniteError,
    ProbabilityMap,
    ShapeMismatch,
    TemperatureMap,
    TensorFormatError,
    get_OODCAL_NUM_THREADS,
)

logger = logging.getLogger(__name__)

_HEADER_NAME: Final = "header.json"
_PAYLOAD_NAME: Final = "data.bin"
_DTYPES: Final = {"float32": np.dtype("<f4")}

path_type: Final = Union[str, os.PathLike]


@functools.singledispatch
def softmax(logits):
    raise NotImplementedError(f"softmax is not defined for {type(logits)!r}")


@softmax.register(np.ndarray)
def _(logits) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("softmax input contains non-finite logits")
    # channel axis is the third from the end: (C, M, N) or (B, C, M, N)
    shifted = logits - logits.max(axis=-3, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-3, keepdims=True)


@softmax.register(LogitMap)
def _(logits) -> ProbabilityMap:
    return ProbabilityMap(softmax(logits.data.astype(np.float64)))


@softmax.register(torch.Tensor)
def _(logits) -> torch.Tensor:
    if not torch.isfinite(logits).all():
        raise NonFiniteError("softmax input contains non-finite logits")
    return torch.softmax(logits, dim=-3)


def temperature_scale(logits: LogitMap, temperature: TemperatureMap) -> ProbabilityMap:
    """sigma(z / T) with T broadcast over the class channels, in float64"""
    if logits.shape != temperature.shape:
        raise ShapeMismatch(
            f"logits {logits.shape} and temperature {temperature.shape} differ"
        )
    return softmax(
        LogitMap(logits.data.astype(np.float64) / temperature.data.astype(np.float64))
    )


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    low, high = image.min(), image.max()
    if high - low <= 0:
        return np.zeros_like(image)
    return (image - low) / (high - low)


def write_tensor(path: path_type, grid) -> Path:
    """
    Store grid as a tensor directory (header.json + data.bin).

    Values are cast to little-endian float32, written row-major.
    """
    path = Path(path)
    grid = np.ascontiguousarray(grid, dtype=_DTYPES["float32"])
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(grid.shape),
        "dtype": "float32",
        "order": "row-major",
        "endianness": "little",
    }
    # single writer per path: write aside, then swap in
    tmp = path / (_PAYLOAD_NAME + ".tmp")
    tmp.write_bytes(grid.tobytes(order="C"))
    os.replace(tmp, path / _PAYLOAD_NAME)
    (path / _HEADER_NAME).write_text(json.dumps(header, sort_keys=True))
    return path


def _read_header(path: Path) -> dict:
    try:
        header = json.loads((path / _HEADER_NAME).read_text())
    except FileNotFoundError as e:
        raise TensorFormatError(f"{path} has no {_HEADER_NAME}") from e
    if header.get("dtype") not in _DTYPES:
        raise TensorFormatError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "row-major") != "row-major":
        raise TensorFormatError("only row-major payloads are supported")
    if header.get("endianness", "little") != "little":
        raise TensorFormatError("only little-endian payloads are supported")
    return header


def read_tensor(path: path_type) -> np.ndarray:
    path = Path(path)
    header = _read_header(path)
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    payload = (path / _PAYLOAD_NAME).read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: header shape {shape} needs {expected} bytes, payload has {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)


@dataclass(frozen=True)
class TensorCheck:
    shape: tuple
    dtype: str
    finite: bool


def validate_tensor(path: path_type) -> TensorCheck:
    grid = read_tensor(path)
    return TensorCheck(
        shape=grid.shape, dtype="float32", finite=bool(np.all(np.isfinite(grid)))
    )


def _slice_dir(root: Path, case_id: str, part: str, slice_index: int) -> Path:
    return root / case_id / part / ("%03d" % slice_index)


def write_case(root: path_type, slices, image_part: str = "image") -> list:
    """write [(ImageSlice, LabelMap|None), ...] in the <case>/image|label/<idx> layout"""
    root = Path(root)
    written = []
    for image, label in slices:
        written.append(
            write_tensor(
                _slice_dir(root, image.case_id, image_part, image.slice_index),
                image.data,
            )
        )
        if label is not None:
            written.append(
                write_tensor(
                    _slice_dir(root, image.case_id, "label", image.slice_index),
                    label.data,
                )
            )
    return written


def read_case(root: path_type, case_id: str, image_part: str = "image") -> list:
    root = Path(root)
    image_root = root / case_id / image_part
    if not image_root.is_dir():
        raise FileNotFoundError(f"no {image_part} slices for case {case_id}")
    pairs = []
    for slice_dir in sorted(p for p in image_root.iterdir() if p.is_dir()):
        slice_index = int(slice_dir.name)
        image = ImageSlice(read_tensor(slice_dir), case_id, slice_index)
        label = LabelMap(read_tensor(_slice_dir(root, case_id, "label", slice_index)))
        if image.shape != label.shape:
            raise ShapeMismatch(f"{case_id}/{slice_index}: image and label differ")
        pairs.append((image, label))
    return pairs


def list_cases(root: path_type) -> list:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "image").is_dir())


def stable_digest(*parts, hash_algo: str = "sha256") -> str:
    hasher = hashlib.new(hash_algo)
    for part in parts:
        if isinstance(part, np.ndarray):
            hasher.update(str(part.shape).encode("ascii"))
            hasher.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, bytes):
            hasher.update(part)
        else:
            hasher.update(json.dumps(part, sort_keys=True, default=str).encode("utf8"))
        hasher.update(b"\x00")
    return base64.urlsafe_b64encode(hasher.digest()).decode("ascii").rstrip("=")


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(
        json.dumps(parts, default=str).encode("utf8")
    ).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    threads = get_OODCAL_NUM_THREADS()
    if threads:
        torch.set_num_threads(threads)


@functools.lru_cache(maxsize=1)
def package_version() -> str:
    try:
        return version("django-ood-calibration")
    except PackageNotFoundError:
        return "0+unknown"
