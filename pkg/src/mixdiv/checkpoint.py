"""Checkpoint serialization.

File layout (binary): an ASCII ``MIXDIV1`` magic line, then ``key = value``
header lines, a blank line, then for each tensor a text line
``name dim0 dim1 ...`` followed by exactly prod(dims) little-endian float32
values in row-major order. Round-trips are bit-exact, so resumed training
continues on identical numbers.
"""

from __future__ import annotations

import numpy as np

from .errors import FileFormatError
from .model import ModelConfig, Parameters
from .tensor import AdamState, Tensor

MAGIC = b"MIXDIV1"


def save_checkpoint(path, header: dict[str, str],
                    tensors: dict[str, np.ndarray]) -> None:
    """Write header keys and named float32 tensors; tensor order follows
    the dict, so give it a deterministic one."""
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        for key, value in header.items():
            f.write(f"{key} = {value}\n".encode("utf-8"))
        f.write(b"\n")
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"{name} {dims}\n".encode("utf-8") if dims
                    else f"{name}\n".encode("utf-8"))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()

    def next_line(pos: int) -> tuple[bytes, int]:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise FileFormatError(f"{path}: truncated text line at byte {pos}")
        return blob[pos:end], end + 1

    line, pos = next_line(0)
    if line != MAGIC:
        raise FileFormatError(f"{path}: bad magic {line[:16]!r}")

    header: dict[str, str] = {}
    while True:
        line, pos = next_line(pos)
        if line == b"":
            break
        if b" = " not in line:
            raise FileFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.decode("utf-8").split(" = ", 1)
        header[key] = value

    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        line, pos = next_line(pos)
        parts = line.decode("utf-8").split()
        if not parts:
            raise FileFormatError(f"{path}: empty tensor descriptor")
        name, dims = parts[0], tuple(int(x) for x in parts[1:])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 4
        if pos + nbytes > len(blob):
            raise FileFormatError(
                f"{path}: tensor {name!r} needs {nbytes} bytes, file has "
                f"{len(blob) - pos}")
        flat = np.frombuffer(blob[pos:pos + nbytes], dtype="<f4")
        tensors[name] = flat.reshape(dims).copy()
        pos += nbytes
    return header, tensors


def save_model(path, config: ModelConfig, params: Parameters,
               extra: dict[str, str] | None = None,
               adam: AdamState | None = None) -> None:
    """Persist a model (and optionally optimizer moments, for bitwise
    resumable training)."""
    header = dict(config.to_dict())
    if extra:
        header.update({str(k): str(v) for k, v in extra.items()})
    tensors = {name: t.data for name, t in params.items()}
    if adam is not None:
        header["adam.step"] = str(adam.step)
        header["adam.base_lr"] = repr(adam.base_lr)
        header["adam.warmup_steps"] = str(adam.warmup_steps)
        for name in params:
            if name in adam.m:
                tensors[f"adam.m.{name}"] = adam.m[name]
                tensors[f"adam.v.{name}"] = adam.v[name]
    save_checkpoint(path, header, tensors)


def load_model(path) -> tuple[ModelConfig, Parameters, dict[str, str],
                              AdamState | None]:
    header, raw = load_checkpoint(path)
    try:
        config = ModelConfig.from_dict(header)
    except (ValueError, KeyError) as exc:
        raise FileFormatError(f"{path}: bad model config in header: {exc}") from exc

    weights = {}
    moments_m = {}
    moments_v = {}
    for name, arr in raw.items():
        if name.startswith("adam.m."):
            moments_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v."):]] = arr
        else:
            weights[name] = Tensor(arr, requires_grad=True)
    params = Parameters(config, weights)

    adam = None
    if "adam.step" in header:
        adam = AdamState(base_lr=float(header.get("adam.base_lr", 1e-3)),
                         warmup_steps=int(header.get("adam.warmup_steps", 400)),
                         step=int(header["adam.step"]),
                         m=moments_m, v=moments_v)
    return config, params, header, adam
