"""Parameter checkpoints: the ELIPW1 container.

Layout: magic ``ELIPW1\\n``, one metadata line per parameter
(``name=... shape=... dtype=float32 offset=...``, byte offsets into the
payload), an ``end`` line, then the concatenated little-endian float32
payload. Parameters are ordered lexicographically by name so identical
parameter sets always serialize byte-identically.
"""

from __future__ import annotations

import numpy as np

from .ioutil import (FormatError, expect_magic, header_dict, parse_shape,
                     read_exact, read_header_lines, shape_str)
from .tensor import Tensor

MAGIC = b"ELIPW1\n"


def save_params(params: dict, path: str) -> None:
    """Write named parameters (Tensors or arrays) as float32."""
    names = sorted(params)
    arrays = {}
    for name in names:
        p = params[name]
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        arrays[name] = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        offset = 0
        for name in names:
            arr = arrays[name]
            f.write(f"name={name} shape={shape_str(arr.shape)} "
                    f"dtype=float32 offset={offset}\n".encode("utf-8"))
            offset += arr.nbytes
        f.write(b"end\n")
        for name in names:
            f.write(arrays[name].tobytes())


def load_params(path: str) -> dict[str, np.ndarray]:
    """Read an ELIPW1 file back into a name -> float32 array map."""
    with open(path, "rb") as f:
        expect_magic(f, MAGIC, path)
        entries = []
        for line in read_header_lines(f, path):
            fields = header_dict(line.split(" "))
            if fields.get("dtype") != "float32":
                raise FormatError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
            entries.append((fields["name"], parse_shape(fields["shape"]),
                            int(fields["offset"])))
        payload_order = sorted(entries, key=lambda e: e[2])
        out = {}
        pos = 0
        for name, shape, offset in payload_order:
            if offset != pos:
                raise FormatError(f"{path}: offset mismatch for {name!r}")
            count = int(np.prod(shape)) if shape else 1
            buf = read_exact(f, 4 * count, path)
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            pos += 4 * count
    return out


def apply_params(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy checkpoint values into an existing parameter set, shape-checked."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise FormatError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, tensor in params.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise FormatError(
                f"checkpoint shape {arr.shape} != model shape {tensor.shape} "
                f"for {name!r}")
        tensor.data = arr.astype(np.float64)
