"""Tensor container files and hashed checkpoint directories.

A tensor container is one JSON header line followed by the raw little-endian,
row-major element bytes::

    {"dtype": "float32", "endianness": "little", "layout": "row-major", "shape": [2, 3]}\\n<24 bytes>

A checkpoint is a directory holding ``manifest.json`` and ``tensors/*.tensor``.
The manifest's ``content_hash`` is the SHA-256 of its own canonical JSON
(minus that field); each tensor entry carries the SHA-256 of its file.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "vidcustom-checkpoint/1"
ROLES = ("base", "identity_adapter", "motion_adapter", "textual_identity", "lora", "reference_image")
_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "uint8": (torch.uint8, "|u1"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


class IntegrityError(RuntimeError):
    """Checkpoint content does not match its manifest."""


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def tensor_bytes(tensor: torch.Tensor) -> bytes:
    t = tensor.detach().cpu().contiguous()
    if t.dtype not in _TORCH_TO_NAME:
        raise TypeError(f"unsupported dtype {t.dtype}")
    name = _TORCH_TO_NAME[t.dtype]
    header = {"dtype": name, "endianness": "little", "layout": "row-major", "shape": list(t.shape)}
    payload = t.numpy().astype(_DTYPES[name][1], copy=False).tobytes(order="C")
    return json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def tensor_from_bytes(data: bytes) -> torch.Tensor:
    nl = data.find(b"\n")
    if nl < 0:
        raise IntegrityError("tensor container has no header line")
    header = json.loads(data[:nl])
    if header.get("layout") != "row-major" or header.get("endianness") != "little":
        raise IntegrityError(f"unsupported container layout {header}")
    torch_dtype, np_dtype = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    payload = data[nl + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
    if len(payload) != expected:
        raise IntegrityError(f"payload is {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return torch.from_numpy(arr).to(torch_dtype)


def save_tensor(path, tensor: torch.Tensor) -> None:
    _atomic_write_bytes(Path(path), tensor_bytes(tensor))


def load_tensor(path) -> torch.Tensor:
    return tensor_from_bytes(Path(path).read_bytes())


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_sha256(tensor: torch.Tensor) -> str:
    return sha256_bytes(tensor_bytes(tensor))


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class Checkpoint:
    tensors: dict
    roles: dict
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    content_hash: str = ""

    def by_role(self, role: str) -> dict:
        return {k: v for k, v in self.tensors.items() if self.roles[k] == role}


def save_checkpoint(path, tensors: dict, roles, config=None, meta=None) -> Checkpoint:
    """Write a checkpoint directory atomically (temp dir, then rename).

    ``roles`` is either one role for every tensor or a name -> role mapping.
    """
    path = Path(path)
    if isinstance(roles, str):
        roles = {k: roles for k in tensors}
    config = dict(config or {})
    meta = dict(meta or {})
    entries = {}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / "tensors").mkdir()
        for i, name in enumerate(sorted(tensors)):
            role = roles[name]
            if role not in ROLES:
                raise ValueError(f"unknown tensor role {role!r}")
            data = tensor_bytes(tensors[name])
            fname = f"tensors/{i:05d}.tensor"
            (tmp / fname).write_bytes(data)
            t = tensors[name]
            entries[name] = {
                "file": fname, "role": role, "dtype": _TORCH_TO_NAME[t.dtype],
                "shape": list(t.shape), "sha256": sha256_bytes(data),
            }
        manifest = {"format": FORMAT, "tensors": entries, "config": config, "meta": meta}
        manifest["content_hash"] = sha256_bytes(_canonical(manifest))
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return Checkpoint(dict(tensors), dict(roles), config, meta, manifest["content_hash"])


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"{path} is not a checkpoint (no manifest.json)")
    manifest = json.loads(mf.read_text())
    stored = manifest.pop("content_hash", None)
    if stored is None or sha256_bytes(_canonical(manifest)) != stored:
        raise IntegrityError(f"manifest hash mismatch in {path}")
    if manifest.get("format") != FORMAT:
        raise IntegrityError(f"unknown checkpoint format {manifest.get('format')!r}")
    manifest["content_hash"] = stored
    return manifest


def load_checkpoint(path) -> Checkpoint:
    """Load and verify every hash before returning anything."""
    path = Path(path)
    manifest = read_manifest(path)
    tensors, roles = {}, {}
    for name, entry in manifest["tensors"].items():
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise IntegrityError(f"missing tensor file for {name!r}")
        data = fpath.read_bytes()
        if sha256_bytes(data) != entry["sha256"]:
            raise IntegrityError(f"tensor {name!r} hash mismatch")
        t = tensor_from_bytes(data)
        if list(t.shape) != entry["shape"]:
            raise IntegrityError(f"tensor {name!r} shape disagrees with manifest")
        tensors[name] = t
        roles[name] = entry["role"]
    return Checkpoint(tensors, roles, manifest["config"], manifest["meta"], manifest["content_hash"])


def load_state_into(module: torch.nn.Module, tensors: dict, prefix: str = "") -> None:
    """Copy tensors into a module's state, with explicit shape errors."""
    state = module.state_dict()
    wanted = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(wanted))
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
    for k, v in wanted.items():
        if k not in state:
            raise KeyError(f"unexpected tensor {prefix}{k}")
        if tuple(state[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {prefix}{k}: checkpoint {tuple(v.shape)} vs model {tuple(state[k].shape)}")
    module.load_state_dict({k: v.to(state[k].dtype) for k, v in wanted.items()})
