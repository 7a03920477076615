"""Binary checkpoint archive.

Layout (all little-endian)::

    b"VCT1" | u32 version | str config_hash | str config_text
    u64 step | i64 seed
    u32 n_params, then per parameter: str name | u8 ndim | u32 dims... | f32 data
    u64 adam_step | f64 lr, beta1, beta2, eps
    per parameter (same order): u8 has_state [| f32 exp_avg | f32 exp_avg_sq]

``str`` is a u32 byte length followed by UTF-8. Sampling randomness is derived
from ``(seed, step)``, so those two integers are the complete RNG state.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VCT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    config_text: str
    step: int
    seed: int
    params: dict[str, np.ndarray]
    adam_step: int = 0
    adam_hparams: tuple[float, float, float, float] = (3e-4, 0.9, 0.999, 1e-8)
    adam_moments: dict[str, tuple[np.ndarray, np.ndarray] | None] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        _write_str(buf, self.config_hash)
        _write_str(buf, self.config_text)
        buf.write(struct.pack("<Qq", self.step, self.seed))
        buf.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            _write_str(buf, name)
            _write_array(buf, arr)
        buf.write(struct.pack("<Q4d", self.adam_step, *self.adam_hparams))
        for name in self.params:
            moments = self.adam_moments.get(name)
            if moments is None:
                buf.write(b"\x00")
            else:
                buf.write(b"\x01")
                for arr in moments:
                    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        buf = io.BytesIO(data)
        if buf.read(4) != MAGIC:
            raise CheckpointError("not a VCT1 checkpoint (bad magic)")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_hash = _read_str(buf)
        config_text = _read_str(buf)
        step, seed = struct.unpack("<Qq", buf.read(16))
        (n,) = struct.unpack("<I", buf.read(4))
        params = {}
        for _ in range(n):
            name = _read_str(buf)
            params[name] = _read_array(buf)
        adam_step, *hp = struct.unpack("<Q4d", buf.read(40))
        moments = {}
        for name, arr in params.items():
            flag = buf.read(1)
            if flag == b"\x01":
                count = arr.size * 4
                m = np.frombuffer(buf.read(count), dtype="<f4").reshape(arr.shape).copy()
                v = np.frombuffer(buf.read(count), dtype="<f4").reshape(arr.shape).copy()
                moments[name] = (m, v)
            elif flag == b"\x00":
                moments[name] = None
            else:
                raise CheckpointError("truncated optimizer state")
        if buf.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
        return cls(config_hash, config_text, step, seed, params, adam_step, tuple(hp), moments)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path, expected_hash: str | None = None, force: bool = False) -> "Checkpoint":
        ckpt = cls.from_bytes(Path(path).read_bytes())
        if expected_hash is not None and ckpt.config_hash != expected_hash and not force:
            raise CheckpointError(
                f"checkpoint config hash {ckpt.config_hash} does not match {expected_hash} (use force to override)"
            )
        return ckpt


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    head = buf.read(4)
    if len(head) != 4:
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack("<I", head)
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw.decode("utf-8")


def _write_array(buf, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = buf.read(count * 4)
    if len(raw) != count * 4:
        raise CheckpointError("truncated parameter data")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def capture(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None, config_hash: str,
            config_text: str, step: int, seed: int) -> Checkpoint:
    named = dict(model.named_parameters())
    params = {n: p.detach().cpu().numpy().astype("<f4") for n, p in named.items()}
    moments: dict[str, tuple[np.ndarray, np.ndarray] | None] = {n: None for n in named}
    adam_step = 0
    hp = (3e-4, 0.9, 0.999, 1e-8)
    if optimizer is not None:
        group = optimizer.param_groups[0]
        hp = (float(group["lr"]), float(group["betas"][0]), float(group["betas"][1]), float(group["eps"]))
        for n, p in named.items():
            state = optimizer.state.get(p)
            if state:
                moments[n] = (state["exp_avg"].detach().cpu().numpy(), state["exp_avg_sq"].detach().cpu().numpy())
                adam_step = int(state["step"])
    return Checkpoint(config_hash, config_text, step, seed, params, adam_step, hp, moments)


def restore(ckpt: Checkpoint, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> None:
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise CheckpointError(f"parameter set mismatch: {missing[:5]}")
    with torch.no_grad():
        for n, p in named.items():
            src = torch.from_numpy(ckpt.params[n])
            if src.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {n}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
    if optimizer is None:
        return
    for n, p in named.items():
        moments = ckpt.adam_moments.get(n)
        if moments is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(ckpt.adam_step)),
            "exp_avg": torch.from_numpy(moments[0]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(moments[1]).to(p.dtype),
        }
    for group in optimizer.param_groups:
        group["lr"] = ckpt.adam_hparams[0]
