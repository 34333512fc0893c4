"""Parameters, initialization, Adam and the checkpoint container."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

INIT_STD = 0.02


class ParamSet:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, items=()):
        self._items: dict[str, Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise DuplicateNameError(f"parameter {name!r} already defined")
        t.requires_grad = True
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def n_elements(self) -> int:
        return sum(t.size for t in self._items.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._items.items()}

    def copy(self) -> "ParamSet":
        return ParamSet((k, Tensor(t.data.copy())) for k, t in self._items.items())

    def load_arrays(self, arrays: "ParamSet | dict[str, np.ndarray]") -> None:
        """Overwrite values in place from a checkpoint with the identical schema."""
        src = arrays.arrays() if isinstance(arrays, ParamSet) else arrays
        if list(src) != self.names():
            missing = sorted(set(self.names()) - set(src))
            extra = sorted(set(src) - set(self.names()))
            raise SchemaError(f"parameter schema mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in src.items():
            dst = self._items[name]
            if arr.shape != dst.shape:
                raise SchemaError(f"shape mismatch for {name}: {arr.shape} vs {dst.shape}")
        # every entry is validated before any value is written, so a bad schema never half-loads
        for name, arr in src.items():
            dst = self._items[name]
            dst.data = np.array(arr, dtype=dst.dtype)


class ParamBuilder:
    """Creates named conv parameters with N(0, 0.02) weights and zero biases."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params = ParamSet()

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        w = self.rng.normal(0.0, INIT_STD, size=(cout, cin, k, k)).astype(np.float32)
        self.params.add(f"{name}.weight", Tensor(w))
        if bias:
            self.params.add(f"{name}.bias", Tensor(np.zeros(cout, dtype=np.float32)))

    def conv_transpose(self, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        w = self.rng.normal(0.0, INIT_STD, size=(cin, cout, k, k)).astype(np.float32)
        self.params.add(f"{name}.weight", Tensor(w))
        if bias:
            self.params.add(f"{name}.bias", Tensor(np.zeros(cout, dtype=np.float32)))


def init_params(layers: list[tuple], seed: int) -> ParamSet:
    """Build a ParamSet from a geometry list.

    Each entry is ``(kind, name, cin, cout, kernel)`` with kind ``"conv"`` or
    ``"conv_transpose"``.
    """
    b = ParamBuilder(seed)
    for kind, name, cin, cout, k in layers:
        getattr(b, kind)(name, cin, cout, k)
    return b.params


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class MissingGradientError(RuntimeError):
    pass


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {len(missing)} parameter(s), first: {missing[0]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
MAGIC = b"CKPT"
ADAM_MAGIC = b"ADAM"
VERSION = 1
_HYPER = "__adam_hyper__"


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    """Bad magic bytes or unsupported version."""


class TruncatedError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


class SchemaError(CheckpointError):
    """Stored parameter names or shapes disagree with the model."""


def _write_block(buf: io.BytesIO, magic: bytes, entries: list[tuple[str, np.ndarray]]) -> None:
    buf.write(magic)
    buf.write(struct.pack("<BI", VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _hyper_entry(state: AdamState) -> np.ndarray:
    # float64 values bit-cast into the float32 payload so they round-trip exactly
    vals = np.array([state.t, state.lr, state.beta1, state.beta2, state.eps], dtype="<f8")
    return vals.view("<f4")


def save_checkpoint(params: ParamSet, path, state: AdamState | None = None) -> None:
    buf = io.BytesIO()
    _write_block(buf, MAGIC, [(n, t.data) for n, t in params])
    if state is not None:
        entries = [(_HYPER, _hyper_entry(state))]
        for name in params.names():
            if name in state.m:
                entries.append((f"m/{name}", state.m[name]))
                entries.append((f"v/{name}", state.v[name]))
        _write_block(buf, ADAM_MAGIC, entries)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_block(r: _Reader, magic: bytes) -> list[tuple[str, np.ndarray]]:
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version, count = r.unpack("<BI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"parameter name is not UTF-8: {exc}") from None
        if name in seen:
            raise DuplicateNameError(f"duplicate parameter name {name!r}")
        seen.add(name)
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name}")
        entries.append((name, np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)))
    return entries


def load_checkpoint(path) -> tuple[ParamSet, AdamState | None]:
    """Parse a checkpoint file completely before returning anything."""
    r = _Reader(Path(path).read_bytes())
    params = ParamSet((n, Tensor(a)) for n, a in _read_block(r, MAGIC))
    state = None
    if r.pos < len(r.blob):
        entries = dict(_read_block(r, ADAM_MAGIC))
        if _HYPER not in entries:
            raise FormatError("optimizer block lacks hyperparameters")
        t, lr, b1, b2, eps = entries.pop(_HYPER).view("<f8").tolist()
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=int(t))
        for key, arr in entries.items():
            kind, _, name = key.partition("/")
            if kind not in ("m", "v") or name not in params:
                raise SchemaError(f"optimizer buffer {key!r} has no matching parameter")
            getattr(state, kind)[name] = arr
        if r.pos != len(r.blob):
            raise FormatError(f"{len(r.blob) - r.pos} trailing bytes after optimizer block")
    return params, state
