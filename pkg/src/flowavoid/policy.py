"""Recurrent flow-to-acceleration policy and its checkpoint format.

Architecture: flattened dual flow + proprioception -> dense tanh encoder ->
GRU cell -> dense tanh head -> ``a_max * tanh`` output.  Parameters live in
one flat float32 vector described by a layout table so the optimizer and the
checkpoint code can treat them as a single array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolation,
)
from .flow import OBS_HW

PROPRIO_DIM = 9
CKPT_MAGIC = b"FLPC"
CKPT_VERSION = 1


@dataclass
class ArchConfig:
    """Network shape.

    ``central=False`` drops the central-crop flow from the input (ablation).
    """

    encoder: list[int] = field(default_factory=lambda: [128])
    hidden: int = 64
    head: list[int] = field(default_factory=lambda: [64])
    a_max: float = 10.0
    central: bool = True
    proprio: int = PROPRIO_DIM
    out_init_scale: float = 0.1

    def validate(self):
        if any(w < 1 for w in self.encoder + self.head) or self.hidden < 1:
            raise ContractViolation("layer widths must be >= 1")
        if self.a_max <= 0:
            raise ContractViolation("a_max must be > 0")

    @property
    def flow_dim(self) -> int:
        return OBS_HW[0] * OBS_HW[1] * 2

    @property
    def input_dim(self) -> int:
        return self.flow_dim * (2 if self.central else 1) + self.proprio

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        width = self.input_dim
        for i, w in enumerate(self.encoder):
            shapes += [(f"enc{i}.W", (width, w)), (f"enc{i}.b", (w,))]
            width = w
        H = self.hidden
        shapes += [("gru.Wx", (width, 3 * H)), ("gru.Wh", (H, 3 * H)), ("gru.bx", (3 * H,)), ("gru.bh", (3 * H,))]
        width = H
        for i, w in enumerate(self.head):
            shapes += [(f"head{i}.W", (width, w)), (f"head{i}.b", (w,))]
            width = w
        shapes += [("out.W", (width, 3)), ("out.b", (3,))]
        return shapes


@dataclass
class PolicyParams:
    flat: np.ndarray
    layout: list[tuple[str, tuple[int, ...], int]]
    arch: ArchConfig

    @classmethod
    def zeros(cls, arch: ArchConfig) -> PolicyParams:
        layout = []
        off = 0
        for name, shape in arch.layer_shapes():
            layout.append((name, shape, off))
            off += int(np.prod(shape))
        return cls(np.zeros(off, dtype=np.float32), layout, arch)

    @property
    def size(self) -> int:
        return self.flat.size

    def tensors(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Named views into ``flat`` (defaults to this object's vector)."""
        flat = self.flat if flat is None else flat
        return {name: flat[off : off + int(np.prod(shape))].reshape(shape) for name, shape, off in self.layout}

    def on_tape(self, tape: ad.Tape, flat: np.ndarray | None = None) -> dict[str, ad.Node]:
        return {name: tape.param(name, t) for name, t in self.tensors(flat).items()}

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.flat.size, dtype=np.float64)
        for name, shape, off in self.layout:
            out[off : off + int(np.prod(shape))] = np.asarray(grads[name], dtype=np.float64).ravel()
        return out

    def copy(self) -> PolicyParams:
        return PolicyParams(self.flat.copy(), list(self.layout), self.arch)


def init_params(arch: ArchConfig, seed: int) -> PolicyParams:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    arch.validate()
    params = PolicyParams.zeros(arch)
    rng = np.random.default_rng(seed)
    views = params.tensors()
    for name, shape, _ in params.layout:
        if name.endswith(".b") or name.endswith(".bx") or name.endswith(".bh"):
            continue
        bound = 1.0 / np.sqrt(shape[0])
        w = rng.uniform(-bound, bound, size=shape)
        if name == "out.W":
            w *= arch.out_init_scale
        views[name][...] = w
    return params


# ---------------------------------------------------------------------------
# forward pass; works on numpy arrays or tape nodes


def _is_node(x) -> bool:
    return isinstance(x, ad.Node)


def _tanh(x):
    return ad.tanh(x) if _is_node(x) else np.tanh(x)


def _sigmoid(x):
    return ad.sigmoid(x) if _is_node(x) else 0.5 * (np.tanh(0.5 * x) + 1.0)


def _slice_cols(x, lo, hi):
    return x[..., lo:hi]


def gru_cell(x, h, Wx, Wh, bx, bh, H: int):
    """Standard GRU update; reset gate applied to the recurrent candidate term."""
    gx = x @ Wx + bx
    gh = h @ Wh + bh
    z = _sigmoid(_slice_cols(gx, 0, H) + _slice_cols(gh, 0, H))
    r = _sigmoid(_slice_cols(gx, H, 2 * H) + _slice_cols(gh, H, 2 * H))
    n = _tanh(_slice_cols(gx, 2 * H, 3 * H) + r * _slice_cols(gh, 2 * H, 3 * H))
    return (1.0 - z) * n + z * h


def forward(params: PolicyParams, obs, h, tape: ad.Tape | None = None, nodes: dict | None = None):
    """One policy step.

    Args:
        params: network parameters.
        obs: flattened observation ``(B, input_dim)`` (or ``(input_dim,)``).
        h: hidden state ``(B, hidden)``; a node when recurrent gradients are wanted.
        tape: record operations here; ``nodes`` must then hold the parameter
            leaves returned by :meth:`PolicyParams.on_tape`.

    Returns:
        ``(cmd, h_next)`` with every command component in ``[-a_max, a_max]``.
    """
    arch = params.arch
    ov = getattr(obs, "value", obs)
    if np.shape(ov)[-1] != arch.input_dim:
        raise ContractViolation(f"observation has {np.shape(ov)[-1]} entries, expected {arch.input_dim}")
    hv = getattr(h, "value", h)
    if np.shape(hv)[-1] != arch.hidden:
        raise ContractViolation(f"hidden state has {np.shape(hv)[-1]} entries, expected {arch.hidden}")
    if tape is not None:
        w = nodes if nodes is not None else params.on_tape(tape)
        if not _is_node(obs):
            obs = tape.const(obs)
        if not _is_node(h):
            h = tape.const(h)
    else:
        w = params.tensors()
        obs = np.asarray(obs, dtype=np.float32)
        h = np.asarray(h, dtype=np.float32)
    x = obs
    for i in range(len(arch.encoder)):
        x = _tanh(x @ w[f"enc{i}.W"] + w[f"enc{i}.b"])
    h_next = gru_cell(x, h, w["gru.Wx"], w["gru.Wh"], w["gru.bx"], w["gru.bh"], arch.hidden)
    y = h_next
    for i in range(len(arch.head)):
        y = _tanh(y @ w[f"head{i}.W"] + w[f"head{i}.b"])
    cmd = _tanh(y @ w["out.W"] + w["out.b"]) * arch.a_max
    return cmd, h_next


def initial_hidden(arch: ArchConfig, batch: int | None = None) -> np.ndarray:
    shape = (arch.hidden,) if batch is None else (batch, arch.hidden)
    return np.zeros(shape, dtype=np.float32)


# ---------------------------------------------------------------------------
# checkpoints
#
#   "FLPC" | u32 version | u32 header_len | header JSON (utf-8)
#   | u64 n_params | f32[n] params | u64 n_opt | f32[n_opt] optimizer arrays


def save_checkpoint(path, params: PolicyParams, meta: dict | None = None, opt_arrays: np.ndarray | None = None) -> None:
    header = {"arch": asdict(params.arch), "layout": [[n, list(s), o] for n, s, o in params.layout], "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = np.ascontiguousarray(params.flat, dtype="<f4")
    opt = np.zeros(0, dtype="<f4") if opt_arrays is None else np.ascontiguousarray(opt_arrays, dtype="<f4").ravel()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        fh.write(struct.pack("<Q", opt.size))
        fh.write(opt.tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(params, meta, opt_arrays)``.

    Raises:
        CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointTruncatedError("checkpoint shorter than its fixed header")
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, supported {CKPT_VERSION}")
    pos = 12

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointTruncatedError("checkpoint ended early")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    (n,) = struct.unpack("<Q", take(8))
    flat = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32)
    (m,) = struct.unpack("<Q", take(8))
    opt = np.frombuffer(take(4 * m), dtype="<f4").astype(np.float32)
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    arch = ArchConfig(**header["arch"])
    params = PolicyParams.zeros(arch)
    if params.size != n:
        raise CheckpointFormatError(f"parameter count {n} does not match architecture ({params.size})")
    params.flat = flat
    return params, header["meta"], opt
