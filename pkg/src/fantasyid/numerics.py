"""Tensor substrate: checked kernels, deterministic RNG, AdamW, LR schedule, checkpoints.

Tensors are ``torch.Tensor``; torch autograd supplies the reverse-mode tape. Every
kernel here validates shapes up front and, while debug checks are on, refuses to
emit non-finite values.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


_DEBUG = True


def set_debug(enabled: bool) -> None:
    """Toggle the post-kernel finiteness assertion."""
    global _DEBUG
    _DEBUG = bool(enabled)


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if _DEBUG and not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values produced by {where}")
    return x


def _shape(t: torch.Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


# --------------------------------------------------------------------------- kernels


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {_shape(a)} and {_shape(b)}")
    return check_finite(torch.matmul(a, b), "matmul")


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(
    x: torch.Tensor,
    w: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """x: (C_in, H, W) or (B, C_in, H, W); w: (C_out, C_in, kh, kw)."""
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {_shape(x)} incompatible with kernel {_shape(w)}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {_shape(x)} (pad={pad})")
    out = F.conv2d(x, w, bias, stride=stride, padding=pad)
    if unbatched:
        out = out.squeeze(0)
    return check_finite(out, "conv2d")


def conv1d(
    x: torch.Tensor,
    w: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """x: (C, N) or (B, C, N); w: (C_out, C, k)."""
    if stride < 1:
        raise ContractError(f"conv1d: stride must be >= 1, got {stride}")
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 3 or w.dim() != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {_shape(x)} incompatible with kernel {_shape(w)}")
    if w.shape[2] > x.shape[2] + 2 * pad:
        raise DimensionError(f"conv1d: kernel {w.shape[2]} larger than padded input {_shape(x)} (pad={pad})")
    out = F.conv1d(x, w, bias, stride=stride, padding=pad)
    if unbatched:
        out = out.squeeze(0)
    return check_finite(out, "conv1d")


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    c = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and _shape(p) != (c,):
            raise DimensionError(f"layer_norm: {name} shape {_shape(p)} does not match channels {c}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return check_finite(y, "layer_norm")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes broadcast."""
    d = q.shape[-1]
    if d <= 0:
        raise ContractError("scaled_dot_attention: head dimension must be positive")
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"scaled_dot_attention: q {_shape(q)}, k {_shape(k)}, v {_shape(v)} are incompatible"
        )
    # fused kernel; same softmax(q k^T / sqrt(d)) v as the explicit formula
    return check_finite(F.scaled_dot_product_attention(q, k, v), "scaled_dot_attention")


def avg_pool2d(x: torch.Tensor, k: int, stride: int | None = None) -> torch.Tensor:
    stride = k if stride is None else stride
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if k > x.shape[-1] or k > x.shape[-2]:
        raise DimensionError(f"avg_pool2d: window {k} larger than input {_shape(x)}")
    out = F.avg_pool2d(x, k, stride)
    if unbatched:
        out = out.squeeze(0)
    return check_finite(out, "avg_pool2d")


def backward(loss: torch.Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; gradients accumulate into ``.grad``."""
    if loss.numel() != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {_shape(loss)}")
    check_finite(loss, "loss")
    loss.reshape(()).backward()


def grad_check(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[torch.Tensor],
    eps: float = 1e-6,
    atol: float = 1e-5,
    max_elems: int | None = None,
    rng: "Rng | None" = None,
) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` maps the input tensor(s) to a scalar. Inputs are promoted to float64.
    With ``max_elems`` only a random subset of coordinates per input is probed.
    Relative error is ``|a - n| / (max(|a|, |n|) + atol)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    single = isinstance(x, torch.Tensor)
    xs = [x] if single else list(x)
    xs = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in xs]
    out = f(*xs)
    if out.numel() != 1:
        raise ContractError("grad_check: f must return a scalar")
    grads = torch.autograd.grad(out.reshape(()), xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for xi, gi in zip(xs, grads):
            g = torch.zeros_like(xi) if gi is None else gi
            flat = xi.view(-1)
            idx = range(flat.numel())
            if max_elems is not None and flat.numel() > max_elems:
                r = rng or Rng(0)
                idx = sorted(r.choice(flat.numel(), size=max_elems, replace=False).tolist())
            gflat = g.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = gflat[i].item()
                err = abs(ana - num) / (max(abs(ana), abs(num)) + atol)
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------- RNG


class Rng:
    """Seeded stream built on numpy's Philox4x64 counter-based generator.

    ``Philox`` keyed from ``SeedSequence(seed)`` gives the same stream on every
    platform. Named sub-streams are derived from ``sha256(seed:name)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, name: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.uniform(low, high, tuple(shape))).to(dtype)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int, size=None):
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def choice(self, n: int, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


# --------------------------------------------------------------------------- layers


def _tag(p: nn.Parameter, init: str) -> nn.Parameter:
    p.init_rule = init
    return p


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.empty(d_out)) if bias else None
        if zero_init:
            _tag(self.weight, "zeros")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = matmul(x, self.weight.t())
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, c: int, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.eps = eps
        self.gain = _tag(nn.Parameter(torch.empty(c)), "ones") if affine else None
        self.bias = nn.Parameter(torch.empty(c)) if affine else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Conv1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int | None = None,
                 zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k))
        self.bias = nn.Parameter(torch.empty(c_out))
        if zero_init:
            _tag(self.weight, "zeros")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.pad)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int | None = None):
        super().__init__()
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.empty(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


def init_parameters(module: nn.Module, rng: Rng) -> None:
    """Deterministic init in sorted-name order.

    Matrices and kernels get U(-1/sqrt(fan_in), 1/sqrt(fan_in)); vectors get zero;
    parameters tagged via ``init_rule`` get exactly zeros or ones, or a tenth of
    the default bound ("small").
    """
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            rule = getattr(p, "init_rule", None)
            if rule == "zeros":
                p.zero_()
            elif rule == "ones":
                p.fill_(1.0)
            elif p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = (0.1 if rule == "small" else 1.0) / math.sqrt(fan_in)
                p.copy_(rng.uniform(p.shape, -bound, bound, dtype=p.dtype))
            else:
                p.zero_()


def named_parameters(module: nn.Module, prefix: str = "") -> dict[str, nn.Parameter]:
    """Parameter dict keyed by dotted path; raises on duplicate names."""
    out: dict[str, nn.Parameter] = {}
    for name, p in module.named_parameters():
        key = f"{prefix}.{name}" if prefix else name
        if key in out:
            raise ContractError(f"duplicate parameter name {key}")
        out[key] = p
    return out


# --------------------------------------------------------------------------- optimisation


def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction.

    ``state`` holds ``step`` plus per-index moments ``m``/``v``; an empty dict is a
    fresh (zero-moment) state.
    """
    if lr <= 0:
        raise ContractError("adamw_step: lr must be positive")
    if len(params) != len(grads):
        raise DimensionError("adamw_step: params and grads differ in length")
    b1, b2 = betas
    if "m" not in state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    k = state["step"]
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                g = torch.zeros_like(p)
            if p.shape != g.shape or p.shape != m.shape:
                raise DimensionError(
                    f"adamw_step: param {_shape(p)}, grad {_shape(g)}, state {_shape(m)} mismatch"
                )
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.mul_(1.0 - lr * weight_decay)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


class AdamW:
    """Named-parameter wrapper around :func:`adamw_step`."""

    def __init__(self, params: dict[str, nn.Parameter], betas=(0.9, 0.95), weight_decay=1e-4,
                 eps: float = 1e-8):
        self.names = sorted(params)
        self.params = [params[n] for n in self.names]
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr,
                   self.betas, self.weight_decay, self.eps)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        if "m" not in self.state:
            return {}
        out = {}
        for n, m, v in zip(self.names, self.state["m"], self.state["v"]):
            out[f"adamw.m.{n}"] = m
            out[f"adamw.v.{n}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step: int) -> None:
        if step == 0 or not any(k.startswith("adamw.") for k in tensors):
            self.state = {}
            return
        self.state = {
            "step": step,
            "m": [tensors[f"adamw.m.{n}"].clone() for n in self.names],
            "v": [tensors[f"adamw.v.{n}"].clone() for n in self.names],
        }


def cosine_restarts_lr(step: int, base_lr: float, cycle_len: int, num_cycles: int) -> float:
    """Cosine decay from ``base_lr`` toward 0 within each cycle, restarting every
    ``cycle_len`` steps; 0 after ``num_cycles`` cycles."""
    if cycle_len < 1 or num_cycles < 1:
        raise ContractError("cosine_restarts_lr: cycle_len and num_cycles must be >= 1")
    if step >= cycle_len * num_cycles:
        return 0.0
    phase = (step % cycle_len) / cycle_len
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * phase))


# --------------------------------------------------------------------------- checkpoints

# Layout: MAGIC (8 bytes) | u64 LE header length | UTF-8 JSON header | raw payload.
# header["entries"] lists {name, shape, dtype, offset, nbytes}; offsets are relative
# to the payload start and values are little-endian.
MAGIC = b"FIDCKPT1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def write_tensor_file(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ContractError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "entries": entries}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for c in chunks:
        buf.write(c)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_tensor_file(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a tensor container")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode())
    base = 16 + n
    tensors = {}
    for e in header["entries"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPES[e["dtype"]])
    return tensors, header


def tensor_digest(tensors: Iterable[torch.Tensor] | torch.Tensor) -> str:
    """sha256 over raw bytes; used for bit-stability assertions."""
    h = hashlib.sha256()
    if isinstance(tensors, torch.Tensor):
        tensors = [tensors]
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
