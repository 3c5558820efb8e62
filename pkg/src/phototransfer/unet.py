"""Shallow U-Net and the binary checkpoint format.

Layout for ``depth`` levels and channel widths ``c_l = base * 2**l``:

    enc0      conv3x3(in -> c0), conv3x3(c0 -> c0)
    enc{l}    conv3x3/2(c_{l-1} -> c_l), conv3x3(c_l -> c_l)       l = 1..depth
    dec{l}    up2x + conv3x3(c_{l+1} -> c_l), concat skip,
              conv3x3(2 c_l -> c_l), conv3x3(c_l -> c_l)           l = depth-1..0
    head      conv1x1(c0 -> out)

Every 3x3 convolution is followed by a leaky ReLU. Parameter count:

    P = (9 in c0 + c0) + (9 c0^2 + c0)
      + sum_{l=1..depth} [(9 c_{l-1} c_l + c_l) + (9 c_l^2 + c_l)]
      + sum_{l=0..depth-1} [(9 c_{l+1} c_l + c_l) + (18 c_l^2 + c_l) + (9 c_l^2 + c_l)]
      + (c0 out + out)
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor, concat_channels, conv2d, leaky_relu, upsample2x_nearest

MAGIC = b"PXFR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 16
    depth: int = 4
    head: str = "linear"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in_channels and out_channels must be >= 1")
        if self.head not in ("linear", "logits"):
            raise ValueError(f"head must be 'linear' or 'logits', got {self.head!r}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")

    @property
    def multiple(self) -> int:
        """Spatial sizes must be divisible by this."""
        return 2 ** self.depth

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.depth + 1)]


def _layer_specs(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_c, out_c, kernel) for every convolution, in forward order."""
    c = cfg.widths()
    specs = [("enc0.conv1", cfg.in_channels, c[0], 3), ("enc0.conv2", c[0], c[0], 3)]
    for l in range(1, cfg.depth + 1):
        specs += [(f"enc{l}.down", c[l - 1], c[l], 3), (f"enc{l}.conv", c[l], c[l], 3)]
    for l in range(cfg.depth - 1, -1, -1):
        specs += [
            (f"dec{l}.up", c[l + 1], c[l], 3),
            (f"dec{l}.conv1", 2 * c[l], c[l], 3),
            (f"dec{l}.conv2", c[l], c[l], 3),
        ]
    specs.append(("head", c[0], cfg.out_channels, 1))
    return specs


def parameter_count(cfg: UNetConfig) -> int:
    c = cfg.widths()
    n = (9 * cfg.in_channels * c[0] + c[0]) + (9 * c[0] ** 2 + c[0])
    for l in range(1, cfg.depth + 1):
        n += (9 * c[l - 1] * c[l] + c[l]) + (9 * c[l] ** 2 + c[l])
    for l in range(cfg.depth):
        n += (9 * c[l + 1] * c[l] + c[l]) + (18 * c[l] ** 2 + c[l]) + (9 * c[l] ** 2 + c[l])
    n += c[0] * cfg.out_channels + cfg.out_channels
    return n


def receptive_field_radius(cfg: UNetConfig) -> int:
    """Conservative radius (input pixels) of the region any output pixel sees.

    Tracks (radius, jump) along the deepest path; nearest upsampling adds half
    a coarse pixel of slack.
    """
    r, j = 0, 1
    r += 2 * j  # enc0
    skips = [r]
    for _ in range(cfg.depth):
        r += j
        j *= 2
        r += j
        skips.append(r)
    for l in range(cfg.depth - 1, -1, -1):
        j //= 2
        r += j  # nearest upsample offset
        r += j  # up conv
        r = max(r, skips[l])
        r += 2 * j
    return r


class UNetModel:
    """Parameters plus the forward pass. Immutable once training is done."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: UNetConfig, seed: int) -> "UNetModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
        gain = 2.0 / (1.0 + config.leaky_slope ** 2)
        params: dict[str, Tensor] = {}
        for name, cin, cout, k in _layer_specs(config):
            fan_in = cin * k * k
            std = np.sqrt((1.0 if name == "head" else gain) / fan_in)
            w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
            params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, name: str, x: Tensor, stride: int = 1, act: bool = True) -> Tensor:
        w = self.params[f"{name}.weight"]
        pad = w.shape[2] // 2
        y = conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=pad)
        return leaky_relu(y, self.config.leaky_slope) if act else y

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (n, {cfg.in_channels}, h, w), got {x.shape}")
        h, w = x.shape[2:]
        m = cfg.multiple
        if h % m or w % m:
            raise ValueError(f"input size {h}x{w} must be a multiple of {m} (2**depth); pad the input or use tiled inference")
        e = self._conv("enc0.conv2", self._conv("enc0.conv1", x))
        skips = [e]
        for l in range(1, cfg.depth + 1):
            e = self._conv(f"enc{l}.conv", self._conv(f"enc{l}.down", e, stride=2))
            skips.append(e)
        d = e
        for l in range(cfg.depth - 1, -1, -1):
            d = self._conv(f"dec{l}.up", upsample2x_nearest(d))
            d = concat_channels(d, skips[l])
            d = self._conv(f"dec{l}.conv2", self._conv(f"dec{l}.conv1", d))
        return self._conv("head", d, act=False)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on a plain (n, c, h, w) array without recording grads."""
        frozen = {k: Tensor._result(v.data, []) for k, v in self.params.items()}
        return UNetModel(self.config, frozen).forward(Tensor(x)).data


def unet_init(config: UNetConfig, seed: int) -> UNetModel:
    return UNetModel.init(config, seed)


def unet_forward(model: UNetModel, x: Tensor) -> Tensor:
    return model.forward(x)


# --- checkpoint file -------------------------------------------------------
#
#   "PXFR" | u16 version | u32 meta length | meta (UTF-8 JSON, sorted keys)
#   u32 tensor count | per tensor: u16 name length, name, u8 ndim,
#   ndim * u32 dims, little-endian float32 payload
#
# All integers little-endian.


def write_checkpoint(path, config: UNetConfig, params: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    body = {"unet": asdict(config), "meta": meta or {}}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[UNetConfig, dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    body = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return UNetConfig(**body["unet"]), params, body["meta"]


def model_from_arrays(config: UNetConfig, arrays: dict[str, np.ndarray]) -> UNetModel:
    expected = {f"{n}.{s}" for n, *_ in _layer_specs(config) for s in ("weight", "bias")}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise ValueError(f"checkpoint tensors do not match config (missing {missing}, unexpected {extra})")
    return UNetModel(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})
