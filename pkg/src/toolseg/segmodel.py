"""Compact U-shaped encoder-decoder for binary tool segmentation.

Each level is two 3x3 convolutions with a pointwise nonlinearity; the encoder
downsamples with 2x2 max-pooling, the decoder upsamples with 2x2 transposed
convolutions and concatenates the matching encoder features. There are no
normalisation or dropout layers, so a forward pass is a pure per-sample
function of the parameters (batch composition never changes an output).
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ParameterError

NONLINEARITIES = {
    "relu": nn.ReLU,
    "elu": nn.ELU,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
}


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    n_classes: int = 2
    widths: tuple[int, ...] = (16, 32, 64, 128)
    nonlinearity: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ParameterError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.n_classes < 2 or self.in_channels < 1:
            raise ParameterError("need in_channels >= 1 and n_classes >= 2")
        if self.nonlinearity not in NONLINEARITIES:
            raise ParameterError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def n_pools(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _block(cin: int, cout: int, act: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        NONLINEARITIES[act](),
        nn.Conv2d(cout, cout, 3, padding=1),
        NONLINEARITIES[act](),
    )


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for width in w:
            self.enc.append(_block(cin, width, cfg.nonlinearity))
            cin = width
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(len(w) - 1, 0, -1):
            self.up.append(nn.ConvTranspose2d(w[i], w[i - 1], 2, stride=2))
            self.dec.append(_block(2 * w[i - 1], w[i - 1], cfg.nonlinearity))
        self.head = nn.Conv2d(w[0], cfg.n_classes, 1)
        init_parameters(self, cfg.init_seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits of shape (N, C, H, W) for input (N, 3, H, W)."""
        div = 2 ** self.cfg.n_pools
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ParameterError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % div or x.shape[3] % div:
            raise ParameterError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {div}")
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            if isinstance(_owner(model, name), nn.ConvTranspose2d):
                # stride == kernel: each output pixel sees one tap per input channel
                fan_in = p.shape[0]
            else:
                fan_in = p[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)


def _owner(model: nn.Module, pname: str) -> nn.Module:
    return model.get_submodule(pname.rsplit(".", 1)[0])


def build_model(cfg: ModelConfig) -> UNet:
    return UNet(cfg)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``cfg``."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    w = cfg.widths
    total = 0
    cin = cfg.in_channels
    for width in w:
        total += conv(cin, width, 3) + conv(width, width, 3)
        cin = width
    for i in range(len(w) - 1, 0, -1):
        total += conv(w[i], w[i - 1], 2)  # transposed conv has the same count
        total += conv(2 * w[i - 1], w[i - 1], 3) + conv(w[i - 1], w[i - 1], 3)
    return total + conv(w[0], cfg.n_classes, 1)


def _as_batch(img) -> tuple[torch.Tensor, bool]:
    if isinstance(img, torch.Tensor):
        t = img
    else:
        t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    single = t.dim() == 3
    if single:
        t = t[None]
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ParameterError(f"expected HxWx3 or NxHxWx3 images, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous(), single


def images_to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) float array -> (N, 3, H, W) tensor."""
    return _as_batch(images)[0]


@torch.no_grad()
def forward(model: UNet, img, batch_size: int = 16) -> np.ndarray:
    """Per-pixel class probabilities, shaped like the input with a trailing C axis."""
    x, single = _as_batch(img)
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, x.shape[0], batch_size):
        logits = model(x[i : i + batch_size].to(dtype))
        outs.append(torch.softmax(logits, dim=1).permute(0, 2, 3, 1).numpy())
    probs = np.concatenate(outs)
    return probs[0] if single else probs


def predict_mask(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest class index (background)."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


def flat_parameters(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).numpy()


def parameter_checksum(model: nn.Module) -> str:
    return hashlib.sha256(flat_parameters(model).astype("<f4").tobytes()).hexdigest()


# --------------------------------------------------------------------------
# checkpoint container (byte layout documented in docs/FORMATS.md)

CKPT_MAGIC = b"TSEGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, model: UNet, step: int, meta: dict | None = None) -> str:
    """Write the model and return the file's SHA-256."""
    flat = flat_parameters(model).astype("<f4")
    header = {
        "model_config": asdict(model.cfg),
        "step": int(step),
        "n_params": int(flat.size),
        "dtype": "float32-le",
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + flat.tobytes()
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    return digest.hex()


def load_checkpoint(path: str | Path) -> tuple[UNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[16 : 16 + hlen].decode("utf-8"))
    flat = np.frombuffer(body[16 + hlen :], dtype="<f4")
    if flat.size != header["n_params"]:
        raise DataError(f"{path}: expected {header['n_params']} parameters, found {flat.size}")
    model = build_model(ModelConfig.from_dict(header["model_config"]))
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset : offset + n].copy()).reshape(p.shape))
            offset += n
    return model, header


def probs_from_logits(logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(probabilities, log-probabilities) along the class axis."""
    logp = torch.log_softmax(logits, dim=1)
    return logp.exp(), logp


def stack_masks(masks: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(masks).astype(np.int64))
