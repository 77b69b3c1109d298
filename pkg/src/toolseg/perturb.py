"""Shape-preserving photometric perturbations and label-consistent geometry.

Pixel ops take and return float HxWx3 images in [0, 1] and never see a mask:
they recolour, quantise, blur or corrupt pixels in place but do not move
anything, so the ground truth of the input remains the ground truth of the
output. Geometric augmentation is the only path that touches masks.

A weak draw is one intensity op; a strong draw is an intensity op followed by
a corruption op. Draws are recorded as :class:`PerturbationSpec` values that
replay bit-identically.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Callable

import cv2
import numpy as np
import yaml
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .errors import ParameterError


class Scheme(str, enum.Enum):
    NONE = "NONE"
    WEAK = "WEAK"
    STRONG = "STRONG"


@lru_cache(maxsize=None)
def default_ranges() -> dict:
    """The packaged parameter-range table (``perturb_ranges.yaml``)."""
    text = resources.files("toolseg").joinpath("perturb_ranges.yaml").read_text()
    return yaml.safe_load(text)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _from_u8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 255.0


def _finish(out: np.ndarray) -> np.ndarray:
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# pixel-intensity ops

def brightness_contrast(img, brightness=0.0, contrast=1.0):
    return _finish(img * contrast + brightness)


def posterize(img, levels=8):
    """Snap every value to the nearest of ``levels`` evenly spaced levels in [0, 1].

    Ties round half to even.
    """
    if levels < 2:
        raise ParameterError("posterize needs at least 2 levels")
    q = levels - 1
    return _finish(np.round(img * q) / q)


def solarize(img, threshold=0.5):
    return _finish(np.where(img < threshold, img, 1.0 - img))


def gamma(img, gamma=1.0):
    if gamma <= 0:
        raise ParameterError("gamma must be positive")
    if gamma == 1.0:
        return _finish(img)
    return _finish(np.power(img, gamma))


def hsv_shift(img, hue=0.0, saturation=0.0, value=0.0):
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + saturation, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + value, 0.0, 1.0)
    return _finish(hsv_to_rgb(hsv))


def equalize(img):
    """Per-channel histogram equalisation on the 8-bit representation."""
    u8 = _to_u8(img)
    out = np.stack([cv2.equalizeHist(np.ascontiguousarray(u8[..., c])) for c in range(u8.shape[2])], axis=-1)
    return _finish(_from_u8(out))


def clahe(img, clip_limit=2.0, tiles=8):
    """CLAHE on the lightness channel of CIE-Lab."""
    lab = cv2.cvtColor(_to_u8(img), cv2.COLOR_RGB2LAB)
    op = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(int(tiles), int(tiles)))
    lab[..., 0] = op.apply(np.ascontiguousarray(lab[..., 0]))
    return _finish(_from_u8(cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)))


# --------------------------------------------------------------------------
# pixel-corruption ops

def gaussian_noise(img, sigma=0.0, seed=0):
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    if sigma == 0:
        return _finish(img)
    rng = np.random.default_rng(seed)
    return _finish(img + rng.normal(0.0, sigma, img.shape))


def iso_noise(img, color_shift=0.03, intensity=0.3, seed=0):
    """Sensor noise: luminance-scaled shot noise plus per-channel chroma noise."""
    rng = np.random.default_rng(seed)
    lum = img.mean(axis=-1, keepdims=True)
    shot = rng.standard_normal(lum.shape) * 0.1 * intensity * np.sqrt(lum)
    chroma = rng.normal(0.0, color_shift, img.shape)
    return _finish(img + shot + chroma)


def motion_blur_kernel(size: int, angle: float) -> np.ndarray:
    """Normalised line kernel of odd ``size`` through the centre at ``angle`` degrees."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"motion blur kernel must be odd and >= 1, got {size}")
    k = np.zeros((size, size), dtype=np.float64)
    c = (size - 1) / 2.0
    a = math.radians(angle)
    for t in np.linspace(-c, c, 4 * size + 1):
        k[int(round(c - t * math.sin(a))), int(round(c + t * math.cos(a)))] = 1.0
    return k / k.sum()


def _filter(img, kernel):
    out = cv2.filter2D(img.astype(np.float32), -1, kernel.astype(np.float32), borderType=cv2.BORDER_REFLECT_101)
    return out.reshape(img.shape)


def motion_blur(img, kernel=3, angle=0.0):
    if kernel == 1:
        return _finish(img)
    return _finish(_filter(img, motion_blur_kernel(int(kernel), angle)))


def jpeg(img, quality=75):
    """Encode to JPEG at ``quality`` and decode again."""
    bgr = cv2.cvtColor(_to_u8(img), cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".jpg", bgr, [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise ParameterError(f"JPEG encoding failed at quality {quality}")
    return _finish(_from_u8(cv2.cvtColor(cv2.imdecode(buf, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)))


def dropout(img, p=0.0, seed=0):
    if p == 0:
        return _finish(img)
    rng = np.random.default_rng(seed)
    keep = rng.random(img.shape[:2]) >= p
    return _finish(img * keep[..., None])


def fog(img, intensity=0.2, seed=0):
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 6.0, mode="wrap")
    f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
    a = (intensity * (0.5 + 0.5 * f))[..., None]
    return _finish(img * (1.0 - a) + 0.92 * a)


def emboss(img, alpha=0.3, strength=0.5):
    s = strength
    kern = np.array([[-1 - s, -s, 0.0], [-s, 1.0, s], [0.0, s, 1 + s]])
    ident = np.zeros((3, 3))
    ident[1, 1] = 1.0
    return _finish(_filter(img, (1 - alpha) * ident + alpha * kern))


INTENSITY_OPS: dict[str, Callable[..., np.ndarray]] = {
    "brightness_contrast": brightness_contrast,
    "posterize": posterize,
    "solarize": solarize,
    "gamma": gamma,
    "hsv_shift": hsv_shift,
    "equalize": equalize,
    "clahe": clahe,
}

CORRUPTION_OPS: dict[str, Callable[..., np.ndarray]] = {
    "gaussian_noise": gaussian_noise,
    "iso_noise": iso_noise,
    "motion_blur": motion_blur,
    "jpeg": jpeg,
    "dropout": dropout,
    "fog": fog,
    "emboss": emboss,
}

# ops that consume randomness at apply time carry their own seed parameter
_SEEDED = {"gaussian_noise", "iso_noise", "dropout", "fog"}


def _check_image(img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        shape = getattr(img, "shape", None)
        raise ParameterError(f"expected an HxWx3 image, got shape {shape}")


def pixel_intensity_op(img: np.ndarray, name: str, params: dict[str, Any] | None = None) -> np.ndarray:
    if name not in INTENSITY_OPS:
        raise ParameterError(f"unknown pixel-intensity op {name!r}")
    _check_image(img)
    return INTENSITY_OPS[name](img, **(params or {}))


def pixel_corruption_op(img: np.ndarray, name: str, params: dict[str, Any] | None = None) -> np.ndarray:
    if name not in CORRUPTION_OPS:
        raise ParameterError(f"unknown pixel-corruption op {name!r}")
    _check_image(img)
    return CORRUPTION_OPS[name](img, **(params or {}))


# --------------------------------------------------------------------------
# drawing and replay

@dataclass(frozen=True)
class PerturbationSpec:
    scheme: Scheme
    ops: tuple[tuple[str, dict], ...] = ()
    seed: int = 0

    def labels(self) -> list[str]:
        return [name for name, _ in self.ops]


def _draw_param(rng: np.random.Generator, rule) -> Any:
    if isinstance(rule, dict) and "int" in rule:
        lo, hi = rule["int"]
        return int(rng.integers(lo, hi + 1))
    if isinstance(rule, dict) and "odd" in rule:
        lo, hi = rule["odd"]
        return int(rng.choice(np.arange(lo, hi + 1, 2)))
    lo, hi = rule
    return float(rng.uniform(lo, hi))


def _draw_op(rng: np.random.Generator, family: dict) -> tuple[str, dict]:
    names = list(family)
    name = names[int(rng.integers(len(names)))]
    params = {k: _draw_param(rng, rule) for k, rule in (family[name] or {}).items()}
    if name in _SEEDED:
        params["seed"] = int(rng.integers(0, 2**63))
    return name, params


def draw_perturbation(scheme: Scheme | str, seed: int, ranges: dict | None = None) -> PerturbationSpec:
    """Draw ops (and their parameters) uniformly for ``scheme``."""
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise ParameterError(f"unknown perturbation scheme {scheme!r}") from None
    ranges = ranges or default_ranges()
    rng = np.random.default_rng(seed)
    ops: list[tuple[str, dict]] = []
    if scheme in (Scheme.WEAK, Scheme.STRONG):
        ops.append(_draw_op(rng, ranges["intensity"]))
    if scheme is Scheme.STRONG:
        ops.append(_draw_op(rng, ranges["corruption"]))
    return PerturbationSpec(scheme, tuple(ops), int(seed))


def apply(spec: PerturbationSpec, img: np.ndarray) -> np.ndarray:
    """Run the spec's ops in order."""
    _check_image(img)
    out = img.astype(np.float32, copy=True)
    for name, params in spec.ops:
        if name in INTENSITY_OPS:
            out = pixel_intensity_op(out, name, params)
        else:
            out = pixel_corruption_op(out, name, params)
    return out


# --------------------------------------------------------------------------
# geometric augmentation

@dataclass(frozen=True)
class GeomAugSpec:
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)  # (x, y) pixels
    scale: float = 1.0
    shear: float = 0.0
    hflip: bool = False
    vflip: bool = False
    seed: int = 0

    def is_identity(self) -> bool:
        return (
            self.rotation == 0 and tuple(self.translation) == (0.0, 0.0) and self.scale == 1.0
            and self.shear == 0 and not self.hflip and not self.vflip
        )


def draw_geom(seed: int, ranges: dict | None = None) -> GeomAugSpec:
    g = (ranges or default_ranges())["geometric"]
    rng = np.random.default_rng(seed)
    return GeomAugSpec(
        rotation=float(rng.uniform(*g["rotation"])),
        translation=(float(rng.uniform(*g["translation"])), float(rng.uniform(*g["translation"]))),
        scale=float(rng.uniform(*g["scale"])),
        shear=float(rng.uniform(*g["shear"])),
        hflip=bool(rng.random() < g["hflip_p"]),
        vflip=bool(rng.random() < g["vflip_p"]),
        seed=int(seed),
    )


def _affine_rc(spec: GeomAugSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse map (output -> input) in (row, col) order for ``ndimage.affine_transform``."""
    th = math.radians(spec.rotation)
    rot = np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, math.tan(math.radians(spec.shear))], [0.0, 1.0]])
    fwd = rot @ shear @ (spec.scale * np.eye(2))
    inv = np.linalg.inv(fwd)
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    t = np.asarray(spec.translation, dtype=np.float64)
    offset_xy = c - inv @ (c + t)
    perm = np.array([[0.0, 1.0], [1.0, 0.0]])
    return perm @ inv @ perm, perm @ offset_xy


def apply_geom(spec: GeomAugSpec, img: np.ndarray, mask: np.ndarray | None = None):
    """Flip, then warp ``img`` (bilinear) and ``mask`` (nearest) with one affine map.

    Rotation is counter-clockwise as displayed, about the image centre.
    Pixels warped in from outside the frame are zero / background.
    """
    if spec.scale <= 0:
        raise ParameterError(f"scale must be positive, got {spec.scale}")
    _check_image(img)
    if mask is not None and mask.shape != img.shape[:2]:
        raise ParameterError(f"mask {mask.shape} not aligned with image {img.shape[:2]}")
    if spec.is_identity():
        return img.copy(), (None if mask is None else mask.copy())
    h, w = img.shape[:2]
    if spec.hflip:
        img = img[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    if spec.vflip:
        img = img[::-1]
        mask = None if mask is None else mask[::-1]
    matrix, offset = _affine_rc(spec, h, w)
    out = np.empty(img.shape, dtype=np.float32)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            np.ascontiguousarray(img[..., ch], dtype=np.float64), matrix, offset, order=1, mode="constant", cval=0.0
        )
    out = _finish(out)
    if mask is None:
        return out, None
    m = ndimage.affine_transform(np.ascontiguousarray(mask), matrix, offset, order=0, mode="constant", cval=0)
    return out, (m > 0).astype(np.uint8)
