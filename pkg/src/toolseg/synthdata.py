"""Procedural two-domain dataset of tool-like shapes.

Both domains share one shape generator (capsule shafts with articulated
jaws); they differ only in how the scene is painted. The "sim" domain is a
clean, smoothly shaded render; the "real" domain swaps in a vascular tissue
texture, dark instrument shafts, specular highlights and sensor noise.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import DataError, LabelHygieneError, ParameterError

MANIFEST_FORMAT = "toolseg-dataset/1"
MANIFEST_NAME = "manifest.json"

SIM = "sim"
REAL_UL = "real_ul"
REAL_L = "real_l"
SPLITS = (SIM, REAL_UL, REAL_L)

RADIUS_FRAC_RANGE = (0.85, 1.0)
FOREGROUND_BAND = (0.02, 0.40)
MAX_TOOLS = 3


class Domain(str, enum.Enum):
    SIM = "SIM"
    REAL = "REAL"


@dataclass(frozen=True)
class ToolShape:
    """One instrument: a shaft capsule ending at ``tip`` plus two jaws.

    ``orientation`` is the direction (radians, image x/y axes) from the tip
    towards the handle. The jaws leave the tip in the opposite direction,
    spread by ``articulation`` in total.
    """

    tip: tuple[float, float]
    orientation: float
    width: float
    length: float
    articulation: float = 0.0

    def segments(self) -> list[tuple[tuple[float, float], tuple[float, float], float]]:
        """Capsules as ``(p0, p1, radius)`` triples."""
        tx, ty = self.tip
        hx = tx + self.length * math.cos(self.orientation)
        hy = ty + self.length * math.sin(self.orientation)
        out = [((tx, ty), (hx, hy), self.width / 2.0)]
        jaw_len = 2.2 * self.width
        jaw_r = 0.3 * self.width
        fwd = self.orientation + math.pi
        for sgn in (-1.0, 1.0):
            a = fwd + sgn * self.articulation / 2.0
            out.append(((tx, ty), (tx + jaw_len * math.cos(a), ty + jaw_len * math.sin(a)), jaw_r))
        return out


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    tools: tuple[ToolShape, ...] = ()
    texture_id: int = 0
    palette: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.72, 0.30, 0.28),
        (0.55, 0.16, 0.16),
    )
    light: tuple[float, float, float] = (0.5, 0.5, 0.35)  # centre x, centre y (fractions), falloff
    radius_frac: float = 1.0
    seed: int = 0

    @property
    def n_tools(self) -> int:
        return len(self.tools)

    def validate(self, allow_empty: bool = False) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ParameterError(f"image size must be positive, got {self.height}x{self.width}")
        lo = 0 if allow_empty else 1
        if not lo <= self.n_tools <= MAX_TOOLS:
            raise ParameterError(f"n_tools must be in [{lo}, {MAX_TOOLS}], got {self.n_tools}")
        if not RADIUS_FRAC_RANGE[0] <= self.radius_frac <= RADIUS_FRAC_RANGE[1]:
            raise ParameterError(f"radius_frac must be in {list(RADIUS_FRAC_RANGE)}, got {self.radius_frac}")
        for t in self.tools:
            if t.width <= 0 or t.length <= 0:
                raise ParameterError("tool width and length must be positive")


@dataclass(frozen=True)
class DomainStyle:
    domain: Domain
    texture_family: str
    tissue_gain: tuple[float, float, float]
    shaft_rgb: tuple[float, float, float]
    jaw_rgb: tuple[float, float, float]
    noise_floor: float
    specular_prob: float
    blur_sigma: float = 0.0

    def validate(self) -> None:
        if self.texture_family not in ("smooth", "vascular"):
            raise ParameterError(f"unknown texture family {self.texture_family!r}")
        if self.noise_floor < 0 or self.blur_sigma < 0 or not 0 <= self.specular_prob <= 1:
            raise ParameterError("noise_floor and blur_sigma must be >= 0, specular_prob in [0, 1]")


SIM_STYLE = DomainStyle(
    domain=Domain.SIM,
    texture_family="smooth",
    tissue_gain=(1.0, 1.0, 1.0),
    shaft_rgb=(0.80, 0.80, 0.84),
    jaw_rgb=(0.70, 0.72, 0.76),
    noise_floor=0.0,
    specular_prob=0.0,
)

REAL_STYLE = DomainStyle(
    domain=Domain.REAL,
    texture_family="vascular",
    tissue_gain=(1.08, 0.92, 0.85),
    shaft_rgb=(0.13, 0.13, 0.15),
    jaw_rgb=(0.55, 0.56, 0.58),
    noise_floor=0.05,
    specular_prob=0.8,
    blur_sigma=1.2,
)

STYLES = {Domain.SIM: SIM_STYLE, Domain.REAL: REAL_STYLE}


# --------------------------------------------------------------------------
# geometry

def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


def _segment_distance(xx, yy, p0, p1) -> np.ndarray:
    x0, y0 = p0
    dx, dy = p1[0] - x0, p1[1] - y0
    ll = dx * dx + dy * dy
    if ll == 0.0:
        t = 0.0
    else:
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / ll, 0.0, 1.0)
    return np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))


def capsule_mask(h: int, w: int, p0, p1, radius: float) -> np.ndarray:
    """Pixels (centres at integer coordinates) within ``radius`` of segment p0-p1."""
    xx, yy = _pixel_grid(h, w)
    return _segment_distance(xx, yy, p0, p1) <= radius


def circle_mask(h: int, w: int, radius_frac: float) -> np.ndarray:
    """True strictly inside the centred circle of radius ``radius_frac * min(h, w) / 2``."""
    if not radius_frac > 0:
        raise ParameterError(f"radius_frac must be positive, got {radius_frac}")
    xx, yy = _pixel_grid(h, w)
    r = radius_frac * min(h, w) / 2.0
    return np.hypot(xx - (w - 1) / 2.0, yy - (h - 1) / 2.0) < r


def scene_mask(spec: SceneSpec) -> np.ndarray:
    """Binary uint8 mask: union of tool capsules, clipped to the scene circle."""
    out = np.zeros((spec.height, spec.width), dtype=bool)
    for tool in spec.tools:
        for p0, p1, r in tool.segments():
            out |= capsule_mask(spec.height, spec.width, p0, p1, r)
    out &= circle_mask(spec.height, spec.width, spec.radius_frac)
    return out.astype(np.uint8)


def apply_circular_mask(img: np.ndarray, mask: np.ndarray, radius_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Black out everything outside the centred endoscope circle."""
    if img.shape[:2] != mask.shape:
        raise ParameterError(f"image {img.shape[:2]} and mask {mask.shape} are not aligned")
    keep = circle_mask(mask.shape[0], mask.shape[1], radius_frac)
    return img * keep[..., None].astype(img.dtype), (mask * keep).astype(mask.dtype)


# --------------------------------------------------------------------------
# rendering

def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float, aniso: float = 1.0) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), (sigma, sigma * aniso), mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _tissue(spec: SceneSpec, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    base = np.asarray(spec.palette[0])
    second = np.asarray(spec.palette[1])
    if style.texture_family == "smooth":
        blend = _smooth_field(rng, h, w, sigma=h / 8.0)
        shade = 0.85 + 0.25 * _smooth_field(rng, h, w, sigma=h / 5.0)
        img = (base * (1 - blend[..., None]) + second * blend[..., None]) * shade[..., None]
    else:
        shade = 0.75 + 0.35 * _smooth_field(rng, h, w, sigma=h / 12.0)
        img = base * shade[..., None]
        # thin dark ridges along iso-lines of a random field read as vessels
        ridges = _smooth_field(rng, h, w, sigma=h / 16.0, aniso=0.5 + spec.texture_id % 3)
        vessel = np.exp(-((np.sin(ridges * 9.0 * math.pi)) ** 2) / 0.02)
        img = img * (1 - 0.45 * vessel[..., None]) + second * 0.45 * vessel[..., None]
        fat = np.clip((_smooth_field(rng, h, w, sigma=h / 10.0) - 0.65) * 5.0, 0.0, 1.0)
        img = img * (1 - fat[..., None]) + np.array([0.86, 0.74, 0.40]) * fat[..., None]
    return img * np.asarray(style.tissue_gain)


def _paint_tools(img: np.ndarray, spec: SceneSpec, style: DomainStyle, rng: np.random.Generator) -> None:
    xx, yy = _pixel_grid(spec.height, spec.width)
    for tool in spec.tools:
        segs = tool.segments()
        for k, (p0, p1, r) in enumerate(segs):
            d = _segment_distance(xx, yy, p0, p1)
            inside = d <= r
            rgb = np.asarray(style.shaft_rgb if k == 0 else style.jaw_rgb)
            # cylindrical shading across the tool
            shade = 1.0 - 0.45 * (d / r) ** 2
            col = rgb * shade[..., None]
            if style.specular_prob > 0 and k == 0:
                stripe = np.exp(-((d - 0.35 * r) / (0.12 * r)) ** 2)
                col = col + 0.5 * stripe[..., None]
            img[inside] = col[inside]


def _speculars(img: np.ndarray, spec: SceneSpec, style: DomainStyle, rng: np.random.Generator) -> None:
    if style.specular_prob <= 0:
        return
    xx, yy = _pixel_grid(spec.height, spec.width)
    n = rng.poisson(3.0)
    for _ in range(n):
        if rng.random() > style.specular_prob:
            continue
        cx, cy = rng.uniform(0, spec.width), rng.uniform(0, spec.height)
        s = rng.uniform(1.0, 3.0)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += 0.9 * blob[..., None]


def generate_scene(spec: SceneSpec, style: DomainStyle, allow_empty: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Render one ``(image, mask)`` pair.

    The image is float32 HxWx3 in [0, 1], the mask uint8 HxW in {0, 1}. The
    output depends only on ``spec`` and ``style``.
    """
    spec.validate(allow_empty=allow_empty)
    style.validate()
    rng = np.random.default_rng(spec.seed)
    img = _tissue(spec, style, rng)
    _paint_tools(img, spec, style, rng)
    _speculars(img, spec, style, rng)
    lx, ly, falloff = spec.light
    xx, yy = _pixel_grid(spec.height, spec.width)
    dist = np.hypot(xx - lx * spec.width, yy - ly * spec.height) / max(spec.height, spec.width)
    img *= np.clip(1.0 - falloff * dist**2 * 2.0, 0.2, 1.0)[..., None]
    if style.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (style.blur_sigma, style.blur_sigma, 0), mode="nearest")
    if style.noise_floor > 0:
        img += rng.normal(0.0, style.noise_floor, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    mask = scene_mask(spec)
    img, mask = apply_circular_mask(img, mask, spec.radius_frac)
    return img, mask


def draw_scene_spec(
    rng: np.random.Generator,
    height: int = 128,
    width: int = 128,
    radius_range: tuple[float, float] = RADIUS_FRAC_RANGE,
    fg_band: tuple[float, float] = FOREGROUND_BAND,
    max_attempts: int = 100,
) -> SceneSpec:
    """Sample a scene whose mask foreground fraction falls inside ``fg_band``."""
    size = min(height, width)
    for _ in range(max_attempts):
        radius_frac = float(rng.uniform(*radius_range))
        r_scene = radius_frac * size / 2.0
        tools = []
        for _ in range(int(rng.integers(1, MAX_TOOLS + 1))):
            # tip well inside the circle so the footprint is never fully clipped
            rho = r_scene * 0.6 * math.sqrt(rng.random())
            phi = rng.uniform(0, 2 * math.pi)
            tip = ((width - 1) / 2 + rho * math.cos(phi), (height - 1) / 2 + rho * math.sin(phi))
            tools.append(
                ToolShape(
                    tip=(float(tip[0]), float(tip[1])),
                    orientation=float(rng.uniform(0, 2 * math.pi)),
                    width=float(rng.uniform(0.05, 0.11) * size),
                    length=float(rng.uniform(0.8, 1.6) * size),
                    articulation=float(rng.uniform(0.0, 0.9)),
                )
            )
        base = rng.uniform([0.62, 0.22, 0.20], [0.82, 0.36, 0.32])
        spec = SceneSpec(
            height=height,
            width=width,
            tools=tuple(tools),
            texture_id=int(rng.integers(0, 1000)),
            palette=(tuple(float(v) for v in base), tuple(float(v) for v in base * rng.uniform(0.6, 0.8))),
            light=(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.2, 0.5))),
            radius_frac=radius_frac,
            seed=int(rng.integers(0, 2**63)),
        )
        frac = scene_mask(spec).mean()
        if fg_band[0] <= frac <= fg_band[1]:
            return spec
    raise DataError(f"no scene within foreground band {fg_band} after {max_attempts} attempts")


def scene_seed(master_seed: int, domain: Domain, index: int) -> int:
    """Per-scene 64-bit seed; independent of worker count and generation order."""
    code = 0 if domain is Domain.SIM else 1
    ss = np.random.SeedSequence([master_seed, code, index])
    return int(ss.generate_state(1, np.uint64)[0])


def make_scene(master_seed: int, domain: Domain, index: int, height: int = 128, width: int = 128):
    seed = scene_seed(master_seed, domain, index)
    spec = draw_scene_spec(np.random.default_rng(seed), height, width)
    img, mask = generate_scene(spec, STYLES[domain])
    return seed, img, mask


# --------------------------------------------------------------------------
# dataset on disk

@dataclass
class ManifestItem:
    id: str
    split: str
    domain: str
    seed: int
    image: str
    mask: str
    image_sha256: str
    mask_sha256: str
    audit_only: bool = False


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    height: int
    width: int
    real_train_fraction: float
    items: list[ManifestItem] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == name]

    def counts(self) -> dict[str, int]:
        c = Counter(it.split for it in self.items)
        return {s: c.get(s, 0) for s in SPLITS}

    def to_json(self) -> str:
        doc = {
            "format": MANIFEST_FORMAT,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "real_train_fraction": self.real_train_fraction,
            "counts": self.counts(),
            "items": [asdict(it) for it in self.items],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise DataError(f"no dataset manifest at {path}")
        doc = json.loads(path.read_text())
        if doc.get("format") != MANIFEST_FORMAT:
            raise DataError(f"unsupported manifest format {doc.get('format')!r}")
        items = [ManifestItem(**it) for it in doc["items"]]
        return cls(root, doc["seed"], doc["height"], doc["width"], doc["real_train_fraction"], items)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path, format="PNG")


def _make_scene_args(args):
    return make_scene(*args)


def build_dataset(
    n_sim: int,
    n_real: int,
    seed: int,
    out_dir: str | Path,
    height: int = 128,
    width: int = 128,
    real_train_fraction: float = 0.7,
    workers: int = 1,
) -> DatasetManifest:
    """Generate the three splits under ``out_dir`` and write ``manifest.json``.

    REAL scenes are assigned to the unlabeled-train / labeled-test splits by a
    seeded permutation of scene indices, so every scene lands in exactly one
    split. REAL_UL masks are written for auditing but flagged ``audit_only``.
    """
    if n_sim <= 0:
        raise ParameterError("n_sim must be positive: the labeled source domain cannot be empty")
    if n_real <= 0:
        raise ParameterError("n_real must be positive")
    if not 0 < real_train_fraction < 1:
        raise ParameterError("real_train_fraction must be in (0, 1)")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc

    jobs = [(seed, Domain.SIM, i, height, width) for i in range(n_sim)]
    jobs += [(seed, Domain.REAL, i, height, width) for i in range(n_real)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            scenes = list(ex.map(_make_scene_args, jobs, chunksize=16))
    else:
        scenes = [_make_scene_args(j) for j in jobs]

    n_train = int(round(real_train_fraction * n_real))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(n_real)
    real_split = {int(i): (REAL_UL if rank < n_train else REAL_L) for rank, i in enumerate(perm)}

    manifest = DatasetManifest(root, seed, height, width, real_train_fraction)
    for (s, domain, i, _, _), (scene_s, img, mask) in zip(jobs, scenes):
        split = SIM if domain is Domain.SIM else real_split[i]
        item_id = f"{domain.value.lower()}_{i:05d}"
        img_rel = f"{split}/images/{item_id}.png"
        mask_rel = f"{split}/masks/{item_id}.png"
        _write_png(root / img_rel, np.round(img * 255.0).astype(np.uint8))
        _write_png(root / mask_rel, (mask * 255).astype(np.uint8))
        manifest.items.append(
            ManifestItem(
                id=item_id,
                split=split,
                domain=domain.value,
                seed=scene_s,
                image=img_rel,
                mask=mask_rel,
                image_sha256=_sha256(root / img_rel),
                mask_sha256=_sha256(root / mask_rel),
                audit_only=split == REAL_UL,
            )
        )
    (root / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


class DatasetReader:
    """Loads images and masks listed in a manifest and counts every access.

    Masks of ``audit_only`` items (the unlabeled target split) are refused
    unless ``audit=True`` is passed explicitly.
    """

    def __init__(self, manifest: DatasetManifest | str | Path):
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.load(manifest)
        self.manifest = manifest
        self.image_reads: Counter = Counter()
        self.mask_reads: Counter = Counter()

    def items(self, split: str) -> list[ManifestItem]:
        return self.manifest.split(split)

    def load_image(self, item: ManifestItem) -> np.ndarray:
        self.image_reads[item.split] += 1
        with PILImage.open(self.manifest.root / item.image) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0

    def load_mask(self, item: ManifestItem, audit: bool = False) -> np.ndarray:
        if item.audit_only and not audit:
            raise LabelHygieneError(f"mask of {item.id} ({item.split}) is audit-only")
        self.mask_reads[item.split] += 1
        with PILImage.open(self.manifest.root / item.mask) as im:
            return (np.asarray(im.convert("L")) > 127).astype(np.uint8)

    def load_images(self, items: Iterable[ManifestItem]) -> np.ndarray:
        return np.stack([self.load_image(it) for it in items])

    def load_masks(self, items: Sequence[ManifestItem], audit: bool = False) -> np.ndarray:
        return np.stack([self.load_mask(it, audit=audit) for it in items])
