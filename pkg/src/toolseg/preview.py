"""Grid previews of seeded perturbation draws."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import perturb, plotting
from .errors import DataError, ParameterError
from .perturb import Scheme


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def tile_grid(tiles: list[np.ndarray], ncols: int) -> np.ndarray:
    """Tiles side by side without gutters; unused cells stay black."""
    h, w, c = tiles[0].shape
    nrows = (len(tiles) + ncols - 1) // ncols
    grid = np.zeros((nrows * h, ncols * w, c), tiles[0].dtype)
    for k, t in enumerate(tiles):
        r, q = divmod(k, ncols)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = t
    return grid


def perturb_preview(
    img_path: str | Path,
    scheme: Scheme | str,
    n: int,
    out_path: str | Path,
    seed: int = 0,
    geom: bool = False,
    ncols: int = 4,
) -> dict:
    """Render ``n`` draws (seeds ``seed .. seed+n-1``) of ``scheme`` applied to one image.

    Writes the bare pixel grid to ``out_path`` (PNG), the op labels to a
    ``.json`` sidecar and a captioned figure to ``<stem>_labeled.png``.
    With ``geom`` set each tile is first given a random affine/flip, as in training.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    scheme = Scheme(scheme)
    try:
        with Image.open(img_path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {img_path}: {exc}") from exc
    tiles, labels = [], []
    for k in range(n):
        s = seed + k
        x = perturb.apply_geom(perturb.draw_geom(s), img)[0] if geom else img
        spec = perturb.draw_perturbation(scheme, s)
        tiles.append(_to_u8(perturb.apply(spec, x)))
        labels.append({"seed": s, "ops": spec.labels(), "params": [p for _, p in spec.ops]})
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile_grid(tiles, min(ncols, n))).save(out_path, format="PNG")
    sidecar = out_path.with_suffix(".json")
    sidecar.write_text(json.dumps({"scheme": scheme.value, "geom": geom, "tiles": labels},
                                  indent=1, sort_keys=True, default=float) + "\n")
    figure = out_path.with_name(out_path.stem + "_labeled.png")
    captions = [f"{d['seed']}: " + (" + ".join(d["ops"]) or "none") for d in labels]
    plotting.labeled_grid([t / 255.0 for t in tiles], captions, figure, ncols=ncols)
    return {"grid": out_path, "labels": sidecar, "figure": figure, "tiles": labels}
