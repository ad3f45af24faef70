"""Procedural vehicle-like images for desk-scale re-identification runs.

Every identity is a *model template* (silhouette, cabin, windows, wheels,
body colour shared by all identities of that model) plus a handful of small
high-contrast glyphs at identity-specific positions. Two identities of the
same model therefore differ only in those glyphs, which is exactly the signal
a coarse reconstruction should smooth away and a residual should keep.

Each view applies a random similarity warp, a brightness jitter and a fresh
background. Glyph pixels are written to a binary mask next to each image.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ConfigurationError, DatasetError
from .dataset import Manifest, ManifestEntry

MODEL_PALETTE = [
    (200, 40, 40), (40, 90, 200), (60, 160, 70), (220, 180, 40), (130, 60, 170),
    (230, 120, 30), (40, 170, 170), (150, 150, 155), (110, 70, 40), (200, 80, 150),
]
GLYPH_PALETTE = [(255, 255, 255), (10, 10, 10), (255, 240, 0), (0, 230, 255), (255, 0, 200)]
GLYPH_SHAPES = ("square", "cross", "disc", "bar", "triangle")


@dataclass
class SyntheticSpec:
    num_models: int = 5
    identities_per_model: int = 20
    views_per_identity: int = 10
    image_size: int = 64
    detail_marks_per_identity: int = 4
    seed: int = 0
    query_per_identity: int = 1
    gallery_per_identity: int = 3
    num_cameras: int = 4
    background_noise: float = 3.0

    def validate(self):
        counts = {k: getattr(self, k) for k in (
            "num_models", "identities_per_model", "views_per_identity", "image_size",
            "detail_marks_per_identity", "num_cameras")}
        bad = [k for k, v in counts.items() if int(v) <= 0]
        if bad:
            raise ConfigurationError(f"synthetic spec counts must be positive: {', '.join(bad)}")
        if self.query_per_identity < 0 or self.gallery_per_identity < 0:
            raise ConfigurationError("query/gallery counts must be >= 0")
        if self.query_per_identity and not self.gallery_per_identity:
            raise ConfigurationError("query views need at least one gallery view per identity")
        if self.query_per_identity + self.gallery_per_identity >= self.views_per_identity:
            raise ConfigurationError(
                "views_per_identity must leave at least one training view after "
                f"{self.query_per_identity} query + {self.gallery_per_identity} gallery views")
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be >= 16, got {self.image_size}")

    @property
    def num_identities(self) -> int:
        return self.num_models * self.identities_per_model


def _rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _ellipse(cx, cy, rx, ry, n=16):
    return [(cx + rx * math.cos(2 * math.pi * i / n), cy + ry * math.sin(2 * math.pi * i / n))
            for i in range(n)]


def _glyph_polygons(shape, cx, cy, s):
    """Polygons in template units for one glyph of half-size ``s``."""
    if shape == "square":
        return [_rect(cx - s, cy - s, cx + s, cy + s)]
    if shape == "cross":
        t = s / 2.5
        return [_rect(cx - s, cy - t, cx + s, cy + t), _rect(cx - t, cy - s, cx + t, cy + s)]
    if shape == "disc":
        return [_ellipse(cx, cy, s, s, n=10)]
    if shape == "bar":
        return [_rect(cx - 1.6 * s, cy - s / 2, cx + 1.6 * s, cy + s / 2)]
    return [[(cx, cy - s), (cx + s, cy + s), (cx - s, cy + s)]]


def _make_template(rng, model_index):
    """Vehicle layout in unit coordinates (image spans [0, 1] x [0, 1])."""
    body_w = rng.uniform(0.62, 0.78)
    body_h = rng.uniform(0.20, 0.26)
    body_top = rng.uniform(0.46, 0.52)
    cabin_w = body_w * rng.uniform(0.45, 0.65)
    cabin_h = rng.uniform(0.14, 0.2)
    cabin_off = rng.uniform(-0.08, 0.08)
    return {
        "model": model_index,
        "color": MODEL_PALETTE[model_index % len(MODEL_PALETTE)],
        "body": (0.5 - body_w / 2, body_top, 0.5 + body_w / 2, body_top + body_h),
        "cabin": (0.5 + cabin_off - cabin_w / 2, body_top - cabin_h, 0.5 + cabin_off + cabin_w / 2,
                  body_top),
        "slant": rng.uniform(0.03, 0.07),
        "wheel_r": rng.uniform(0.06, 0.08),
        "wheel_inset": rng.uniform(0.08, 0.14),
        "window_split": rng.uniform(0.4, 0.6),
    }


def _make_identity(rng, template, num_marks):
    bx0, by0, bx1, by1 = template["body"]
    cx0, cy0, cx1, cy1 = template["cabin"]
    marks = []
    regions = [(bx0 + 0.04, by0 + 0.04, bx1 - 0.04, by1 - 0.04)] * 3 + \
              [(cx0 + 0.06, cy0 + 0.04, cx1 - 0.06, cy1 - 0.02)]
    taken = []
    for i in range(num_marks):
        region = regions[int(rng.integers(len(regions)))]
        for _ in range(20):
            x = rng.uniform(region[0], region[2])
            y = rng.uniform(region[1], region[3])
            if all(abs(x - tx) > 0.07 or abs(y - ty) > 0.07 for tx, ty in taken):
                break
        taken.append((x, y))
        marks.append({
            "x": float(x), "y": float(y),
            "shape": GLYPH_SHAPES[int(rng.integers(len(GLYPH_SHAPES)))],
            "color": GLYPH_PALETTE[int(rng.integers(len(GLYPH_PALETTE)))],
            "size": float(rng.uniform(0.028, 0.04)),
        })
    return marks


def _affine(rng, size):
    angle = math.radians(rng.uniform(-6, 6))
    scale = rng.uniform(0.9, 1.08) * size
    tx = rng.uniform(-0.05, 0.05) * size
    ty = rng.uniform(-0.05, 0.05) * size
    c, s = math.cos(angle) * scale, math.sin(angle) * scale
    centre = size / 2

    def apply(points):
        out = []
        for x, y in points:
            u, v = x - 0.5, y - 0.5
            out.append((centre + c * u - s * v + tx, centre + s * u + c * v + ty))
        return out

    return apply


def _background(rng, size, noise):
    base = rng.uniform(70, 170)
    tint = rng.uniform(-15, 15, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-30, 30, size=2)
    field = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    img = field[..., None] + tint[None, None, :]
    img = img + rng.normal(0, noise, size=img.shape)
    # ground strip under the vehicle
    ground = yy > rng.uniform(0.78, 0.86)
    img[ground] *= 0.7
    return img


def render_view(rng, template, marks, size, noise=3.0):
    """Render one view; returns (uint8 HxWx3 image, bool HxW glyph mask)."""
    warp = _affine(rng, size)
    canvas = Image.new("RGB", (size, size))
    draw = ImageDraw.Draw(canvas)
    colour = template["color"]
    bx0, by0, bx1, by1 = template["body"]
    cx0, cy0, cx1, cy1 = template["cabin"]
    sl = template["slant"]
    # vehicle layers: draw onto a black canvas, blend over background with a coverage mask
    cover = Image.new("L", (size, size))
    cdraw = ImageDraw.Draw(cover)
    wr, wi = template["wheel_r"], template["wheel_inset"]
    polys = [
        (_rect(bx0, by0, bx1, by1), colour),
        ([(cx0 + sl, cy0), (cx1 - sl, cy0), (cx1, cy1), (cx0, cy1)], colour),
    ]
    split = cx0 + (cx1 - cx0) * template["window_split"]
    win = (40, 50, 70)
    polys.append(([(cx0 + sl + 0.015, cy0 + 0.025), (split - 0.01, cy0 + 0.025),
                   (split - 0.01, cy1 - 0.005), (cx0 + 0.02, cy1 - 0.005)], win))
    polys.append(([(split + 0.01, cy0 + 0.025), (cx1 - sl - 0.015, cy0 + 0.025),
                   (cx1 - 0.02, cy1 - 0.005), (split + 0.01, cy1 - 0.005)], win))
    for wx in (bx0 + wi, bx1 - wi):
        polys.append((_ellipse(wx, by1, wr, wr), (20, 20, 20)))
        polys.append((_ellipse(wx, by1, wr * 0.45, wr * 0.45), (120, 120, 120)))
    for pts, fill in polys:
        p = warp(pts)
        draw.polygon(p, fill=fill)
        cdraw.polygon(p, fill=255)

    mask_img = Image.new("L", (size, size))
    mdraw = ImageDraw.Draw(mask_img)
    for mark in marks:
        for pts in _glyph_polygons(mark["shape"], mark["x"], mark["y"], mark["size"]):
            p = warp(pts)
            draw.polygon(p, fill=tuple(mark["color"]))
            cdraw.polygon(p, fill=255)
            mdraw.polygon(p, fill=255)

    fg = np.asarray(canvas, dtype=np.float64)
    alpha = (np.asarray(cover, dtype=np.float64) / 255.0)[..., None]
    bg = _background(rng, size, noise)
    img = alpha * fg + (1 - alpha) * bg
    img *= rng.uniform(0.85, 1.15)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img, np.asarray(mask_img) > 0


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write images, glyph masks, ``manifest.csv`` and ``manifest.meta.json``.

    Views of each identity are assigned query first, then gallery, then
    train. Identity ids are shared across splits, so train ids are dense
    ``0..num_identities-1``. Output is a pure function of ``spec``.
    """
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    templates = [_make_template(rng, m) for m in range(spec.num_models)]
    entries = []
    identities = []
    for model in range(spec.num_models):
        for j in range(spec.identities_per_model):
            pid = model * spec.identities_per_model + j
            marks = _make_identity(rng, templates[model], spec.detail_marks_per_identity)
            identities.append({"identity_id": pid, "template_id": model, "marks": marks})
            for v in range(spec.views_per_identity):
                img, mask = render_view(rng, templates[model], marks, spec.image_size,
                                        spec.background_noise)
                camera = int(rng.integers(spec.num_cameras))
                if v < spec.query_per_identity:
                    split = "query"
                elif v < spec.query_per_identity + spec.gallery_per_identity:
                    split = "gallery"
                else:
                    split = "train"
                rel = f"images/{pid:05d}_{v:03d}.png"
                try:
                    Image.fromarray(img).save(out / rel)
                    Image.fromarray(mask.astype(np.uint8) * 255).save(out / (rel + ".mask.png"))
                except OSError as exc:
                    raise DatasetError(f"failed writing {out / rel}: {exc}") from exc
                entries.append(ManifestEntry(rel, pid, camera, split))

    manifest = Manifest(entries, root=out)
    manifest.save(out / "manifest.csv")
    meta = {
        "spec": asdict(spec),
        "templates": [{k: v for k, v in t.items()} for t in templates],
        "identities": identities,
    }
    (out / "manifest.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return manifest
