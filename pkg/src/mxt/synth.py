"""Deterministic synthetic product catalog with distant-supervision labels.

Each product gets a templated text and a 32x32 PPM image.  The default
attribute design:

* ``color``       - body fill colour; named in the text with p=0.9
* ``sleeve type`` - sleeve-bar length; named with p=0.5
* ``item length`` - body height; never named (value-absent by construction)
* ``pattern``     - text only; named with p=0.8

Zero-shot holdouts are (product type, attribute, value) triples that never
appear as a training or validation label but do occur in test.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import write_jsonl
from .image import ImageRaster, encode_ppm
from .text import words

BACKGROUND = (128, 128, 128)
PALETTE = {
    "red": (200, 30, 30),
    "blue": (30, 60, 200),
    "green": (30, 160, 60),
    "yellow": (230, 210, 40),
    "black": (20, 20, 20),
    "white": (240, 240, 240),
    "purple": (130, 40, 160),
    "orange": (240, 130, 20),
}
BODY_HEIGHT = {"mini": 10, "midi": 16, "maxi": 24}
SLEEVE_LENGTH = {"sleeveless": 0, "half": 6, "full": 12}
BODY_TOP, BODY_LEFT, BODY_WIDTH = 4, 12, 8
SLEEVE_ROWS = (5, 8)
RENDER_RULES = ("fill", "sleeve_bars", "body_height", "overlay")

BRANDS = ["aurora", "zenith", "lumen", "kestrel", "marigold", "tessera", "nimbus", "orchid"]
FILLERS = [
    "made from soft breathable fabric",
    "ideal for everyday wear",
    "easy care machine wash",
    "comfortable regular fit",
    "a versatile wardrobe staple",
    "designed for all day comfort",
]


class SpecError(ValueError):
    pass


@dataclass
class AttributeSpec:
    values: list[str]
    text_mention_prob: float
    image_encodes: bool = False
    render_rule: str | None = None


def default_attributes() -> dict[str, AttributeSpec]:
    return {
        "color": AttributeSpec(list(PALETTE), 0.9, True, "fill"),
        "sleeve type": AttributeSpec(["full", "half", "sleeveless"], 0.5, True, "sleeve_bars"),
        "item length": AttributeSpec(["mini", "midi", "maxi"], 0.0, True, "body_height"),
        "pattern": AttributeSpec(["striped", "solid", "floral"], 0.8, False, "overlay"),
    }


def default_product_types() -> dict[str, list[str]]:
    return {
        "dress": ["color", "sleeve type", "item length", "pattern"],
        "shirt": ["color", "sleeve type", "pattern"],
        "kurta": ["color", "sleeve type", "item length", "pattern"],
        "pants": ["color", "pattern"],
        "saree": ["color", "pattern"],
    }


@dataclass
class CatalogSpec:
    product_types: dict[str, list[str]] = field(default_factory=default_product_types)
    attributes: dict[str, AttributeSpec] = field(default_factory=default_attributes)
    zero_shot_holdout: list[tuple[str, str, str]] = field(
        default_factory=lambda: [("shirt", "color", "purple"), ("kurta", "pattern", "floral")])
    sizes: dict[str, int] = field(default_factory=lambda: {"train": 2000, "val": 400, "test": 400})
    seed: int = 0
    image_size: int = 32
    render_pattern: bool = False
    distractor_prob: float = 0.3
    image_noise: int = 0  # amplitude of grayscale background noise; 0 disables
    min_holdout_test: int = 5

    def __post_init__(self):
        self.attributes = {k: v if isinstance(v, AttributeSpec) else AttributeSpec(**v)
                           for k, v in self.attributes.items()}
        self.zero_shot_holdout = [tuple(h) for h in self.zero_shot_holdout]
        self.validate()

    def validate(self) -> None:
        for pt, attrs in self.product_types.items():
            for a in attrs:
                if a not in self.attributes:
                    raise SpecError(f"product type {pt!r} uses undefined attribute {a!r}")
        for name, a in self.attributes.items():
            if len(a.values) < 2:
                raise SpecError(f"attribute {name!r} needs at least 2 values")
            if not 0.0 <= a.text_mention_prob <= 1.0:
                raise SpecError(f"attribute {name!r}: text_mention_prob outside [0, 1]")
            if a.image_encodes and not a.render_rule:
                raise SpecError(f"attribute {name!r} is image-encoded but has no render rule")
            if a.render_rule is not None and a.render_rule not in RENDER_RULES:
                raise SpecError(f"attribute {name!r}: unknown render rule {a.render_rule!r}")
            drawable = {"fill": PALETTE, "sleeve_bars": SLEEVE_LENGTH, "body_height": BODY_HEIGHT}.get(a.render_rule)
            if a.image_encodes and drawable is not None and not set(a.values) <= set(drawable):
                raise SpecError(f"attribute {name!r}: values {sorted(set(a.values) - set(drawable))} "
                                f"cannot be drawn by rule {a.render_rule!r}")
        for pt, attr, value in self.zero_shot_holdout:
            if pt not in self.product_types or attr not in self.product_types[pt]:
                raise SpecError(f"holdout ({pt}, {attr}, {value}) names an unknown PT-attribute")
            vals = self.attributes[attr].values
            if value not in vals:
                raise SpecError(f"holdout value {value!r} not in the {attr!r} inventory")
            held = {v for p, a, v in self.zero_shot_holdout if p == pt and a == attr}
            if len(set(vals) - held) < 1 or len(vals) < 2:
                raise SpecError(f"holdout leaves no trainable value for ({pt}, {attr})")
        if self.image_size < 32:
            raise SpecError("image_size must be at least 32 (the rendered layout is 32x32)")
        if not 0 <= self.image_noise <= 64:
            raise SpecError("image_noise must be in [0, 64]")
        for k in ("train", "val", "test"):
            if self.sizes.get(k, 0) < 1:
                raise SpecError(f"split size for {k!r} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zero_shot_holdout"] = [list(h) for h in self.zero_shot_holdout]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CatalogSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown catalog spec keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# rendering


def render_image(fields: Mapping[str, str], size: int = 32, render_pattern: bool = False) -> ImageRaster:
    """Gray background, a body rectangle in the product colour whose height
    encodes item length, and sleeve bars whose length encodes sleeve type."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    rgb = PALETTE[fields.get("color", "white")]
    height = BODY_HEIGHT[fields.get("item length", "midi")]
    sleeve = SLEEVE_LENGTH[fields.get("sleeve type", "sleeveless")]
    top, left, right = BODY_TOP, BODY_LEFT, BODY_LEFT + BODY_WIDTH
    img[top:top + height, left:right] = rgb
    if sleeve:
        r0, r1 = SLEEVE_ROWS
        img[r0:r1, left - sleeve:left] = rgb
        img[r0:r1, right:right + sleeve] = rgb
    if render_pattern and "pattern" in fields:
        shade = tuple(int(c * 0.6) for c in rgb)
        body = img[top:top + height, left:right]
        if fields["pattern"] == "striped":
            body[1::3] = shade
        elif fields["pattern"] == "floral":
            body[1::4, 1::4] = shade
    return ImageRaster(img)


def add_background_noise(img: ImageRaster, amplitude: int, rng: np.random.Generator) -> ImageRaster:
    """Perturb background pixels by a shared gray offset in [-amplitude, amplitude]."""
    data = img.data.copy()
    bg = (data == BACKGROUND).all(axis=-1)
    noise = rng.integers(-amplitude, amplitude + 1, size=bg.shape)
    gray = np.clip(np.int64(BACKGROUND[0]) + noise, 0, 255).astype(np.uint8)
    data[bg] = gray[bg][:, None]
    return ImageRaster(data)


def decode_image(img: ImageRaster) -> dict[str, str]:
    """Rule-based pixel reader recovering color, sleeve type and item length."""
    px = img.data.astype(int)
    col = BODY_LEFT + BODY_WIDTH // 2
    probe = px[BODY_TOP + 1, col]
    color = min(PALETTE, key=lambda c: int(((np.array(PALETTE[c]) - probe) ** 2).sum()))
    rgb = np.array(PALETTE[color])

    def matches(p):
        return np.abs(p - rgb).sum(axis=-1) < 60

    height = int(matches(px[:, col]).sum())
    sleeve = int(matches(px[SLEEVE_ROWS[0] + 1, :BODY_LEFT]).sum())
    length = min(BODY_HEIGHT, key=lambda k: abs(BODY_HEIGHT[k] - height))
    sleeve_type = min(SLEEVE_LENGTH, key=lambda k: abs(SLEEVE_LENGTH[k] - sleeve))
    return {"color": color, "sleeve type": sleeve_type, "item length": length}


# ---------------------------------------------------------------------------
# text


def _mention(attr: str, value: str) -> str:
    if attr == "color":
        return value
    if attr == "sleeve type":
        return "sleeveless design" if value == "sleeveless" else f"features {value} sleeves"
    if attr == "pattern":
        return f"{value} pattern"
    return f"{value} {attr}"


def _value_in_text(value: str, text: str) -> bool:
    tw = set(words(text))
    return all(w in tw for w in words(value))


@dataclass
class Product:
    id: str
    product_type: str
    gold: dict[str, str]
    text: str = ""
    planted: list[str] = field(default_factory=list)


def _compose_text(p: Product, spec: CatalogSpec, rng: np.random.Generator) -> str:
    mentioned = {a: rng.random() < spec.attributes[a].text_mention_prob for a in spec.product_types[p.product_type]}
    brand = BRANDS[rng.integers(len(BRANDS))]
    audience = "women's" if rng.random() < 0.5 else "men's"
    title = [brand, audience]
    if mentioned.get("color"):
        title.append(p.gold["color"])
    title.append(p.product_type)
    sentences = [" ".join(title)]
    extra = [_mention(a, p.gold[a]) for a in spec.product_types[p.product_type]
             if a != "color" and mentioned[a]]
    fill = [FILLERS[i] for i in rng.choice(len(FILLERS), size=2, replace=False)]
    body = extra + fill
    order = rng.permutation(len(body))
    sentences += [body[i] for i in order]
    if "color" in p.gold and rng.random() < spec.distractor_prob:
        others = [c for c in spec.attributes["color"].values if c != p.gold["color"]]
        sentences.append(f"pairs well with {others[rng.integers(len(others))]} accessories")
    for value in p.planted:
        sentences.append(f"inspired by {value} trends this season")
    return ". ".join(sentences)


# ---------------------------------------------------------------------------
# generation


@dataclass
class Catalog:
    spec: CatalogSpec
    splits: dict[str, list[dict]]
    images: dict[str, ImageRaster]
    products: dict[str, list[Product]]


def _sample_products(split: str, n: int, spec: CatalogSpec, rng: np.random.Generator) -> list[Product]:
    pts = list(spec.product_types)
    held = {(p, a, v) for p, a, v in spec.zero_shot_holdout}
    out = []
    for i in range(n):
        pt = pts[rng.integers(len(pts))]
        gold = {}
        for a in spec.product_types[pt]:
            vals = spec.attributes[a].values
            v = vals[rng.integers(len(vals))]
            if split != "test" and (pt, a, v) in held:
                allowed = [x for x in vals if (pt, a, x) not in held]
                v = allowed[rng.integers(len(allowed))]
            gold[a] = v
        out.append(Product(f"{split}-{i:05d}", pt, gold))
    return out


def _ensure_holdout_support(products: list[Product], spec: CatalogSpec) -> None:
    for pt, attr, value in spec.zero_shot_holdout:
        have = sum(1 for p in products if p.product_type == pt and p.gold[attr] == value)
        for p in products:
            if have >= spec.min_holdout_test:
                break
            if p.product_type == pt and p.gold[attr] != value:
                p.gold[attr] = value
                have += 1
        if have < spec.min_holdout_test:
            raise SpecError(f"test split has too few {pt} products to hold out ({attr}={value})")


def _plant_holdout_words(products: list[Product], spec: CatalogSpec, per_value: int = 3) -> None:
    for pt, _attr, value in spec.zero_shot_holdout:
        hosts = [p for p in products if p.product_type != pt][:per_value]
        for p in hosts:
            if value not in p.planted:
                p.planted.append(value)


def _records(p: Product, spec: CatalogSpec) -> list[dict]:
    held = {(a, b, c) for a, b, c in spec.zero_shot_holdout}
    rows = []
    for attr in spec.product_types[p.product_type]:
        value = p.gold[attr]
        rows.append({
            "id": f"{p.id}/{attr.replace(' ', '_')}",
            "product_type": p.product_type,
            "attribute": attr,
            "text": p.text,
            "image": f"images/{p.id}.ppm",
            "value": value,
            "value_in_text": _value_in_text(value, p.text),
            "zero_shot": (p.product_type, attr, value) in held,
        })
    return rows


def generate(spec: CatalogSpec, out_dir: str | Path | None = None) -> Catalog:
    """Build train/val/test splits (and write them under ``out_dir`` if given)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    products = {s: _sample_products(s, spec.sizes[s], spec, rng) for s in ("train", "val", "test")}
    _ensure_holdout_support(products["test"], spec)
    _plant_holdout_words(products["train"], spec)
    images, splits = {}, {}
    for s in ("train", "val", "test"):
        rows = []
        for p in products[s]:
            p.text = _compose_text(p, spec, rng)
            img = render_image(p.gold, spec.image_size, spec.render_pattern)
            if spec.image_noise:
                img = add_background_noise(img, spec.image_noise, rng)
            images[p.id] = img
            rows.extend(_records(p, spec))
        splits[s] = rows
    catalog = Catalog(spec, splits, images, products)
    if out_dir is not None:
        write_catalog(catalog, out_dir)
    return catalog


def write_catalog(catalog: Catalog, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for pid in sorted(catalog.images):
        (out / "images" / f"{pid}.ppm").write_bytes(encode_ppm(catalog.images[pid]))
    for s, rows in catalog.splits.items():
        write_jsonl(rows, out / f"{s}.jsonl")
    (out / "catalog_spec.json").write_text(json.dumps(catalog.spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_spec(path: str | Path) -> CatalogSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read catalog spec {path}: {exc}") from exc
    return CatalogSpec.from_dict(raw)
