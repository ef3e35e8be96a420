"""Synthetic organ-phantom datasets, the FTS tensor file format, and manifests.

Phantoms are 64x64 grayscale images in a fixed canonical layout: a large
rounded-rectangle "liver" upper-left, an ellipse "right kidney" lower-left,
its appearance-identical mirror twin "left kidney" lower-right (only the side
and a small vertical offset distinguish them), and a small crescent "spleen"
upper-right. Every class sits in its own disjoint placement region, so the
canonical orientation is never globally ambiguous.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import groups as G

FTS_MAGIC = b"FTS1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1, np.dtype(np.int32): 2}


class BadMagic(ValueError):
    """File does not start with the FTS1 magic."""


class TruncatedPayload(ValueError):
    """Payload length does not match dtype size times the product of dims."""


class UnsupportedDtype(ValueError):
    """Dtype not representable in the FTS format."""


def write_fts(path, tensor: np.ndarray) -> None:
    """Write `tensor` as magic | dtype u8 | ndim u8 | dims u32-LE | row-major payload."""
    arr = np.ascontiguousarray(tensor)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise UnsupportedDtype(f"dtype {arr.dtype} has no FTS code (f32/u8/i32 only)")
    if arr.ndim > 255:
        raise UnsupportedDtype("more than 255 dimensions")
    with open(path, "wb") as f:
        f.write(FTS_MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.tobytes(order="C"))


def read_fts(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FTS_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 6:
        raise TruncatedPayload(f"{path}: header truncated")
    code, ndim = struct.unpack("<BB", raw[4:6])
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise UnsupportedDtype(f"{path}: unknown dtype code {code}")
    head = 6 + 4 * ndim
    if len(raw) < head:
        raise TruncatedPayload(f"{path}: dims truncated")
    dims = struct.unpack(f"<{ndim}I", raw[6:head]) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    expected = count * dtype.itemsize
    if len(raw) - head != expected:
        raise TruncatedPayload(
            f"{path}: payload {len(raw) - head} bytes, expected {expected}"
        )
    return np.frombuffer(raw[head:], dtype=dtype).reshape(dims).copy()


# -- phantom specification ------------------------------------------------------


@dataclass(frozen=True)
class ClassSpec:
    """Placement/shape recipe for one phantom class, in canonical coordinates."""

    name: str
    shape: str  # ellipse | rounded_rect | crescent
    cy: tuple[int, int]  # centre row range (inclusive)
    cx: tuple[int, int]
    ry: tuple[int, int]  # half-extent ranges
    rx: tuple[int, int]
    intensity: tuple[float, float]


DEFAULT_CLASSES = (
    ClassSpec("liver", "rounded_rect", (18, 22), (19, 25), (8, 10), (8, 12), (0.72, 0.88)),
    ClassSpec("right kidney", "ellipse", (40, 44), (9, 13), (5, 7), (4, 6), (0.52, 0.66)),
    ClassSpec("left kidney", "ellipse", (46, 50), (50, 54), (5, 7), (4, 6), (0.52, 0.66)),
    ClassSpec("spleen", "crescent", (10, 13), (44, 50), (4, 6), (4, 6), (0.42, 0.58)),
)


@dataclass
class PhantomSpec:
    image_size: int = 64
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    presence_prob: float = 0.9
    noise_sigma: float = 0.03
    min_pixels: int = 30  # small-segment filter, rescaled from full-resolution practice
    seed: int = 0
    base_size: int = 64  # canvas the class geometry ranges refer to

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def scaled_classes(self) -> tuple[ClassSpec, ...]:
        """Class geometry rescaled from base_size to image_size."""
        if self.image_size == self.base_size:
            return self.classes
        s = self.image_size / self.base_size

        def rr(pair, lo=1):
            return (max(lo, round(pair[0] * s)), max(lo, round(pair[1] * s)))

        return tuple(
            ClassSpec(c.name, c.shape, rr(c.cy, 0), rr(c.cx, 0), rr(c.ry), rr(c.rx), c.intensity)
            for c in self.classes
        )

    def effective_min_pixels(self) -> int:
        s = self.image_size / self.base_size
        return max(4, round(self.min_pixels * s * s))


def _draw_blob(spec: ClassSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary mask for one blob; resamples until the min-pixel filter passes upstream."""
    cy = rng.integers(spec.cy[0], spec.cy[1] + 1)
    cx = rng.integers(spec.cx[0], spec.cx[1] + 1)
    ry = rng.integers(spec.ry[0], spec.ry[1] + 1)
    rx = rng.integers(spec.rx[0], spec.rx[1] + 1)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy = (ii - cy) / ry
    dx = (jj - cx) / rx
    if spec.shape == "ellipse":
        mask = dy * dy + dx * dx <= 1.0
    elif spec.shape == "rounded_rect":
        # superellipse exponent 4 gives softly rounded corners
        mask = dy**4 + dx**4 <= 1.0
    elif spec.shape == "crescent":
        outer = dy * dy + dx * dx <= 1.0
        off = 0.45 * rx
        dx2 = (jj - (cx + off)) / (0.8 * rx)
        dy2 = (ii - cy) / (0.8 * ry)
        inner = dy2 * dy2 + dx2 * dx2 <= 1.0
        mask = outer & ~inner
    else:
        raise ValueError(f"unknown shape family {spec.shape!r}")
    return mask


def _render_sample(spec: PhantomSpec, rng: np.random.Generator):
    size = spec.image_size
    classes = spec.scaled_classes()
    min_pixels = spec.effective_min_pixels()
    while True:
        present = rng.random(spec.class_count) < spec.presence_prob
        if present.any():
            break
    masks: dict[int, np.ndarray] = {}
    image = np.zeros((size, size), dtype=np.float64)
    for ci, cspec in enumerate(classes):
        if not present[ci]:
            continue
        for _ in range(64):
            mask = _draw_blob(cspec, size, rng)
            if int(mask.sum()) >= min_pixels:
                break
        else:
            raise RuntimeError(f"cannot satisfy min_pixels for class {cspec.name}")
        level = rng.uniform(*cspec.intensity)
        image[mask] = level
        masks[ci] = mask.astype(np.uint8)
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, masks


# -- manifest -------------------------------------------------------------------


@dataclass
class SampleEntry:
    id: str
    image: str  # path relative to the manifest directory
    masks: dict[int, str] = field(default_factory=dict)
    present: list[int] = field(default_factory=list)
    transform: dict | None = None  # {"rotation": r, "reflected": bool} when applied


@dataclass
class Manifest:
    name: str
    class_names: list[str]
    image_size: int
    canonical: bool
    samples: list[SampleEntry] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "class_names": self.class_names,
            "image_size": self.image_size,
            "canonical": self.canonical,
            "samples": [
                {
                    "id": s.id,
                    "image": s.image,
                    "masks": {str(k): v for k, v in s.masks.items()},
                    "present": s.present,
                    **({"transform": s.transform} if s.transform else {}),
                }
                for s in self.samples
            ],
        }

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / "manifest.json"
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
        self.root = root
        return path

    @classmethod
    def load(cls, root, validate: bool = True) -> "Manifest":
        root = Path(root)
        with open(root / "manifest.json") as f:
            doc = json.load(f)
        man = cls(
            name=doc["name"],
            class_names=list(doc["class_names"]),
            image_size=int(doc["image_size"]),
            canonical=bool(doc["canonical"]),
            root=root,
        )
        n_classes = len(man.class_names)
        for s in doc["samples"]:
            entry = SampleEntry(
                id=s["id"],
                image=s["image"],
                masks={int(k): v for k, v in s["masks"].items()},
                present=[int(c) for c in s["present"]],
                transform=s.get("transform"),
            )
            if validate:
                if not (root / entry.image).exists():
                    raise FileNotFoundError(f"manifest references missing {entry.image}")
                for ci, rel in entry.masks.items():
                    if not 0 <= ci < n_classes:
                        raise ValueError(f"class index {ci} out of range in {entry.id}")
                    if not (root / rel).exists():
                        raise FileNotFoundError(f"manifest references missing {rel}")
            man.samples.append(entry)
        return man

    def load_image(self, entry: SampleEntry) -> np.ndarray:
        return read_fts(Path(self.root) / entry.image)

    def load_mask(self, entry: SampleEntry, class_id: int) -> np.ndarray:
        """Binary mask for a class; all-zero when the class is absent."""
        rel = entry.masks.get(class_id)
        if rel is None:
            return np.zeros((self.image_size, self.image_size), dtype=np.uint8)
        return read_fts(Path(self.root) / rel)

    def load_masks(self, entry: SampleEntry) -> dict[int, np.ndarray]:
        return {ci: self.load_mask(entry, ci) for ci in entry.present}


def generate_dataset(spec: PhantomSpec, n_samples: int, out_dir) -> Manifest:
    """Render `n_samples` canonical phantoms with per-class masks; deterministic per seed."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for ci in range(spec.class_count):
        (out / "masks" / str(ci)).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    man = Manifest(
        name=f"phantom-{spec.image_size}-s{spec.seed}",
        class_names=spec.class_names,
        image_size=spec.image_size,
        canonical=True,
    )
    for i in range(n_samples):
        image, masks = _render_sample(spec, rng)
        sid = f"{i:05d}"
        img_rel = f"images/{sid}.fts"
        write_fts(out / img_rel, image)
        entry = SampleEntry(id=sid, image=img_rel, present=sorted(masks))
        for ci, mask in masks.items():
            rel = f"masks/{ci}/{sid}.fts"
            write_fts(out / rel, mask)
            entry.masks[ci] = rel
        man.samples.append(entry)
    man.save(out)
    return man


def apply_dataset_transforms(
    manifest: Manifest,
    action: G.GroupAction,
    seed: int,
    out_dir,
    elements: list[G.GroupElement] | None = None,
) -> Manifest:
    """Transform every image+mask pair by one random group element per sample.

    The element is recorded on each sample and the canonical flag is cleared.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_classes = len(manifest.class_names)
    for ci in range(n_classes):
        (out / "masks" / str(ci)).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pool = elements if elements is not None else action.elements()
    new = Manifest(
        name=manifest.name + "-trans",
        class_names=list(manifest.class_names),
        image_size=manifest.image_size,
        canonical=False,
    )
    for entry in manifest.samples:
        g = pool[int(rng.integers(0, len(pool)))]
        image = manifest.load_image(entry)
        img_rel = f"images/{entry.id}.fts"
        write_fts(out / img_rel, action.act(g, image))
        tentry = SampleEntry(
            id=entry.id,
            image=img_rel,
            present=list(entry.present),
            transform={"rotation": g.rotation, "reflected": g.reflected, "n": g.n},
        )
        for ci, rel in entry.masks.items():
            mask = read_fts(Path(manifest.root) / rel)
            new_rel = f"masks/{ci}/{entry.id}.fts"
            write_fts(out / new_rel, action.act(g, mask, mask=True))
            tentry.masks[ci] = new_rel
        new.samples.append(tentry)
    new.save(out)
    return new


def recorded_transform(entry: SampleEntry) -> G.GroupElement:
    if entry.transform is None:
        raise ValueError(f"sample {entry.id} carries no transform record")
    t = entry.transform
    return G.GroupElement(int(t["n"]), int(t["rotation"]), bool(t["reflected"]))
