"""Synthetic road-scene benchmark with an appearance-only domain shift.

Scenes are drawn procedurally: sky above a random horizon, buildings standing
on it, a road trapezoid rising from the bottom edge, terrain background and
two small-object classes (blobs and thin poles). Source and target share the
same scene distribution; the target only differs by a channel-wise affine
color transform, sensor noise and a low-frequency texture jitter.

Files: RGB PNG images, 8-bit single-channel PNG labels with 255 = IGNORE,
and a JSON manifest per split.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from mlsl.grid import IGNORE, InvalidLabelError

MANIFEST_VERSION = 1
IGNORE_FILE_VALUE = 255
DOMAINS = ("source", "source-val", "target-train", "target-val")

CLASS_NAMES = ("background", "road", "sky", "building", "small-a", "small-b")
BACKGROUND, ROAD, SKY, BUILDING, SMALL_A, SMALL_B = range(6)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 6
    height: int = 64
    width: int = 64
    colors: tuple = (
        (0.40, 0.50, 0.30),  # background / terrain
        (0.45, 0.45, 0.50),  # road
        (0.50, 0.65, 0.85),  # sky
        (0.60, 0.45, 0.40),  # building
        (0.80, 0.30, 0.35),  # small-a
        (0.75, 0.70, 0.25),  # small-b
    )
    color_jitter: float = 0.04  # per-image, per-class color offset (std)
    pixel_noise: float = 0.03
    texture: float = 0.06  # amplitude of the per-class texture patterns
    small_a_size: tuple = (3, 6)
    small_a_count: tuple = (1, 3)
    small_b_size: tuple = (6, 12)  # pole height; width is 1-2 px
    small_b_count: tuple = (1, 3)

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"scene renderer draws exactly {len(CLASS_NAMES)} classes")
        if len(self.colors) != self.num_classes:
            raise ValueError("need one color per class")
        if self.height < 16 or self.width < 16:
            raise ValueError("scenes need at least 16x16 pixels")


@dataclass(frozen=True)
class DomainShiftSpec:
    gain: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    noise: float = 0.0
    texture_jitter: float = 0.0

    @classmethod
    def identity(cls) -> "DomainShiftSpec":
        return cls()

    @classmethod
    def default(cls) -> "DomainShiftSpec":
        return cls((0.7, 0.9, 1.1), (0.1, 0.0, -0.05), 0.02, 0.03)

    @property
    def is_identity(self) -> bool:
        return self == DomainShiftSpec()


# -- rendering -------------------------------------------------------------


def render_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.full((h, w), BACKGROUND, dtype=np.int64)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    horizon = int(rng.uniform(0.3, 0.5) * h)
    labels[:horizon] = SKY

    for _ in range(rng.integers(1, 4)):
        bw = int(rng.uniform(0.12, 0.3) * w)
        bh = int(rng.uniform(0.12, 0.3) * h)
        left = int(rng.integers(0, w - bw + 1))
        top = max(horizon - bh, 0)
        labels[top:horizon, left : left + bw] = BUILDING

    road_top = horizon + int(rng.integers(2, 7))
    centre = rng.uniform(0.35, 0.65) * w
    half_top = rng.uniform(0.03, 0.08) * w
    slope = rng.uniform(0.35, 0.7)
    half = half_top + (rows - road_top) * slope
    labels[(rows >= road_top) & (np.abs(cols - centre) <= half)] = ROAD

    ground = max(horizon, 1)
    for _ in range(rng.integers(spec.small_a_count[0], spec.small_a_count[1] + 1)):
        s = int(rng.integers(spec.small_a_size[0], spec.small_a_size[1] + 1))
        t = int(rng.integers(ground, h - s + 1))
        l = int(rng.integers(0, w - s + 1))
        labels[t : t + s, l : l + s] = SMALL_A
    for _ in range(rng.integers(spec.small_b_count[0], spec.small_b_count[1] + 1)):
        ph = int(rng.integers(spec.small_b_size[0], spec.small_b_size[1] + 1))
        pw = int(rng.integers(1, 3))
        bottom = int(rng.integers(ground + ph // 2, h + 1))
        l = int(rng.integers(0, w - pw + 1))
        labels[max(bottom - ph, 0) : bottom, l : l + pw] = SMALL_B
    return labels


def _texture(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-class brightness patterns in [-1, 1]: windows, lane stripes, speckle."""
    h, w = labels.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    tex = np.zeros((h, w))
    period = int(rng.integers(3, 6))
    windows = ((rows % period) < period // 2) & ((cols % period) < period // 2)
    tex[labels == BUILDING] = np.where(windows, -1.0, 0.5)[labels == BUILDING]
    speckle = rng.uniform(-1.0, 1.0, size=(h, w))
    terrain = labels == BACKGROUND
    tex[terrain] = speckle[terrain]
    sky = labels == SKY
    tex[sky] = np.broadcast_to((rows / h) * 2 - 1, (h, w))[sky]
    return tex


def render_image(labels: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    colors = np.asarray(spec.colors, dtype=np.float64)
    colors = colors + rng.normal(0.0, spec.color_jitter, size=colors.shape)
    img = colors[labels]
    img += spec.texture * _texture(labels, rng)[..., None]
    img += rng.normal(0.0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _smooth_noise(h: int, w: int, rng: np.random.Generator, cell: int = 8) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def apply_shift(img: np.ndarray, shift: DomainShiftSpec, rng: np.random.Generator) -> np.ndarray:
    if shift.is_identity:
        return img
    out = img * np.asarray(shift.gain) + np.asarray(shift.offset)
    if shift.texture_jitter:
        out += shift.texture_jitter * _smooth_noise(img.shape[0], img.shape[1], rng)[..., None]
    if shift.noise:
        out += rng.normal(0.0, shift.noise, size=img.shape)
    return np.clip(out, 0.0, 1.0)


def render_sample(spec: SceneSpec, shift: DomainShiftSpec, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image, labels) pair; image is uint8-quantized, as it would be on disk."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    labels = render_labels(spec, rng)
    img = apply_shift(render_image(labels, spec, rng), shift, rng)
    return quantize(img), labels


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# -- file I/O --------------------------------------------------------------


def save_image(img: np.ndarray, path: Path | str) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_labelmap(labels: np.ndarray, path: Path | str) -> None:
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= IGNORE_FILE_VALUE))
    if bad.any():
        raise InvalidLabelError("label values must be IGNORE or in [0, 255)")
    data = np.where(labels == IGNORE, IGNORE_FILE_VALUE, labels).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_labelmap(path: Path | str, num_classes: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise InvalidLabelError(f"{path}: expected an 8-bit single-channel image, got mode {im.mode}")
        data = np.asarray(im, dtype=np.int64)
    labels = np.where(data == IGNORE_FILE_VALUE, IGNORE, data)
    if num_classes is not None:
        bad = (labels != IGNORE) & (labels >= num_classes)
        if bad.any():
            r, c = (int(v) for v in np.argwhere(bad)[0])
            raise InvalidLabelError(
                f"{path}: pixel (row={r}, col={c}) has value {int(labels[r, c])}, not a class in [0, {num_classes})"
            )
    return labels


def atomic_write_text(path: Path | str, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- manifests -------------------------------------------------------------


@dataclass
class Manifest:
    domain: str
    num_classes: int
    entries: list  # dicts with "image" and optional "label", paths relative to root
    root: Path = field(default=Path("."))
    stats: dict = field(default_factory=dict)

    @property
    def has_labels(self) -> bool:
        return all("label" in e for e in self.entries)

    def image_paths(self) -> list[Path]:
        return [self.root / e["image"] for e in self.entries]

    def label_paths(self) -> list[Path]:
        return [self.root / e["label"] for e in self.entries]

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "domain": self.domain,
            "C": self.num_classes,
            "entries": self.entries,
            "stats": self.stats,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def save(self, path: Path | str) -> None:
        atomic_write_text(path, json.dumps(self.to_json(), indent=2))


def load_manifest(path: Path | str) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    domain = doc.get("domain")
    if domain not in DOMAINS:
        raise ManifestError(f"{path}: unknown domain {domain!r}")
    entries = doc.get("entries") or []
    if not entries:
        raise ManifestError("manifest has zero entries")
    root = path.parent
    problems, missing = [], []
    for i, e in enumerate(entries):
        if "image" not in e:
            problems.append(f"entry {i} has no image path")
            continue
        if domain == "target-train" and "label" in e:
            problems.append(f"entry {i}: target-train entries must not carry labels ({e['label']})")
        for key in ("image", "label"):
            if key in e and not (root / e[key]).is_file():
                missing.append(e[key])
    if missing:
        problems.append("missing files: " + ", ".join(missing))
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    return Manifest(domain, int(doc["C"]), entries, root, doc.get("stats", {}))


def gen_dataset(
    out_dir: Path | str,
    scene: SceneSpec,
    shift: DomainShiftSpec,
    n: int,
    seed: int,
    domain: str = "source",
) -> Manifest:
    """Render ``n`` scenes into ``out_dir`` and write ``out_dir/manifest.json``.

    Target-train labels are written under ``out_dir/eval_labels`` only and
    left out of the manifest.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e
    hidden = domain == "target-train"
    if hidden:
        (out / "eval_labels").mkdir(exist_ok=True)
    entries = []
    class_pixels = np.zeros(scene.num_classes, dtype=np.int64)
    for i in range(n):
        img, labels = render_sample(scene, shift, seed, i)
        name = f"{i:05d}.png"
        save_image(img, out / "images" / name)
        save_labelmap(labels, out / ("eval_labels" if hidden else "labels") / name)
        class_pixels += np.bincount(labels.ravel(), minlength=scene.num_classes)
        entry = {"image": f"images/{name}"}
        if not hidden:
            entry["label"] = f"labels/{name}"
        entries.append(entry)
    if hidden:
        (out / "labels").rmdir()
    stats = {
        "n": n,
        "height": scene.height,
        "width": scene.width,
        "seed": seed,
        "class_pixel_fraction": (class_pixels / class_pixels.sum()).round(6).tolist(),
        "scene": asdict(scene),
        "shift": asdict(shift),
    }
    manifest = Manifest(domain, scene.num_classes, entries, out, stats)
    manifest.save(out / "manifest.json")
    return manifest


def hidden_label_paths(manifest: Manifest) -> list[Path]:
    """Evaluation-only ground truth for a target-train manifest."""
    return [manifest.root / "eval_labels" / Path(e["image"]).name for e in manifest.entries]


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray | None  # (N, H, W) or None
    names: list

    def __len__(self) -> int:
        return len(self.images)


def load_dataset(manifest: Manifest, hidden: bool = False) -> Dataset:
    """Load a manifest into memory. ``hidden=True`` reads the eval-only labels."""
    images = np.stack([load_image(p) for p in manifest.image_paths()])
    labels = None
    if hidden:
        labels = np.stack([load_labelmap(p, manifest.num_classes) for p in hidden_label_paths(manifest)])
    elif manifest.has_labels:
        labels = np.stack([load_labelmap(p, manifest.num_classes) for p in manifest.label_paths()])
    names = [Path(e["image"]).stem for e in manifest.entries]
    return Dataset(images, labels, names)
