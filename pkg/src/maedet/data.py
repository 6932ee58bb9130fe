"""Corpus handling: directory ingestion, synthetic corpus recipes,
deterministic train/test splits, and image -> patch-grid preprocessing.

A corpus is a directory with ``real/`` and ``fake/`` subdirectories of
images. Synthetic recipes generate desk-scale 32x32 corpora with controlled
statistics:

  textured-real   heterogeneous 1/f texture whose contrast varies across the
                  image (a smooth random gain field), plus i.i.d. pixel noise
                  — reconstruction error plateaus at the noise floor and
                  per-patch scores spread widely within one image;
  smooth-fake     heavily low-passed homogeneous texture, no pixel noise —
                  reconstruction error collapses toward zero once the
                  autoencoder has seen a few epochs;
  soft-fake       mildly blurred homogeneous texture with an intermediate
                  noise floor — sits between the other two families, which is
                  what makes single-threshold detectors fail across domains.

The per-family constants below were calibrated once against the toy
autoencoder at the default seeds and then frozen; tests depend on the bands
they produce, so treat them as part of the contract.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .backbone import BackboneHandle, PatchGrid, normalize_image, patchify
from .config import canonical_json, derive_seed
from .errors import DataError, FormatError, IngestError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1

# Resize target before center-cropping, as a fraction of the crop size
# (256/224, the usual evaluation convention).
_RESIZE_OVER_CROP = 256.0 / 224.0

LABELS = ("real", "fake")


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class CorpusEntry:
    rel_path: str
    label: str
    sha256: str


@dataclass
class CorpusManifest:
    name: str
    root: str
    entries: list[CorpusEntry]
    split_seed: int = 0
    recipe: str = ""
    manifest_hash: str = ""

    def __post_init__(self) -> None:
        if not self.manifest_hash:
            self.manifest_hash = _hash_entries(self.entries)

    def by_label(self, label: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.label == label]

    def path_of(self, entry: CorpusEntry) -> Path:
        return Path(self.root) / entry.rel_path

    def save(self, path: str | Path | None = None) -> Path:
        p = Path(path) if path is not None else Path(self.root) / MANIFEST_NAME
        doc = {
            "format_version": MANIFEST_FORMAT_VERSION,
            "name": self.name,
            "root": str(self.root),
            "split_seed": self.split_seed,
            "recipe": self.recipe,
            "manifest_hash": self.manifest_hash,
            "entries": [
                {"rel_path": e.rel_path, "label": e.label, "sha256": e.sha256}
                for e in self.entries
            ],
        }
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST_NAME
        try:
            doc = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read manifest {p}: {exc}") from exc
        try:
            entries = [
                CorpusEntry(e["rel_path"], e["label"], e["sha256"]) for e in doc["entries"]
            ]
            return cls(
                name=doc["name"],
                root=doc["root"],
                entries=entries,
                split_seed=doc.get("split_seed", 0),
                recipe=doc.get("recipe", ""),
                manifest_hash=doc.get("manifest_hash", ""),
            )
        except KeyError as exc:
            raise FormatError(f"manifest {p} is missing field {exc}") from exc


def _hash_entries(entries: list[CorpusEntry]) -> str:
    h = hashlib.sha256()
    for e in sorted(entries, key=lambda e: e.rel_path):
        h.update(f"{e.rel_path}\t{e.label}\t{e.sha256}\n".encode())
    return h.hexdigest()


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def scan_corpus(root: str | Path, name: str = "", split_seed: int = 0) -> CorpusManifest:
    """Build a manifest from a real/ + fake/ directory tree.

    Files PIL cannot decode are excluded with a logged warning. An empty
    class directory (missing, or nothing decodable) aborts ingestion.
    """
    root = Path(root)
    entries: list[CorpusEntry] = []
    for label in LABELS:
        class_dir = root / label
        files = sorted(p for p in class_dir.glob("**/*") if p.is_file()) if class_dir.is_dir() else []
        kept = 0
        for path in files:
            try:
                with Image.open(path) as img:
                    img.verify()
            except Exception as exc:
                logger.warning("excluding non-decodable file %s: %s", path, exc)
                continue
            entries.append(
                CorpusEntry(str(path.relative_to(root)), label, _file_sha256(path))
            )
            kept += 1
        if kept == 0:
            raise IngestError(f"corpus {root} has no decodable images under {label}/")
    return CorpusManifest(name=name or root.name, root=str(root), entries=entries, split_seed=split_seed)


# ---------------------------------------------------------------------------
# Deterministic splits


@dataclass(frozen=True)
class SplitIndex:
    train: tuple[CorpusEntry, ...]
    test: tuple[CorpusEntry, ...]
    split_hash: str


def split_corpus(manifest: CorpusManifest, seed: int, test_fraction: float = 0.5) -> SplitIndex:
    """Per-class shuffled split, byte-identical for a (manifest, seed) pair."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train: list[CorpusEntry] = []
    test: list[CorpusEntry] = []
    for label in LABELS:
        members = sorted(manifest.by_label(label), key=lambda e: e.sha256)
        if not members:
            raise DataError(f"corpus {manifest.name} has no {label} entries")
        rng = np.random.default_rng(derive_seed(seed, f"split/{manifest.name}/{label}"))
        order = rng.permutation(len(members))
        n_test = max(1, int(round(test_fraction * len(members))))
        if n_test >= len(members):
            n_test = len(members) - 1
        picked = [members[i] for i in order]
        test.extend(picked[:n_test])
        train.extend(picked[n_test:])
    train.sort(key=lambda e: e.rel_path)
    test.sort(key=lambda e: e.rel_path)
    digest = hashlib.sha256(
        canonical_json(
            {
                "manifest": manifest.manifest_hash,
                "seed": seed,
                "train": [e.rel_path for e in train],
                "test": [e.rel_path for e in test],
            }
        ).encode()
    ).hexdigest()
    return SplitIndex(tuple(train), tuple(test), digest)


# ---------------------------------------------------------------------------
# Synthetic corpora

# Per-family texture constants, in pixel units on [0, 1] images.
# noise_std is the i.i.d. per-pixel component: it fixes the floor of the
# reconstruction error and is the main lever separating the families.
SYNTH_FAMILIES: dict[str, dict] = {
    "textured-real": dict(alpha=1.1, blur_sigma=0.0, amplitude=(0.13, 0.15), noise_std=0.15, gain_field=True),
    "smooth-fake": dict(alpha=2.2, blur_sigma=2.0, amplitude=(0.05, 0.08), noise_std=0.0, gain_field=False),
    "soft-fake": dict(alpha=1.8, blur_sigma=0.8, amplitude=(0.045, 0.055), noise_std=0.148, gain_field=False),
}

RECIPES: dict[str, tuple[str, str]] = {
    # recipe name -> (real family, fake family)
    "toy-smooth-vs-texture": ("textured-real", "smooth-fake"),
    "toy-soft-vs-texture": ("textured-real", "soft-fake"),
}


def _fractal_noise(rng: np.random.Generator, size: int, channels: int, alpha: float) -> np.ndarray:
    """Unit-std noise with a 1/f^alpha radial spectrum, [size, size, channels]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    radius[0, 0] = 1.0
    envelope = radius**-alpha
    envelope[0, 0] = 0.0  # zero the DC term; mean is set separately
    out = np.empty((size, size, channels))
    for c in range(channels):
        spectrum = np.fft.fft2(rng.standard_normal((size, size))) * envelope
        field = np.fft.ifft2(spectrum).real
        out[:, :, c] = field / max(field.std(), 1e-12)
    return out


def synth_image(family: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One [size, size, 3] float image in [0, 1] drawn from a texture family."""
    try:
        params = SYNTH_FAMILIES[family]
    except KeyError:
        raise DataError(f"unknown synthetic family {family!r}") from None
    base = _fractal_noise(rng, size, 3, params["alpha"])
    if params["blur_sigma"] > 0:
        base = gaussian_filter(base, sigma=(params["blur_sigma"], params["blur_sigma"], 0))
        base = base / max(base.std(), 1e-12)
    lo, hi = params["amplitude"]
    amplitude = rng.uniform(lo, hi)
    if params["gain_field"]:
        gain = _fractal_noise(rng, size, 1, 3.0)[:, :, :1]
        gain = gain - gain.min()
        gain = gain / max(gain.max(), 1e-12)
        base = base * (0.3 + 1.4 * gain)
    shift = rng.uniform(-0.10, 0.10, size=3)
    img = 0.5 + shift[None, None, :] + amplitude * base
    if params["noise_std"] > 0:
        img = img + rng.normal(0.0, params["noise_std"], size=img.shape)
    return np.clip(img, 0.0, 1.0)


def parse_recipe(recipe: str) -> tuple[str, int, int]:
    """Parse "name:n=64:seed=7" into (name, n_per_class, seed)."""
    parts = recipe.split(":")
    name = parts[0]
    if name not in RECIPES:
        raise IngestError(f"unknown corpus recipe {name!r}; known: {sorted(RECIPES)}")
    n, seed = 64, 0
    for part in parts[1:]:
        key, _, value = part.partition("=")
        if key == "n":
            n = int(value)
        elif key == "seed":
            seed = int(value)
        else:
            raise IngestError(f"unknown recipe parameter {key!r} in {recipe!r}")
    if n < 2:
        raise IngestError("recipe needs n >= 2 per class")
    return name, n, seed


def generate_corpus(recipe: str, root: str | Path, size: int = 32) -> CorpusManifest:
    """Materialize a synthetic corpus; reproducible from the recipe string."""
    name, n, seed = parse_recipe(recipe)
    real_family, fake_family = RECIPES[name]
    root = Path(root)
    for label, family in (("real", real_family), ("fake", fake_family)):
        out_dir = root / label
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng(derive_seed(seed, f"synth/{name}/{family}/{i}"))
            img = synth_image(family, rng, size=size)
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(out_dir / f"{family}-{i:04d}.png")
    manifest = scan_corpus(root, name=name, split_seed=seed)
    manifest.recipe = recipe
    manifest.manifest_hash = _hash_entries(manifest.entries)
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# Preprocessing


def load_image(path: str | Path) -> np.ndarray:
    """Decode to an RGB float array in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def preprocess(image01: np.ndarray, crop: int) -> np.ndarray:
    """Deterministic shorter-side resize then center crop to crop x crop.

    Already-cropped square inputs pass through untouched (no resampling).
    """
    h, w = image01.shape[:2]
    if h == crop and w == crop:
        return image01
    target = int(round(crop * _RESIZE_OVER_CROP))
    scale = target / min(h, w)
    new_h, new_w = int(round(h * scale)), int(round(w * scale))
    arr = np.clip(np.round(image01 * 255.0), 0, 255).astype(np.uint8)
    resized = Image.fromarray(arr, mode="RGB").resize((new_w, new_h), Image.BICUBIC)
    out = np.asarray(resized, dtype=np.float64) / 255.0
    top = (new_h - crop) // 2
    left = (new_w - crop) // 2
    return out[top : top + crop, left : left + crop]


def grid_for_image(path: str | Path, handle: BackboneHandle, image_id: str = "") -> PatchGrid:
    """Full pipeline: decode, resize/crop, normalize, patchify."""
    spec = handle.spec
    img = preprocess(load_image(path), spec.image_size)
    normed = normalize_image(img, handle.norm_mean, handle.norm_std)
    return patchify(normed, spec.patch_size, image_id=image_id or str(path))


def patch_stack(entries, manifest: CorpusManifest, handle: BackboneHandle) -> np.ndarray:
    """[N, M, P] float64 stack of preprocessed patch grids for entries."""
    grids = [
        grid_for_image(manifest.path_of(e), handle, image_id=e.rel_path).patches for e in entries
    ]
    if not grids:
        raise DataError("empty entry list")
    return np.stack(grids)
