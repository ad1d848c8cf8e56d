"""Slice datasets: canonical on-disk layout, ingestion, phantoms and unpaired sampling.

Canonical layout of a dataset root::

    <root>/manifest.json
    <root>/images/<id>.png     16-bit grayscale, raw intensities at source bit depth
    <root>/masks/<id>.png      8-bit grayscale, liver=255, background=0

Images are stored quantized at their source bit depth and mapped to [-1, 1]
only when loaded, so the stored file is the exact record of what was ingested.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import __version__

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CANONICAL_SIZE = 256
RASTER_SUFFIXES = (".png", ".pgm", ".tif", ".tiff")

# closed label-intensity intervals selecting the liver
DEFAULT_LIVER_RANGE = {"A_CT": (1, 255), "B_MR": (55, 70)}
DEFAULT_BIT_DEPTH = {"A_CT": 16, "B_MR": 12}


class DatasetError(Exception):
    pass


class Modality(str, Enum):
    A_CT = "A_CT"
    B_MR = "B_MR"

    @classmethod
    def parse(cls, value: str | Modality) -> Modality:
        if isinstance(value, Modality):
            return value
        aliases = {"ct": cls.A_CT, "a": cls.A_CT, "mr": cls.B_MR, "mri": cls.B_MR, "b": cls.B_MR}
        key = value.lower()
        if key in aliases:
            return aliases[key]
        return cls(value)


@dataclass(frozen=True)
class SliceEntry:
    id: str
    image_path: str
    width: int
    height: int
    source_bit_depth: int
    liver_visible: bool
    subject_id: str
    mask_path: str | None = None
    synthetic: bool = False

    def __post_init__(self):
        if self.source_bit_depth not in (8, 12, 16):
            raise ValueError(f"{self.id}: source_bit_depth must be 8, 12 or 16, got {self.source_bit_depth}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.id}: width and height must be positive")


@dataclass(frozen=True)
class DatasetManifest:
    root_path: Path
    modality: Modality
    entries: tuple[SliceEntry, ...]
    created_by: str = f"xmod {__version__}"
    seed: int | None = None
    skipped: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate entry ids in manifest")

    def __len__(self):
        return len(self.entries)

    @property
    def liver_visible(self) -> list[SliceEntry]:
        return [e for e in self.entries if e.liver_visible]

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "modality": self.modality.value,
            "created_by": self.created_by,
            "seed": self.seed,
            "entries": [asdict(e) for e in self.entries],
            "skipped": [{"id": i, "reason": r} for i, r in self.skipped],
        }

    @classmethod
    def from_json(cls, root: Path, data: dict) -> DatasetManifest:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(
                f"{root}: manifest schema_version {data.get('schema_version')!r}, expected {SCHEMA_VERSION}"
            )
        return cls(
            root_path=Path(root),
            modality=Modality(data["modality"]),
            entries=tuple(SliceEntry(**e) for e in data["entries"]),
            created_by=data["created_by"],
            seed=data.get("seed"),
            skipped=tuple((s["id"], s["reason"]) for s in data.get("skipped", [])),
        )


@dataclass(frozen=True, eq=False)
class ImageSlice:
    pixels: np.ndarray
    id: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"{self.id}: pixels must be 2-D")
        if self.pixels.size and (self.pixels.min() < -1 or self.pixels.max() > 1):
            raise ValueError(f"{self.id}: pixels outside [-1, 1]")
        if self.mask is not None:
            if self.mask.shape != self.pixels.shape:
                raise ValueError(f"{self.id}: mask shape {self.mask.shape} != image shape {self.pixels.shape}")
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"{self.id}: mask must contain only 0 and 1")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    n_slices: int = 20
    liver_radius_range: tuple[float, float] = (0.12, 0.2)
    noise_sigma: float = 0.02
    modality_contrast: str = "A_style"

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.modality_contrast not in ("A_style", "B_style"):
            raise ValueError(f"unknown modality_contrast {self.modality_contrast!r}")
        lo, hi = self.liver_radius_range
        if not 0 < lo <= hi < 0.5:
            raise ValueError("liver_radius_range must satisfy 0 < lo <= hi < 0.5")


# ---------------------------------------------------------------------------
# manifest I/O


def write_manifest(manifest: DatasetManifest) -> Path:
    path = Path(manifest.root_path) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no manifest.json under {root}")
    return DatasetManifest.from_json(root, json.loads(path.read_text(encoding="utf-8")))


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Check the on-disk invariants; returns a list of problems (empty if sound)."""
    problems = []
    root = Path(manifest.root_path)
    for e in manifest.entries:
        img = root / e.image_path
        if not img.is_file():
            problems.append(f"{e.id}: missing image {img}")
            continue
        if e.mask_path is None:
            if e.liver_visible:
                problems.append(f"{e.id}: liver_visible without a mask")
            continue
        mpath = root / e.mask_path
        if not mpath.is_file():
            problems.append(f"{e.id}: missing mask {mpath}")
            continue
        with Image.open(img) as im, Image.open(mpath) as mm:
            if im.size != mm.size:
                problems.append(f"{e.id}: mask size {mm.size} != image size {im.size}")
                continue
            fg = bool(np.asarray(mm).any())
        if fg != e.liver_visible:
            problems.append(f"{e.id}: liver_visible={e.liver_visible} but mask foreground={fg}")
    return problems


# ---------------------------------------------------------------------------
# intensity handling


def normalize_slice(raw: np.ndarray, source_bit_depth: int, slice_id: str = "<slice>") -> np.ndarray:
    """Map integer intensities in [0, 2**depth - 1] linearly onto [-1, 1]."""
    top = 2**source_bit_depth - 1
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > top):
        raise DatasetError(
            f"{slice_id}: intensities [{raw.min()}, {raw.max()}] outside the {source_bit_depth}-bit range [0, {top}]"
        )
    return (2.0 * raw.astype(np.float64) / top - 1.0).astype(np.float32)


def denormalize_slice(pixels: np.ndarray, source_bit_depth: int) -> np.ndarray:
    top = 2**source_bit_depth - 1
    v = np.rint((np.asarray(pixels, dtype=np.float64) + 1.0) * top / 2.0)
    return np.clip(v, 0, top).astype(np.uint16)


def resample_slice(s: ImageSlice, target_size: int) -> ImageSlice:
    """Bilinear resample of the image, nearest-neighbour resample of the mask."""
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    if s.pixels.shape == (target_size, target_size):
        return s
    x = torch.from_numpy(np.ascontiguousarray(s.pixels, dtype=np.float32))[None, None]
    y = F.interpolate(x, size=(target_size, target_size), mode="bilinear", align_corners=False)
    pixels = y[0, 0].clamp_(-1, 1).numpy()
    mask = None
    if s.mask is not None:
        m = torch.from_numpy(np.ascontiguousarray(s.mask, dtype=np.uint8))[None, None]
        mask = F.interpolate(m, size=(target_size, target_size), mode="nearest")[0, 0].numpy()
    return ImageSlice(pixels=pixels, id=s.id, mask=mask)


def read_raster(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            return np.asarray(im)
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_image_png(path: Path, raw: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(raw, dtype=np.uint16)).save(path, format="PNG")


def write_mask_png(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def load_slice(manifest: DatasetManifest, entry: SliceEntry) -> ImageSlice:
    root = Path(manifest.root_path)
    pixels = normalize_slice(read_raster(root / entry.image_path), entry.source_bit_depth, entry.id)
    mask = None
    if entry.mask_path is not None:
        mask = (read_raster(root / entry.mask_path) > 0).astype(np.uint8)
    return ImageSlice(pixels=pixels, id=entry.id, mask=mask)


class SliceCache:
    """Memoizing loader; datasets at the scales used here fit in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._by_id = {e.id: e for e in manifest.entries}
        self._load = lru_cache(maxsize=None)(self._load_uncached)

    def _load_uncached(self, entry_id: str) -> ImageSlice:
        return load_slice(self.manifest, self._by_id[entry_id])

    def __call__(self, entry: SliceEntry) -> ImageSlice:
        return self._load(entry.id)


# ---------------------------------------------------------------------------
# ingestion


def _find_label(image_path: Path) -> Path | None:
    label_dir = image_path.parent.parent / "labels"
    for suffix in RASTER_SUFFIXES:
        candidate = label_dir / (image_path.stem + suffix)
        if candidate.is_file():
            return candidate
    return None


def _source_images(source_dir: Path) -> list[Path]:
    found = [
        p
        for p in source_dir.rglob("*")
        if p.is_file() and p.parent.name == "images" and p.suffix.lower() in RASTER_SUFFIXES
    ]
    return sorted(found)


def prepare_dataset(
    source_dir: str | Path,
    modality: str | Modality,
    out_dir: str | Path,
    organ_label_range: tuple[int, int] | None = None,
    target_size: int = CANONICAL_SIZE,
    bit_depth: int | None = None,
) -> DatasetManifest:
    """Ingest ``<src>/[<subject>/]images/*.png`` with matching ``labels/`` files.

    Label pixels inside the closed interval ``organ_label_range`` become liver.
    16-bit sources are read at ``bit_depth`` (default 16 for CT, 12 for MR);
    8-bit sources are always read at depth 8. Slices with a missing or
    mismatched label, or intensities outside the declared range, are skipped
    and recorded in ``manifest.skipped``.
    """
    modality = Modality.parse(modality)
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    lo, hi = organ_label_range or DEFAULT_LIVER_RANGE[modality.value]
    if lo > hi:
        raise DatasetError(f"empty liver label range [{lo}, {hi}]")
    images = _source_images(source_dir) if source_dir.is_dir() else []
    if not images:
        raise DatasetError(f"no source images found under {source_dir} (expected .../images/*.png)")

    entries, skipped = [], []
    for img_path in images:
        rel_parent = img_path.parent.parent.relative_to(source_dir)
        subject = rel_parent.as_posix().replace("/", "_") if rel_parent.parts else "s0"
        slice_id = f"{subject}_{img_path.stem}"
        label_path = _find_label(img_path)
        if label_path is None:
            skipped.append((slice_id, "missing label file"))
            log.warning("%s: missing label file, slice excluded", slice_id)
            continue
        raw = read_raster(img_path)
        label = read_raster(label_path)
        if label.shape != raw.shape:
            skipped.append((slice_id, f"label shape {label.shape} != image shape {raw.shape}"))
            log.warning("%s: label/image size mismatch, slice excluded", slice_id)
            continue
        depth = 8 if raw.dtype == np.uint8 else (bit_depth or DEFAULT_BIT_DEPTH[modality.value])
        try:
            pixels = normalize_slice(raw, depth, slice_id)
        except DatasetError as err:
            skipped.append((slice_id, str(err)))
            log.warning("%s", err)
            continue
        mask = ((label >= lo) & (label <= hi)).astype(np.uint8)
        s = resample_slice(ImageSlice(pixels=pixels, id=slice_id, mask=mask), target_size)
        image_rel, mask_rel = f"images/{slice_id}.png", f"masks/{slice_id}.png"
        write_image_png(out_dir / image_rel, denormalize_slice(s.pixels, depth))
        write_mask_png(out_dir / mask_rel, s.mask)
        entries.append(
            SliceEntry(
                id=slice_id,
                image_path=image_rel,
                mask_path=mask_rel,
                width=target_size,
                height=target_size,
                source_bit_depth=depth,
                liver_visible=bool(s.mask.any()),
                subject_id=subject,
            )
        )
    manifest = DatasetManifest(
        root_path=out_dir, modality=modality, entries=tuple(entries), skipped=tuple(skipped)
    )
    write_manifest(manifest)
    log.info(
        "prepared %d slices (%d liver-visible, %d skipped) into %s",
        len(entries), len(manifest.liver_visible), len(skipped), out_dir,
    )
    return manifest


# ---------------------------------------------------------------------------
# phantoms

_MAX_PLACEMENT_TRIES = 50


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _phantom_pose(rng: np.random.Generator, spec: PhantomSpec, yy, xx):
    n = spec.image_size
    cy, cx = n / 2 + rng.uniform(-0.04, 0.04, size=2) * n
    ry, rx = rng.uniform(0.30, 0.36) * n, rng.uniform(0.38, 0.45) * n
    body = _ellipse(yy, xx, cy, cx, ry, rx)
    # liver must sit inside a shrunken body so it never touches the skin line
    inner = _ellipse(yy, xx, cy, cx, ry - 2, rx - 2)
    lo, hi = spec.liver_radius_range
    for _ in range(_MAX_PLACEMENT_TRIES):
        lry, lrx = rng.uniform(lo, hi, size=2) * n
        theta = rng.uniform(0, math.pi)
        ly = cy + rng.uniform(-0.5, 0.5) * ry
        lx = cx + rng.uniform(-0.9, 0.1) * rx
        liver = _ellipse(yy, xx, ly, lx, lry, lrx, theta)
        if liver.any() and not (liver & ~inner).any():
            return body, liver
    return None


def _bias_field(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.linspace(-1, 1, n)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    a = rng.uniform(-1, 1, size=5)
    field_ = a[0] * xx + a[1] * yy + a[2] * xx * yy + a[3] * xx**2 + a[4] * yy**2
    field_ /= max(np.abs(field_).max(), 1e-6)
    return 1.0 + 0.25 * field_


def generate_phantom_dataset(spec: PhantomSpec, seed: int, out_dir: str | Path, prefix: str | None = None) -> DatasetManifest:
    """Write ``spec.n_slices`` body+liver phantoms; a pure function of (spec, seed).

    A_style renders CT-like contrast (liver brighter than surrounding body).
    B_style applies a gamma-type monotone remapping of the tissue values and a
    smooth multiplicative bias field, loosely imitating an MR acquisition.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    a_style = spec.modality_contrast == "A_style"
    depth = 16 if a_style else 12
    modality = Modality.A_CT if a_style else Modality.B_MR
    prefix = prefix or ("pa" if a_style else "pb")

    entries, regenerated = [], 0
    for i in range(spec.n_slices):
        pose = _phantom_pose(rng, spec, yy, xx)
        while pose is None:
            regenerated += 1
            pose = _phantom_pose(rng, spec, yy, xx)
        body, liver = pose
        body_level = rng.uniform(-0.35, -0.15)
        liver_level = body_level + rng.uniform(0.35, 0.55)
        img = np.full((n, n), -1.0)
        img[body] = body_level
        img[liver] = liver_level
        if a_style:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape) * body
        else:
            # monotone remap on [0,1]: background stays dark, tissues compressed upward
            t = (img + 1.0) / 2.0
            t = t**0.6
            t = t * _bias_field(rng, n)
            t = t + rng.normal(0.0, spec.noise_sigma, size=img.shape) * body
            img = 2.0 * t - 1.0
        img = np.clip(img, -1.0, 1.0)

        sid = f"{prefix}{seed}_{i:04d}"
        image_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
        write_image_png(out_dir / image_rel, denormalize_slice(img, depth))
        write_mask_png(out_dir / mask_rel, liver)
        entries.append(
            SliceEntry(
                id=sid,
                image_path=image_rel,
                mask_path=mask_rel,
                width=n,
                height=n,
                source_bit_depth=depth,
                liver_visible=True,
                subject_id=f"{prefix}{seed}_subj{i // 10}",
            )
        )
    if regenerated:
        log.info("phantom seed %d: %d slices regenerated after failed liver placement", seed, regenerated)
    manifest = DatasetManifest(root_path=out_dir, modality=modality, entries=tuple(entries), seed=seed)
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# unpaired sampling


@dataclass(frozen=True)
class SamplerState:
    """Position in two independent epoch-shuffled streams.

    The permutation for a given (stream, epoch) is derived from the seed, so
    the state is just counters and checkpoints trivially.
    """

    seed: int
    a_epoch: int = 0
    a_pos: int = 0
    b_epoch: int = 0
    b_pos: int = 0


def _epoch_perm(seed: int, stream: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def _draw(seed: int, stream: int, epoch: int, pos: int, n: int, k: int) -> tuple[list[int], int, int]:
    out = []
    perm = _epoch_perm(seed, stream, epoch, n)
    while len(out) < k:
        take = min(k - len(out), n - pos)
        out.extend(int(i) for i in perm[pos : pos + take])
        pos += take
        if pos == n:
            epoch, pos = epoch + 1, 0
            perm = _epoch_perm(seed, stream, epoch, n)
    return out, epoch, pos


def draw_indices(state: SamplerState, n_a: int, n_b: int, batch_size: int) -> tuple[list[int], list[int], SamplerState]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n_a < 1 or n_b < 1:
        raise DatasetError("both datasets must be nonempty")
    if batch_size > n_a or batch_size > n_b:
        raise DatasetError(f"batch_size {batch_size} exceeds dataset size (A={n_a}, B={n_b})")
    ia, a_epoch, a_pos = _draw(state.seed, 0, state.a_epoch, state.a_pos, n_a, batch_size)
    ib, b_epoch, b_pos = _draw(state.seed, 1, state.b_epoch, state.b_pos, n_b, batch_size)
    return ia, ib, replace(state, a_epoch=a_epoch, a_pos=a_pos, b_epoch=b_epoch, b_pos=b_pos)


def eligible_a(manifest: DatasetManifest) -> list[SliceEntry]:
    return [e for e in manifest.entries if e.liver_visible and e.mask_path is not None]


def eligible_b(manifest: DatasetManifest) -> list[SliceEntry]:
    # unlabeled B slices are usable; labeled ones must show the liver
    return [e for e in manifest.entries if e.mask_path is None or e.liver_visible]


def sample_unpaired_batch(
    manifest_a: DatasetManifest,
    manifest_b: DatasetManifest,
    batch_size: int,
    state: SamplerState,
    loader_a: Callable[[SliceEntry], ImageSlice] | None = None,
    loader_b: Callable[[SliceEntry], ImageSlice] | None = None,
) -> tuple[list[ImageSlice], list[ImageSlice], SamplerState]:
    pool_a, pool_b = eligible_a(manifest_a), eligible_b(manifest_b)
    ia, ib, state = draw_indices(state, len(pool_a), len(pool_b), batch_size)
    loader_a = loader_a or (lambda e: load_slice(manifest_a, e))
    loader_b = loader_b or (lambda e: load_slice(manifest_b, e))
    return [loader_a(pool_a[i]) for i in ia], [loader_b(pool_b[i]) for i in ib], state


def stack_pixels(slices: Sequence[ImageSlice]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.pixels for s in slices]).astype(np.float32))[:, None]


def stack_masks(slices: Iterable[ImageSlice]) -> torch.Tensor:
    masks = []
    for s in slices:
        if s.mask is None:
            raise DatasetError(f"{s.id}: slice has no mask")
        masks.append(s.mask)
    return torch.from_numpy(np.stack(masks).astype(np.int64))
