"""Synthetic CTPA-like phantoms, HU windowing, case splits and dataset files.

Each slice is a dark lung background crossed by bright contrast-filled
vessels; emboli are darker ellipses drawn inside the vessels, and the mask
marks exactly the embolus pixels.

Dataset layout::

    <root>/manifest.jsonl                    one JSON object per case
    <root>/cases/<case_id>/<k>.img.tsr       windowed image, float32 (H, W)
    <root>/cases/<case_id>/<k>.mask.pgm      binary mask, P5 with 0/255
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import io as tio
from .io import FormatError

EMBOLUS_HU_LIMITS = (-50.0, 100.0)


class GenerationError(ValueError):
    """Phantom parameters that cannot produce a valid slice."""


@dataclass
class PhantomParams:
    img_size: int = 64
    vessel_count: tuple[int, int] = (2, 3)
    vessel_hu: tuple[float, float] = (200.0, 400.0)
    vessel_radius: tuple[float, float] = (5.0, 7.0)
    background_hu: float = -800.0
    embolus_count: tuple[int, int] = (1, 2)
    embolus_hu: tuple[float, float] = (-50.0, 100.0)
    embolus_radius: tuple[float, float] = (2.5, 4.5)
    noise_std: float = 20.0
    seed: int = 0

    def validate(self) -> "PhantomParams":
        lo, hi = self.embolus_hu
        if lo < EMBOLUS_HU_LIMITS[0] or hi > EMBOLUS_HU_LIMITS[1] or lo > hi:
            raise GenerationError(f"embolus HU range {self.embolus_hu} must lie within {EMBOLUS_HU_LIMITS}")
        if self.embolus_radius[1] > self.vessel_radius[0]:
            raise GenerationError(
                f"embolus radius up to {self.embolus_radius[1]} does not fit vessels of radius {self.vessel_radius[0]}"
            )
        if min(self.vessel_count) < 1 or min(self.embolus_count) < 1:
            raise GenerationError("need at least one vessel and one embolus per slice")
        if self.img_size < 4 * self.vessel_radius[1]:
            raise GenerationError(f"image size {self.img_size} too small for vessels of radius {self.vessel_radius[1]}")
        return self


class PhantomSlice(NamedTuple):
    hu: np.ndarray
    mask: np.ndarray
    vessels: np.ndarray
    clean: np.ndarray


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points (N, 2) to each segment a[k]-b[k]; returns (N, K)."""
    ab = b - a
    t = ((px[:, None, :] - a[None]) * ab[None]).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12)[None]
    t = np.clip(t, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.sqrt(((px[:, None, :] - proj) ** 2).sum(-1))


def _vessel_curve(rng: np.random.Generator, size: int, n: int = 48) -> np.ndarray:
    """Quadratic Bezier running between two random points near opposite borders."""
    if rng.random() < 0.5:
        p0 = np.array([rng.uniform(0, size), -2.0])
        p2 = np.array([rng.uniform(0, size), size + 1.0])
    else:
        p0 = np.array([-2.0, rng.uniform(0, size)])
        p2 = np.array([size + 1.0, rng.uniform(0, size)])
    p1 = rng.uniform(0.2 * size, 0.8 * size, 2)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _slice(p: PhantomParams, rng: np.random.Generator) -> PhantomSlice:
    size = p.img_size
    yy, xx = np.mgrid[0:size, 0:size]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)

    clean = np.full((size, size), p.background_hu)
    vessels = np.zeros((size, size), dtype=bool)
    centre_pts = []
    n_vessels = int(rng.integers(p.vessel_count[0], p.vessel_count[1] + 1))
    for _ in range(n_vessels):
        curve = _vessel_curve(rng, size)
        radius = rng.uniform(*p.vessel_radius)
        dist = _segment_distance(pix, curve[:-1], curve[1:]).min(axis=1).reshape(size, size)
        region = dist <= radius
        clean[region] = rng.uniform(*p.vessel_hu)
        vessels |= region
        margin = p.embolus_radius[1] + 1
        inside = curve[(curve >= margin).all(axis=1) & (curve <= size - 1 - margin).all(axis=1)]
        centre_pts.append(inside)

    mask = np.zeros((size, size), dtype=bool)
    candidates = np.concatenate(centre_pts) if centre_pts else np.zeros((0, 2))
    if len(candidates) == 0:
        raise GenerationError("no vessel passes far enough inside the image to hold an embolus")
    n_emboli = int(rng.integers(p.embolus_count[0], p.embolus_count[1] + 1))
    for _ in range(n_emboli):
        cy, cx = candidates[rng.integers(len(candidates))]
        ry, rx = rng.uniform(*p.embolus_radius, 2)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        blob = ((u / ry) ** 2 + (v / rx) ** 2 <= 1.0) & vessels
        clean[blob] = rng.uniform(*p.embolus_hu)
        mask |= blob
    if not mask.any():
        raise GenerationError("embolus fell outside every vessel")
    noisy = clean + rng.normal(0.0, p.noise_std, clean.shape) if p.noise_std > 0 else clean.copy()
    return PhantomSlice(noisy, mask, vessels, clean)


def synth_case(p: PhantomParams, slices: int) -> list[PhantomSlice]:
    """Deterministic list of phantom slices; slice k is seeded by ``p.seed ^ k``."""
    if slices < 1:
        raise ValueError("slices must be >= 1")
    p.validate()
    return [_slice(p, np.random.default_rng(p.seed ^ k)) for k in range(slices)]


def hu_window(hu, center: float = 50.0, width: float = 700.0) -> np.ndarray:
    """Clamp to [center - width/2, center + width/2] and map linearly to [0, 1]."""
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    lo = center - width / 2.0
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / width, 0.0, 1.0)


@dataclass
class CaseManifest:
    case_id: str
    samples: list[dict] = field(default_factory=list)
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({"case_id": self.case_id, "split": self.split, "samples": self.samples}, sort_keys=True)


def split_cases(cases: Sequence[CaseManifest], test_fraction: float = 0.1, seed: int = 0):
    """Case-level split: floor(test_fraction * N) cases (at least one) go to test."""
    if len(cases) < 2:
        raise ValueError(f"need at least 2 cases to split, got {len(cases)}")
    n_test = max(1, int(np.floor(test_fraction * len(cases) + 1e-9)))
    order = np.random.default_rng(seed).permutation(len(cases))
    test_idx = set(order[:n_test].tolist())
    train, test = [], []
    for i, case in enumerate(cases):
        case.split = "test" if i in test_idx else "train"
        (test if i in test_idx else train).append(case)
    return train, test


def save_sample(image_path, mask_path, image: np.ndarray, mask: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2 or image.shape != np.shape(mask):
        raise ValueError(f"image {image.shape} and mask {np.shape(mask)} must be matching 2-D arrays")
    tio.save_tsr(image_path, image)
    tio.save_pgm(mask_path, mask)


def load_sample(image_path, mask_path, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Load a pair; the grayscale image is replicated to ``channels`` planes."""
    image = tio.load_tsr(image_path)
    if image.ndim != 2:
        raise FormatError(f"{image_path}: expected a 2-D image, got shape {image.shape}")
    mask = tio.load_pgm(mask_path)
    if mask.shape != image.shape:
        raise FormatError(f"{mask_path}: mask shape {mask.shape} does not match image {image.shape}")
    return np.repeat(image[None], channels, axis=0), mask


@dataclass
class SegDataset:
    images: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, H, W) bool
    case_ids: list[str]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SegDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return SegDataset(self.images[idx], self.masks[idx], [self.case_ids[i] for i in idx])


def phantom_dataset(p: PhantomParams, n: int, center: float = 50.0, width: float = 700.0) -> SegDataset:
    """In-memory dataset of ``n`` windowed phantom slices from one case seed."""
    slices = synth_case(p, n)
    images = np.stack([np.repeat(hu_window(s.hu, center, width)[None].astype(np.float32), 3, axis=0) for s in slices])
    masks = np.stack([s.mask for s in slices])
    return SegDataset(images, masks, [f"case{p.seed:04d}/{k}" for k in range(n)])


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def write_dataset(
    root,
    cases: int,
    slices: int,
    seed: int = 0,
    params: PhantomParams | None = None,
    test_fraction: float = 0.1,
    center: float = 50.0,
    width: float = 700.0,
) -> list[CaseManifest]:
    """Generate ``cases`` phantom cases under ``root`` and write the manifest."""
    root = Path(root)
    params = params or PhantomParams()
    manifests = []
    for c in range(cases):
        case_id = f"case{c:03d}"
        cdir = root / "cases" / case_id
        cdir.mkdir(parents=True, exist_ok=True)
        p = PhantomParams(**{**asdict(params), "seed": case_seed(seed, c)})
        entry = CaseManifest(case_id)
        for k, s in enumerate(synth_case(p, slices)):
            img, msk = f"cases/{case_id}/{k}.img.tsr", f"cases/{case_id}/{k}.mask.pgm"
            save_sample(root / img, root / msk, hu_window(s.hu, center, width), s.mask)
            entry.samples.append({"image": img, "mask": msk})
        manifests.append(entry)
    split_cases(manifests, test_fraction, seed)
    with open(root / "manifest.jsonl", "w") as fh:
        for m in manifests:
            fh.write(m.to_json() + "\n")
    return manifests


def read_manifest(root) -> list[CaseManifest]:
    path = Path(root) / "manifest.jsonl"
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(CaseManifest(d["case_id"], d["samples"], d["split"]))
    return out


def load_split(root, split: str) -> SegDataset:
    root = Path(root)
    images, masks, ids = [], [], []
    for case in read_manifest(root):
        if split != "all" and case.split != split:
            continue
        for k, s in enumerate(case.samples):
            img, msk = load_sample(root / s["image"], root / s["mask"])
            images.append(img)
            masks.append(msk)
            ids.append(f"{case.case_id}/{k}")
    if not images:
        raise ValueError(f"split {split!r} under {root} is empty")
    return SegDataset(np.stack(images), np.stack(masks), ids)
