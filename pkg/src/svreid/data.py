"""Identity datasets, loaders, the synthetic generator, splits and pair sampling."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, DataError, SamplingError
from .head import PairLabel
from .imaging import (
    TARGET_HEIGHT,
    TARGET_WIDTH,
    AugmentConfig,
    augment,
    read_image,
    resize_bilinear,
    standardize,
    write_image,
)

log = logging.getLogger(__name__)

CAMERAS = ("A", "B")
IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass(frozen=True)
class Record:
    identity: int
    camera: str
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    source: Optional[str] = None


@dataclass
class IdentityDataset:
    records: list[Record]
    split: str = "all"
    incomplete: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})

    @property
    def n_identities(self) -> int:
        return len(self.identities())

    def index(self) -> dict[int, dict[str, list[int]]]:
        """identity -> camera -> record indices, in record order."""
        out: dict[int, dict[str, list[int]]] = {}
        for i, r in enumerate(self.records):
            out.setdefault(r.identity, {c: [] for c in CAMERAS})[r.camera].append(i)
        return dict(sorted(out.items()))

    def subset(self, identities: Sequence[int], split: str) -> "IdentityDataset":
        keep = set(identities)
        return IdentityDataset(
            [r for r in self.records if r.identity in keep],
            split=split,
            incomplete=[i for i in self.incomplete if i in keep],
        )


def _load_file(path: Path, height: int, width: int) -> np.ndarray:
    return resize_bilinear(read_image(path), height, width)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_cuhk01(directory: str | os.PathLike, height: int = TARGET_HEIGHT, width: int = TARGET_WIDTH) -> IdentityDataset:
    """Flat directory of ``IIIISSS.png`` files: 4-digit identity, 3-digit shot.

    Shots 1-2 are camera A and 3-4 camera B. Identities with fewer than four
    shots are kept and listed in ``incomplete``.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"dataset directory {os.fspath(root)!r} does not exist")
    files = sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise DataError(f"dataset directory {os.fspath(root)!r} is empty")
    pattern = re.compile(r"(\d{4})(\d{3})")
    parsed, offenders = [], []
    for p in files:
        m = pattern.fullmatch(p.stem)
        shot = int(m.group(2)) if m else 0
        if m is None or p.suffix.lower() not in IMAGE_SUFFIXES or not 1 <= shot <= 4:
            offenders.append(p.name)
            continue
        parsed.append((int(m.group(1)), "A" if shot <= 2 else "B", p))
    if offenders:
        raise DataError(f"unparseable CUHK01 file name(s): {', '.join(offenders)}")
    records = [Record(ident, cam, _load_file(p, height, width), p.name) for ident, cam, p in parsed]
    ds = IdentityDataset(records)
    ds.incomplete = [i for i, cams in ds.index().items() if len(cams["A"]) + len(cams["B"]) < 4]
    _report(ds, os.fspath(root))
    return ds


def load_generic(directory: str | os.PathLike, height: int = TARGET_HEIGHT, width: int = TARGET_WIDTH) -> IdentityDataset:
    """Layout ``<identity>/<A|B>_<index>.png``."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"dataset directory {os.fspath(root)!r} does not exist")
    pattern = re.compile(r"([AB])_(\d+)")
    records, offenders = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if not sub.name.isdigit():
            offenders.append(sub.name + "/")
            continue
        for p in _image_files(sub):
            m = pattern.fullmatch(p.stem)
            if m is None:
                offenders.append(f"{sub.name}/{p.name}")
                continue
            records.append(Record(int(sub.name), m.group(1), _load_file(p, height, width), f"{sub.name}/{p.name}"))
    if offenders:
        raise DataError(f"unparseable dataset entries: {', '.join(offenders)}")
    if not records:
        raise DataError(f"no images found under {os.fspath(root)!r}")
    ds = IdentityDataset(records)
    ds.incomplete = [i for i, cams in ds.index().items() if not cams["A"] or not cams["B"]]
    _report(ds, os.fspath(root))
    return ds


def load_dataset(directory: str | os.PathLike, fmt: str = "auto", height: int = TARGET_HEIGHT, width: int = TARGET_WIDTH) -> IdentityDataset:
    if fmt == "auto":
        root = Path(directory)
        fmt = "generic" if root.is_dir() and any(p.is_dir() for p in root.iterdir()) else "cuhk01"
    if fmt == "cuhk01":
        return load_cuhk01(directory, height, width)
    if fmt == "generic":
        return load_generic(directory, height, width)
    raise ContractViolation(f"unknown dataset format {fmt!r}")


def _report(ds: IdentityDataset, where: str) -> None:
    log.info(
        "loaded %d images of %d identities from %s (%d incomplete)",
        len(ds), ds.n_identities, where, len(ds.incomplete),
    )


def write_generic(dataset: IdentityDataset, directory: str | os.PathLike) -> list[Path]:
    root = Path(directory)
    written = []
    counters: dict[tuple[int, str], int] = {}
    for r in dataset.records:
        k = counters.get((r.identity, r.camera), 0) + 1
        counters[(r.identity, r.camera)] = k
        sub = root / f"{r.identity:04d}"
        sub.mkdir(parents=True, exist_ok=True)
        path = sub / f"{r.camera}_{k:02d}.png"
        write_image(path, r.image)
        written.append(path)
    return written


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class _Camera:
    gain: tuple[float, float, float]
    offset: float
    background: tuple[float, float, float]
    body_scale: float  # horizontal extent of the figure; camera B sees people in profile
    y_offset: int


_CAMERAS = {
    "A": _Camera((1.0, 1.0, 1.0), 0.0, (0.55, 0.58, 0.52), 1.0, 0),
    "B": _Camera((0.95, 0.97, 1.03), 0.01, (0.5, 0.52, 0.5), 0.92, 2),
}


def _render_person(app: dict, cam: _Camera, rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy = yy / height
    xx = xx / width
    img = np.empty((3, height, width))
    bg = np.asarray(cam.background)[:, None, None]
    img[:] = bg
    img += 0.04 * np.sin(9.0 * xx + 4.0 * yy + rng.uniform(0, 6.3))[None]

    cx = 0.5 + rng.uniform(-0.05, 0.05)
    dy = (cam.y_offset + rng.integers(-3, 4)) / height
    half = app["half_width"] * cam.body_scale
    top, split, bottom = 0.2 + dy, app["waist"] + dy, 0.95 + dy

    def paint(mask, color):
        img[:, mask] = np.asarray(color)[:, None]

    head = ((xx - cx) / (0.11 * cam.body_scale + 0.02)) ** 2 + ((yy - (0.11 + dy)) / 0.075) ** 2 <= 1
    paint(head, app["skin"])
    hair = head & (yy < 0.085 + dy)
    paint(hair, app["hair"])
    torso = (np.abs(xx - cx) <= half) & (yy >= top) & (yy < split)
    paint(torso, app["torso"])
    if app["stripe"]:
        band = torso & (np.abs(yy - (top + app["stripe_pos"] * (split - top))) < 0.03)
        paint(band, app["stripe_color"])
    gap = 0.03 * cam.body_scale
    legs = (np.abs(xx - cx) <= 0.8 * half) & (np.abs(xx - cx) >= gap) & (yy >= split) & (yy < bottom)
    paint(legs, app["legs"])
    if app["bag"]:
        bag = (xx - (cx + half) >= 0) & (xx - (cx + half) < 0.12) & (np.abs(yy - split) < 0.08)
        paint(bag, app["bag_color"])

    img = img * np.asarray(cam.gain)[:, None, None] + cam.offset
    img = img * rng.uniform(0.93, 1.07) + rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _appearance(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform([0.55, 0.4, 0.3], [0.95, 0.8, 0.7]),
        "hair": rng.uniform(0.0, 0.5, 3),
        "torso": rng.uniform(0.05, 0.95, 3),
        "legs": rng.uniform(0.05, 0.95, 3),
        "stripe": bool(rng.random() < 0.5),
        "stripe_pos": rng.uniform(0.2, 0.8),
        "stripe_color": rng.uniform(0.05, 0.95, 3),
        "bag": bool(rng.random() < 0.4),
        "bag_color": rng.uniform(0.05, 0.95, 3),
        "half_width": rng.uniform(0.2, 0.32),
        "waist": rng.uniform(0.5, 0.62),
    }


def _mean_intra_inter(dataset: IdentityDataset, max_images: int = 800) -> tuple[float, float]:
    """Mean L2 pixel distance within and across identities, over all image pairs."""
    records = dataset.records
    if len(records) > max_images:
        step = len(records) / max_images
        records = [records[int(i * step)] for i in range(max_images)]
    x = np.stack([r.image.reshape(-1) for r in records]).astype(np.float64)
    ids = np.array([r.identity for r in records])
    sq = (x * x).sum(axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    iu = np.triu_indices(len(records), k=1)
    same = (ids[:, None] == ids[None, :])[iu]
    dist = d[iu]
    return float(dist[same].mean()), float(dist[~same].mean())


def generate_synthetic(
    n_ids: int, imgs_per_camera: int, seed: int, height: int = TARGET_HEIGHT, width: int = TARGET_WIDTH
) -> IdentityDataset:
    """Render colour-block pedestrians seen by two cameras with distinct photometry and pose.

    Identity ids are 0..n_ids-1. Raises if the generated set does not have
    a smaller mean intra-identity than inter-identity pixel distance.
    """
    if n_ids < 2 or imgs_per_camera < 1:
        raise ContractViolation(f"need n_ids >= 2 and imgs_per_camera >= 1, got {n_ids}, {imgs_per_camera}")
    rng = np.random.default_rng(seed)
    records = []
    for ident in range(n_ids):
        app = _appearance(rng)
        for cam in CAMERAS:
            for k in range(imgs_per_camera):
                img = _render_person(app, _CAMERAS[cam], rng, height, width)
                records.append(Record(ident, cam, img, f"synthetic/{ident:04d}/{cam}_{k + 1:02d}"))
    ds = IdentityDataset(records)
    intra, inter = _mean_intra_inter(ds)
    if not intra < inter:
        raise RuntimeError(f"synthetic identities not separable: intra {intra:.3f} >= inter {inter:.3f}")
    return ds


# ---------------------------------------------------------------- splitting


def split_protocol(dataset: IdentityDataset, n_test_ids: int, seed: int) -> tuple[IdentityDataset, IdentityDataset]:
    """Identity-disjoint train/test split; test identities drawn uniformly by seed."""
    ids = dataset.identities()
    if not 0 <= n_test_ids < len(ids):
        raise ContractViolation(f"n_test_ids must be in [0, {len(ids)}), got {n_test_ids}")
    rng = np.random.default_rng(seed)
    test = sorted(int(i) for i in rng.choice(ids, size=n_test_ids, replace=False))
    train = sorted(set(ids) - set(test))
    return dataset.subset(train, "train"), dataset.subset(test, "test")


# ---------------------------------------------------------------- pair sampling


@dataclass
class PairBatch:
    images1: np.ndarray  # N x 3 x H x W, standardized
    images2: np.ndarray
    labels: np.ndarray  # PairLabel values
    ids1: np.ndarray
    ids2: np.ndarray
    cams1: list[str]
    cams2: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels == PairLabel.SAME))


def positive_pairs(dataset: IdentityDataset) -> list[tuple[int, int]]:
    """All cross-camera same-identity (A index, B index) record pairs."""
    return [(a, b) for cams in dataset.index().values() for a in cams["A"] for b in cams["B"]]


def n_positive_for(batch_size: int, pos_ratio: float) -> int:
    return int(np.floor(pos_ratio * batch_size + 0.5))


def sample_pair_batch(
    dataset: IdentityDataset,
    batch_size: int = 48,
    pos_ratio: float = 0.5,
    augment_config: Optional[AugmentConfig] = None,
    rng: Optional[np.random.Generator] = None,
    augment_rng: Optional[np.random.Generator] = None,
) -> PairBatch:
    """Balanced batch: cross-camera positives and cross-identity negatives, independently augmented."""
    if batch_size < 1 or not 0 <= pos_ratio <= 1:
        raise ContractViolation(f"invalid batch_size={batch_size} / pos_ratio={pos_ratio}")
    rng = rng if rng is not None else np.random.default_rng(0)
    augment_rng = augment_rng if augment_rng is not None else rng
    augment_config = augment_config if augment_config is not None else AugmentConfig()
    index = dataset.index()
    ids = list(index)
    n_pos = n_positive_for(batch_size, pos_ratio)
    n_neg = batch_size - n_pos
    eligible = [i for i in ids if index[i]["A"] and index[i]["B"]]
    if n_pos and not eligible:
        raise SamplingError("no identity has images from both cameras; positive pairs are infeasible")
    if n_neg and len(ids) < 2:
        raise SamplingError(f"negative pairs need at least 2 identities, dataset has {len(ids)}")

    pairs: list[tuple[int, int, int]] = []
    for _ in range(n_pos):
        ident = eligible[rng.integers(len(eligible))]
        a = index[ident]["A"][rng.integers(len(index[ident]["A"]))]
        b = index[ident]["B"][rng.integers(len(index[ident]["B"]))]
        if rng.random() < 0.5:
            a, b = b, a
        pairs.append((a, b, PairLabel.SAME))
    all_of = {i: index[i]["A"] + index[i]["B"] for i in ids}
    for _ in range(n_neg):
        i1, i2 = rng.choice(len(ids), size=2, replace=False)
        r1 = all_of[ids[i1]][rng.integers(len(all_of[ids[i1]]))]
        r2 = all_of[ids[i2]][rng.integers(len(all_of[ids[i2]]))]
        pairs.append((r1, r2, PairLabel.DIFFERENT))
    order = rng.permutation(len(pairs))
    pairs = [pairs[k] for k in order]

    recs = dataset.records

    def prep(k: int) -> np.ndarray:
        return standardize(augment(recs[k].image, augment_config, augment_rng))

    images1 = np.stack([prep(p[0]) for p in pairs]) if pairs else np.empty((0,))
    images2 = np.stack([prep(p[1]) for p in pairs]) if pairs else np.empty((0,))
    return PairBatch(
        images1=images1,
        images2=images2,
        labels=np.array([p[2] for p in pairs], dtype=np.int64),
        ids1=np.array([recs[p[0]].identity for p in pairs]),
        ids2=np.array([recs[p[1]].identity for p in pairs]),
        cams1=[recs[p[0]].camera for p in pairs],
        cams2=[recs[p[1]].camera for p in pairs],
    )
