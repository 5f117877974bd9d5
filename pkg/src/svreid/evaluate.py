"""Camera-A query / camera-B gallery retrieval and CMC reporting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backbone import ModelParams
from .data import IdentityDataset
from .errors import ProtocolError
from .head import VerificationHead, describe, score_descriptors

RANKS = (1, 5, 10, 15, 20)
MISSING = "-"


@dataclass
class Gallery:
    """Single-shot protocol: every camera-A image queries one camera-B image per identity."""

    query_ids: np.ndarray
    query_records: list[int]
    gallery_ids: np.ndarray
    gallery_records: list[int]

    @property
    def n_queries(self) -> int:
        return len(self.query_records)

    @property
    def n_gallery(self) -> int:
        return len(self.gallery_records)


def build_gallery(dataset: IdentityDataset, seed: int) -> Gallery:
    index = dataset.index()
    for ident, cams in index.items():
        missing = [c for c in ("A", "B") if not cams[c]]
        if missing:
            raise ProtocolError(f"identity {ident} has no camera-{missing[0]} image")
    rng = np.random.default_rng(seed)
    queries = [k for cams in index.values() for k in cams["A"]]
    gallery = [cams["B"][rng.integers(len(cams["B"]))] for cams in index.values()]
    return Gallery(
        query_ids=np.array([dataset.records[k].identity for k in queries]),
        query_records=queries,
        gallery_ids=np.array([dataset.records[k].identity for k in gallery]),
        gallery_records=gallery,
    )


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # Q x G, P(same)
    query_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.query_ids = np.asarray(self.query_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        q, g = self.scores.shape
        if len(self.query_ids) != q or len(self.gallery_ids) != g:
            raise ProtocolError(f"score matrix {self.scores.shape} does not match {len(self.query_ids)} queries / {len(self.gallery_ids)} gallery ids")


def _descriptors(model: ModelParams, dataset: IdentityDataset, records: Sequence[int]) -> dict[int, np.ndarray]:
    return {k: describe(model, _standardized(dataset, k)).data[0] for k in sorted(set(records))}


def _standardized(dataset: IdentityDataset, k: int) -> np.ndarray:
    from .imaging import standardize

    return standardize(dataset.records[k].image)


def score_matrix(
    head: VerificationHead, query_desc: np.ndarray, gallery_desc: np.ndarray
) -> np.ndarray:
    """Q x G probabilities, computed row by row with the same kernel as a single pair."""
    out = np.empty((len(query_desc), len(gallery_desc)))
    for i, q in enumerate(query_desc):
        out[i] = score_descriptors(head, np.broadcast_to(q, gallery_desc.shape), gallery_desc)
    return out


def score_all(
    model: ModelParams,
    head: VerificationHead,
    queries: Sequence[np.ndarray],
    gallery: Sequence[np.ndarray],
    query_ids: Optional[Sequence[int]] = None,
    gallery_ids: Optional[Sequence[int]] = None,
) -> ScoreMatrix:
    """Entry (i, j) equals pair_score(queries[i], gallery[j]); one forward pass per image."""
    qd = np.stack([describe(model, im).data[0] for im in queries])
    gd = np.stack([describe(model, im).data[0] for im in gallery])
    q_ids = np.arange(len(queries)) if query_ids is None else query_ids
    g_ids = np.arange(len(gallery)) if gallery_ids is None else gallery_ids
    return ScoreMatrix(score_matrix(head, qd, gd), q_ids, g_ids)


@dataclass
class CmcCurve:
    values: np.ndarray  # values[k-1] = fraction with correct match in the top k

    @property
    def n_gallery(self) -> int:
        return len(self.values)

    def at(self, k: int) -> Optional[float]:
        return float(self.values[k - 1]) if 1 <= k <= len(self.values) else None


def match_ranks(scores: ScoreMatrix) -> np.ndarray:
    """1-based rank of the first correct gallery entry per query.

    Sorting is by descending score with ties broken by ascending gallery index.
    """
    present = np.isin(scores.query_ids, scores.gallery_ids)
    if not present.all():
        absent = sorted(set(scores.query_ids[~present].tolist()))
        raise ProtocolError(f"query identities absent from gallery: {absent}")
    order = np.argsort(-scores.scores, axis=1, kind="stable")
    hits = scores.gallery_ids[order] == scores.query_ids[:, None]
    return hits.argmax(axis=1) + 1


def compute_cmc(scores: ScoreMatrix) -> CmcCurve:
    ranks = match_ranks(scores)
    g = scores.scores.shape[1]
    counts = np.bincount(ranks, minlength=g + 1)[1:]
    return CmcCurve(np.cumsum(counts) / len(ranks))


def mean_curve(curves: Sequence[CmcCurve]) -> CmcCurve:
    return CmcCurve(np.mean([c.values for c in curves], axis=0))


def evaluate_cmc(
    model: ModelParams, head: VerificationHead, dataset: IdentityDataset, seed: int, trials: int = 1
) -> CmcCurve:
    """Mean CMC over ``trials`` gallery draws (seeds seed, seed+1, ...)."""
    galleries = [build_gallery(dataset, seed + t) for t in range(trials)]
    needed = {k for g in galleries for k in g.query_records + g.gallery_records}
    desc = _descriptors(model, dataset, sorted(needed))
    curves = []
    for g in galleries:
        qd = np.stack([desc[k] for k in g.query_records])
        gd = np.stack([desc[k] for k in g.gallery_records])
        curves.append(compute_cmc(ScoreMatrix(score_matrix(head, qd, gd), g.query_ids, g.gallery_ids)))
    return mean_curve(curves)


def rank_table(cmc: CmcCurve, ks: Sequence[int] = RANKS) -> dict[str, Optional[float]]:
    """Percentages keyed "R-k"; ranks beyond the gallery size map to None."""
    return {f"R-{k}": (None if cmc.at(k) is None else 100.0 * cmc.at(k)) for k in ks}


def _cell(v: Optional[float]) -> str:
    return MISSING if v is None else f"{v:.1f}"


def format_rank_table(table: dict[str, Optional[float]]) -> str:
    width = max(6, *(len(k) for k in table))
    head = "".join(k.rjust(width) for k in table)
    row = "".join(_cell(v).rjust(width) for v in table.values())
    return f"{head}\n{row}"


def rank_row(table: dict[str, Optional[float]]) -> str:
    return " ".join(_cell(v) for v in table.values())


def write_rank_csv(table: dict[str, Optional[float]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(table) + "\n")
        fh.write(",".join(_cell(v) for v in table.values()) + "\n")


def emit_cmc_csv(cmc: CmcCurve, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("k,cmc\n")
        for k, v in enumerate(cmc.values, start=1):
            fh.write(f"{k},{v:.6f}\n")


def read_cmc_csv(path: str | os.PathLike) -> CmcCurve:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return CmcCurve(np.array([float(r["cmc"]) for r in rows]))
