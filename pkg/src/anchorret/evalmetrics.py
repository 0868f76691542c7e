"""Ranking metrics, edit-distance similarity and embedding geometry."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

KS = (1, 3, 5)


class MetricsError(ValueError):
    pass


def _ranks(ranks) -> np.ndarray:
    r = np.asarray(ranks)
    if r.size == 0:
        raise MetricsError("no ranks given")
    if np.any(r < 1):
        raise MetricsError("ranks are 1-based positive integers")
    return r


def acc_at_k(ranks, k: int) -> float:
    if k < 1:
        raise MetricsError(f"K must be at least 1, got {k}")
    r = _ranks(ranks)
    return float(np.count_nonzero(r <= k)) / r.size


def mrr(ranks) -> float:
    r = _ranks(ranks).astype(np.float64)
    return float(np.mean(1.0 / r))


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over code points, two-row dynamic programme."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nes(pred: str, gt: str) -> float:
    """1 - edit distance / longer length; two empty strings score 1."""
    longest = max(len(pred), len(gt))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred, gt) / longest


@dataclass
class Geometry:
    r_intra: float
    d_inter: float
    rd_ratio: float

    def to_json(self) -> dict:
        return {"r_intra": self.r_intra, "d_inter": self.d_inter, "rd_ratio": self.rd_ratio}


def characterize(embeddings: np.ndarray, labels) -> Geometry:
    """Mean distance to own-class centroid over mean pairwise centroid distance.

    Centroids are plain means (not renormalized); distances are Euclidean.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise MetricsError("geometry needs at least two classes")
    centroids = np.stack([X[labels == c].mean(axis=0) for c in classes])
    pos = np.searchsorted(classes, labels)
    r_intra = float(np.mean(np.linalg.norm(X - centroids[pos], axis=1)))
    dists = [np.linalg.norm(centroids[i] - centroids[j]) for i, j in combinations(range(len(classes)), 2)]
    d_inter = float(np.mean(dists))
    if d_inter < 1e-12:
        raise MetricsError("class centroids coincide; inter-class distance is zero")
    return Geometry(r_intra, d_inter, r_intra / d_inter)


def pair_cosines(V: np.ndarray, Z: np.ndarray, labels_v, labels_z) -> tuple[np.ndarray, np.ndarray]:
    """Cosines of all image-text pairs, split into same-class and different-class."""
    S = np.asarray(V) @ np.asarray(Z).T
    same = np.asarray(labels_v)[:, None] == np.asarray(labels_z)[None, :]
    return S[same], S[~same]


def protocol_metrics(ranks: Sequence[int], preds: Sequence[str], truths: Sequence[str]) -> dict:
    out = {f"acc@{k}": acc_at_k(ranks, k) for k in KS}
    out["mrr"] = mrr(ranks)
    out["nes"] = float(np.mean([nes(p, t) for p, t in zip(preds, truths)]))
    out["n"] = len(ranks)
    return out


def summarize(results) -> dict:
    """Metrics for a list of :class:`~anchorret.retrieval.RetrievalResult`."""
    return protocol_metrics([r.rank for r in results], [r.top1_text for r in results],
                            [r.truth_text for r in results])


@dataclass
class MetricsReport:
    protocols: dict[str, dict] = field(default_factory=dict)
    geometry: dict | None = None
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        for name, m in self.protocols.items():
            if not m["acc@1"] <= m["acc@3"] <= m["acc@5"]:
                raise MetricsError(f"{name}: Acc@K not monotone in K")
            for key in ("acc@1", "acc@3", "acc@5", "mrr", "nes"):
                if not 0.0 <= m[key] <= 1.0:
                    raise MetricsError(f"{name}: {key}={m[key]} outside [0, 1]")

    def to_json(self) -> dict:
        return {"protocols": self.protocols, "geometry": self.geometry, "meta": self.meta}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["protocol", "n", "acc@1", "acc@3", "acc@5", "mrr", "nes"])
        for name, m in self.protocols.items():
            w.writerow([name, m["n"]] + [f"{m[k]:.6f}" for k in ("acc@1", "acc@3", "acc@5", "mrr", "nes")])
        return buf.getvalue()

    def write(self, path) -> tuple[Path, Path]:
        """Write ``<path>`` (JSON) and the CSV table next to it; both atomically."""
        self.check()
        path = Path(path)
        csv_path = path.with_suffix(".csv")
        write_text_atomic(path, json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")
        write_text_atomic(csv_path, self.to_csv())
        return path, csv_path


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
