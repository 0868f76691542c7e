"""Image-to-text retrieval against a gallery of projected text anchors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelParams, anchor_matrix, encode_images, project_anchors
from .synthgen import Dataset, Lexicon


class RetrievalError(ValueError):
    pass


@dataclass
class Gallery:
    semantic_ids: np.ndarray  # [G]
    languages: list[str]  # [G]
    texts: list[str]  # [G]
    embeddings: np.ndarray  # [G, D], unit rows
    language_order: tuple[str, ...]  # lexicon order, used for tie-breaking

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def scope(self) -> set[str]:
        return set(self.languages)

    def index_of(self, y: int, language: str) -> int:
        hits = np.flatnonzero((self.semantic_ids == y) & (np.array(self.languages) == language))
        if len(hits) == 0:
            raise RetrievalError(f"gallery has no entry for ({y}, {language})")
        return int(hits[0])

    def _lang_rank(self) -> np.ndarray:
        order = {l: i for i, l in enumerate(self.language_order)}
        return np.array([order[l] for l in self.languages])


def build_gallery(lexicon: Lexicon, languages, params: ModelParams) -> Gallery:
    languages = list(languages)
    unknown = [l for l in languages if l not in lexicon.languages]
    if unknown:
        raise RetrievalError(f"languages {unknown} not in lexicon {lexicon.languages}")
    langs_in_order = [l for l in lexicon.languages if l in languages]
    pairs = [(y, l) for l in langs_in_order for y in range(lexicon.num_classes)]
    anchors = anchor_matrix(pairs, params.config.anchor, lexicon.languages)
    emb = project_anchors(anchors, params).value
    return Gallery(np.array([y for y, _ in pairs]), [l for _, l in pairs],
                   [lexicon.word(y, l) for y, l in pairs], emb, tuple(lexicon.languages))


@dataclass
class RetrievalResult:
    query_id: int
    protocol: str
    ranking: np.ndarray  # gallery indices, best first
    similarities: np.ndarray  # aligned with ranking, non-increasing
    rank: int  # 1-based rank of the ground truth
    top1_text: str
    truth_text: str
    k: int

    def top_k(self) -> list[int]:
        return [int(i) for i in self.ranking[: self.k]]

    def to_json(self, gallery: Gallery) -> dict:
        return {"query_id": self.query_id, "protocol": self.protocol, "rank": self.rank,
                "top_k": [[int(gallery.semantic_ids[i]), gallery.languages[i]] for i in self.top_k()],
                "top1_text": self.top1_text, "truth_text": self.truth_text}


def rank_gallery(query: np.ndarray, gallery: Gallery) -> tuple[np.ndarray, np.ndarray]:
    """Gallery order by descending cosine; ties by ascending (semantic id, language)."""
    if len(gallery) == 0:
        raise RetrievalError("empty gallery")
    sims = gallery.embeddings @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((gallery._lang_rank(), gallery.semantic_ids, -sims))
    return order, sims[order]


def retrieve_embedding(query: np.ndarray, gallery: Gallery, k: int, truth: set[int],
                       query_id: int = 0, protocol: str = "") -> RetrievalResult:
    """Rank ``gallery`` for one query embedding.

    ``truth`` holds the gallery indices that count as correct; the reported
    rank is the best among them.
    """
    if not 1 <= k <= len(gallery):
        raise RetrievalError(f"K={k} outside 1..{len(gallery)}")
    if not truth:
        raise RetrievalError(f"query {query_id}: no ground-truth entry in the gallery")
    order, sims = rank_gallery(query, gallery)
    positions = np.flatnonzero(np.isin(order, list(truth)))
    best = int(positions[0])
    return RetrievalResult(query_id, protocol, order, sims, best + 1, gallery.texts[order[0]],
                           gallery.texts[order[best]], k)


def retrieve(query_image: np.ndarray, gallery: Gallery, k: int, params: ModelParams,
             truth: set[int], query_id: int = 0, protocol: str = "") -> RetrievalResult:
    v = encode_images(query_image, params)[0]
    return retrieve_embedding(v, gallery, k, truth, query_id, protocol)


@dataclass(frozen=True)
class Protocol:
    kind: str  # within | mixed | cross
    query: str | None = None
    target: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        if text == "mixed":
            return cls("mixed")
        kind, _, rest = text.partition(":")
        if kind == "within" and rest:
            return cls("within", rest, rest)
        if kind == "cross" and "->" in rest:
            a, b = rest.split("->", 1)
            if a == b:
                raise RetrievalError(f"cross protocol needs two different languages, got {text!r}")
            return cls("cross", a, b)
        raise RetrievalError(f"cannot parse protocol {text!r}; use within:L, mixed or cross:A->B")

    def __str__(self) -> str:
        if self.kind == "mixed":
            return "mixed"
        if self.kind == "within":
            return f"within:{self.query}"
        return f"cross:{self.query}->{self.target}"

    def gallery_languages(self, lexicon: Lexicon) -> list[str]:
        return list(lexicon.languages) if self.kind == "mixed" else [self.target]


def cross_pairs(languages) -> list[str]:
    """All ordered language pairs; en/zh/es pairs come first in a fixed report order."""
    languages = list(languages)
    preferred = [("en", "zh"), ("zh", "en"), ("zh", "es"), ("es", "zh"), ("es", "en"), ("en", "es")]
    pairs = [p for p in preferred if p[0] in languages and p[1] in languages]
    pairs += [(a, b) for a in languages for b in languages if a != b and (a, b) not in pairs]
    return [f"cross:{a}->{b}" for a, b in pairs]


def _queries(split: Dataset, proto: Protocol) -> list[int]:
    if proto.kind == "mixed":
        return list(range(len(split)))
    idx = [i for i, s in enumerate(split.samples) if s.language == proto.query]
    if not idx:
        raise RetrievalError(f"protocol {proto}: split has no {proto.query!r} queries")
    return idx


def _truth(gallery: Gallery, proto: Protocol, y: int) -> set[int]:
    if proto.kind == "mixed":
        return set(np.flatnonzero(gallery.semantic_ids == y).tolist())
    return {gallery.index_of(y, proto.target)}


def eval_protocol(split: Dataset, protocol, params: ModelParams, lexicon: Lexicon | None = None,
                  k: int = 5, embeddings: np.ndarray | None = None) -> tuple[list[RetrievalResult], Gallery]:
    """Run every query of ``split`` under ``protocol``.

    Results come back in query order.  ``embeddings`` may carry precomputed
    image embeddings for the whole split (e.g. from the quantized path).
    """
    lexicon = lexicon or split.lexicon
    proto = protocol if isinstance(protocol, Protocol) else Protocol.parse(protocol)
    for lang in (proto.query, proto.target):
        if lang is not None and lang not in lexicon.languages:
            raise RetrievalError(f"protocol {proto} references unknown language {lang!r}")
    gallery = build_gallery(lexicon, proto.gallery_languages(lexicon), params)
    qidx = _queries(split, proto)
    if embeddings is None:
        V = encode_images(np.stack([split.samples[i].image for i in qidx]), params)
    else:
        V = embeddings[qidx]
    results = []
    for i, v in zip(qidx, V):
        truth = _truth(gallery, proto, split.samples[i].semantic_id)
        results.append(retrieve_embedding(v, gallery, min(k, len(gallery)), truth, i, str(proto)))
    return results, gallery


def random_protocol(split: Dataset, protocol, params: ModelParams, lexicon: Lexicon | None = None,
                    k: int = 5, seed: int = 0) -> tuple[list[RetrievalResult], Gallery]:
    """Uniform-random ranker with the same inputs and outputs as :func:`eval_protocol`."""
    lexicon = lexicon or split.lexicon
    proto = protocol if isinstance(protocol, Protocol) else Protocol.parse(protocol)
    gallery = build_gallery(lexicon, proto.gallery_languages(lexicon), params)
    rng = np.random.default_rng(seed)
    results = []
    for i in _queries(split, proto):
        truth = _truth(gallery, proto, split.samples[i].semantic_id)
        order = rng.permutation(len(gallery))
        best = int(np.flatnonzero(np.isin(order, list(truth)))[0])
        results.append(RetrievalResult(i, str(proto), order, np.zeros(len(gallery)), best + 1,
                                       gallery.texts[order[0]], gallery.texts[order[best]], min(k, len(gallery))))
    return results, gallery


def write_results(results: list[RetrievalResult], gallery: Gallery, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(gallery), sort_keys=True, ensure_ascii=False) + "\n")
    tmp.replace(path)
