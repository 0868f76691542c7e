"""Procedural multilingual word images.

Each language is a synthetic script: its own alphabet and its own table of
polyline glyphs.  A word is laid out left to right, distorted by a writer
style (slant, scale, stroke width, baseline wobble, pixel noise) and
rasterized with a soft distance-to-segment pen.  Everything is a pure
function of the configuration and the seeds, so generation can be repeated
bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_LANGUAGES = ("en", "zh", "es")
DEFAULT_CANVAS = (24, 72)
SPLITS = ("train", "id_eval", "ood_eval", "finetune")
MANIFEST_FORMAT = "anchorret-manifest/1"

ALPHABETS = {
    "en": "abcdefghijklmnopqrstuvwxyz",
    "zh": "的一是不了人我在有他这中大来上国个到说们",
    "es": "áéíóúñüàèìòùâêîôûç",
}

WORD_LENGTHS = (3, 4, 5, 6)

# glyph box in canvas pixels at scale 1
GLYPH_W = 8.0
GLYPH_H = 18.0
ADVANCE = 9.5

SLANT_RANGE = (-0.35, 0.35)
THICKNESS_RANGE = (1.0, 3.0)
SCALE_RANGE = (0.8, 1.2)
WOBBLE_RANGE = (0.0, 2.0)
NOISE_RANGE = (0.0, 0.15)


class LexiconCapacityError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class StyleSplitError(ValueError):
    pass


class DatasetIOError(IOError):
    pass


def _seed_seq(*keys) -> np.random.SeedSequence:
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(zlib.crc32(k.encode("utf-8")))
        else:
            ints.append(int(k))
    return np.random.SeedSequence(ints)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(_seed_seq(*keys))


# ---------------------------------------------------------------------------
# lexicon


@dataclass(frozen=True)
class Lexicon:
    num_classes: int
    languages: tuple[str, ...]
    words: dict[str, tuple[str, ...]]

    def word(self, y: int, language: str) -> str:
        if language not in self.words:
            raise KeyError(f"language {language!r} not in lexicon {self.languages}")
        if not 0 <= y < self.num_classes:
            raise IndexError(f"semantic id {y} outside 0..{self.num_classes - 1}")
        return self.words[language][y]

    def to_json(self) -> dict:
        return {"num_classes": self.num_classes, "languages": list(self.languages),
                "words": {l: list(w) for l, w in self.words.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "Lexicon":
        langs = tuple(d["languages"])
        words = {l: tuple(d["words"][l]) for l in langs}
        lex = cls(int(d["num_classes"]), langs, words)
        lex.validate()
        return lex

    def validate(self) -> None:
        for l in self.languages:
            ws = self.words[l]
            if len(ws) != self.num_classes:
                raise ValueError(f"language {l}: {len(ws)} words for {self.num_classes} classes")
            if len(set(ws)) != len(ws):
                raise ValueError(f"language {l}: duplicate words")
            alphabet = set(ALPHABETS[l])
            for w in ws:
                if not set(w) <= alphabet:
                    raise ValueError(f"word {w!r} uses characters outside the {l} alphabet")


def build_lexicon(num_classes: int, languages=DEFAULT_LANGUAGES, seed: int = 0) -> Lexicon:
    if num_classes < 2:
        raise ValueError("need at least two semantic classes")
    languages = tuple(languages)
    words = {}
    for lang in languages:
        if lang not in ALPHABETS:
            raise KeyError(f"no script defined for language {lang!r}")
        alphabet = ALPHABETS[lang]
        if len(alphabet) < 8:
            raise ValueError(f"alphabet for {lang} has fewer than 8 characters")
        capacity = sum(len(alphabet) ** k for k in WORD_LENGTHS)
        if num_classes > capacity:
            raise LexiconCapacityError(
                f"{num_classes} classes exceed the {capacity} distinct words available in {lang}")
        rng = _rng(seed, "lexicon", lang)
        chosen: list[str] = []
        seen: set[str] = set()
        while len(chosen) < num_classes:
            n = int(rng.choice(WORD_LENGTHS))
            w = "".join(rng.choice(list(alphabet), size=n))
            if w not in seen:
                seen.add(w)
                chosen.append(w)
        words[lang] = tuple(chosen)
    return Lexicon(num_classes, languages, words)


# ---------------------------------------------------------------------------
# glyphs

def _glyph(language: str, char: str) -> list[np.ndarray]:
    """Polylines in the unit box (x right, y up) for one character.

    Each glyph occupies its own vertical band (ascender, descender or
    x-height body) so characters stay distinguishable after coarse pooling.
    """
    rng = _rng("glyph", language, char)
    lo, hi = [(0.0, 1.0), (0.3, 1.0), (0.0, 0.7), (0.2, 0.8)][int(rng.integers(4))]
    strokes = []
    if language == "zh":
        # boxy script: axis-aligned bars plus one hooked stroke
        for _ in range(int(rng.integers(3, 5))):
            if rng.random() < 0.5:
                y = rng.uniform(0.1, 0.9)
                x0, x1 = sorted(rng.uniform(0.0, 1.0, 2))
                strokes.append(np.array([[x0, y], [max(x1, x0 + 0.35), y]]))
            else:
                x = rng.uniform(0.1, 0.9)
                y0, y1 = sorted(rng.uniform(0.0, 1.0, 2))
                strokes.append(np.array([[x, y0], [x, max(y1, y0 + 0.35)]]))
        p = rng.uniform(0.2, 0.8, 2)
        strokes.append(np.array([p, p + [0.25, -0.3], p + [0.35, -0.15]]))
    else:
        # cursive-like scripts: a couple of bent strokes
        for _ in range(int(rng.integers(2, 4))):
            pts = np.column_stack([np.sort(rng.uniform(0.0, 1.0, 3)), rng.uniform(0.0, 1.0, 3)])
            if rng.random() < 0.5:
                pts = pts[::-1]
            strokes.append(pts)
    strokes = [np.column_stack([s[:, 0], lo + (hi - lo) * np.clip(s[:, 1], 0.0, 1.0)]) for s in strokes]
    if language == "es":
        # diacritic above the body
        cx = rng.uniform(0.3, 0.7)
        ang = rng.uniform(-0.8, 0.8)
        d = 0.15 * np.array([math.cos(ang), math.sin(ang)])
        c = np.array([cx, min(hi + 0.1, 0.92)])
        strokes.append(np.array([c - d, c + d]))
    return [np.clip(s, 0.0, 1.0) for s in strokes]


_GLYPH_CACHE: dict[tuple[str, str], list[np.ndarray]] = {}


def glyph_table(language: str) -> dict[str, list[np.ndarray]]:
    table = {}
    for ch in ALPHABETS[language]:
        key = (language, ch)
        if key not in _GLYPH_CACHE:
            _GLYPH_CACHE[key] = _glyph(language, ch)
        table[ch] = _GLYPH_CACHE[key]
    return table


# ---------------------------------------------------------------------------
# styles and rendering


@dataclass(frozen=True)
class StyleParams:
    style_id: int
    slant: float = 0.0
    stroke_thickness: float = 1.5
    scale_jitter: float = 1.0
    baseline_wobble_amp: float = 0.0
    noise_level: float = 0.0

    def __post_init__(self):
        checks = [("slant", self.slant, SLANT_RANGE),
                  ("stroke_thickness", self.stroke_thickness, THICKNESS_RANGE),
                  ("scale_jitter", self.scale_jitter, SCALE_RANGE),
                  ("baseline_wobble_amp", self.baseline_wobble_amp, WOBBLE_RANGE),
                  ("noise_level", self.noise_level, NOISE_RANGE)]
        for name, v, (lo, hi) in checks:
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


def style_params(style_id: int, seed: int) -> StyleParams:
    rng = _rng(seed, "style", style_id)
    return StyleParams(
        style_id=style_id,
        slant=float(rng.uniform(*SLANT_RANGE)),
        stroke_thickness=float(rng.uniform(*THICKNESS_RANGE)),
        scale_jitter=float(rng.uniform(*SCALE_RANGE)),
        baseline_wobble_amp=float(rng.uniform(*WOBBLE_RANGE)),
        noise_level=float(rng.uniform(*NOISE_RANGE)),
    )


def _rasterize(segments: list[tuple[np.ndarray, np.ndarray]], thickness: float,
               canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    img = np.zeros((h, w))
    if not segments:
        return img
    a = np.array([s[0] for s in segments])  # [S, 2] in (x, y_down)
    b = np.array([s[1] for s in segments])
    abx, aby = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    denom = np.maximum(abx * abx + aby * aby, 1e-12)
    px = (np.arange(w) + 0.5)[None, :, None]  # pixel centres
    py = (np.arange(h) + 0.5)[:, None, None]
    apx = px - a[:, 0]
    apy = py - a[:, 1]
    t = np.clip((apx * abx + apy * aby) / denom, 0.0, 1.0)
    dx = apx - t * abx
    dy = apy - t * aby
    d = np.sqrt((dx * dx + dy * dy).min(axis=2))
    ink = np.clip(thickness / 2.0 + 0.5 - d, 0.0, 1.0)
    return ink


def _layout(text: str, style: StyleParams, canvas: tuple[int, int], rng: np.random.Generator | None,
            language: str, distortion: float) -> list[tuple[np.ndarray, np.ndarray]]:
    h, w = canvas
    s = style.scale_jitter
    n = len(text)
    width = n * ADVANCE * s
    if width > w - 2:
        raise LayoutError(f"{n} glyphs need {width:.1f}px at scale {s:.2f}; canvas is {w}px wide")
    if GLYPH_H * s > h - 2:
        raise LayoutError(f"glyph height {GLYPH_H * s:.1f}px exceeds canvas height {h}")
    wobble = style.baseline_wobble_amp * distortion
    if rng is not None and wobble > 0:
        phase = rng.uniform(0, 2 * math.pi)
    else:
        phase = 0.0
    x0 = (w - width) / 2.0
    yc = h / 2.0
    tan_slant = math.tan(style.slant)
    table = glyph_table(language)
    segments = []
    for i, ch in enumerate(text):
        if ch not in table:
            raise KeyError(f"character {ch!r} has no glyph in the {language} script")
        left = x0 + i * ADVANCE * s + (ADVANCE - GLYPH_W) * s / 2.0
        base_shift = wobble * math.sin(2 * math.pi * left / w + phase)
        for stroke in table[ch]:
            pts = stroke.copy()
            if rng is not None and wobble > 0:
                pts = pts + rng.normal(0.0, 0.015 * wobble, pts.shape)
            gx = left + pts[:, 0] * GLYPH_W * s
            up = (pts[:, 1] - 0.5) * GLYPH_H * s  # above centre line
            gx = gx + up * tan_slant
            gy = yc - up + base_shift
            for k in range(len(pts) - 1):
                segments.append((np.array([gx[k], gy[k]]), np.array([gx[k + 1], gy[k + 1]])))
    return segments


def clean_raster(text: str, language: str, scale: float = 1.0, thickness: float = 1.5,
                 canvas: tuple[int, int] = DEFAULT_CANVAS) -> np.ndarray:
    """Undistorted rendering: upright, unwobbled, noise free."""
    style = StyleParams(style_id=-1, stroke_thickness=thickness, scale_jitter=scale)
    return _rasterize(_layout(text, style, canvas, None, language, 1.0), thickness, canvas)


def render_word(text: str, language: str, style: StyleParams, canvas: tuple[int, int] = DEFAULT_CANVAS,
                rng_seed=0, distortion: float = 1.0) -> np.ndarray:
    """Render ``text`` in ``language``'s script; values in [0, 1], ink is bright.

    ``distortion`` multiplies the wobble amplitude and the noise level; the
    out-of-domain and fine-tuning splits render with a factor above one.
    """
    if not text:
        raise ValueError("cannot render an empty word")
    seed = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else _seed_seq(rng_seed)
    rng = np.random.default_rng(seed)
    segments = _layout(text, style, canvas, rng, language, distortion)
    img = _rasterize(segments, style.stroke_thickness, canvas)
    sigma = style.noise_level * distortion
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SplitSpec:
    styles: tuple[int, int]  # half-open style_id range
    per_class_per_lang: int
    distortion: float = 1.0


def default_style_splits() -> dict[str, SplitSpec]:
    return {
        "train": SplitSpec((0, 15), 10, 1.0),
        "id_eval": SplitSpec((15, 20), 4, 1.0),
        "ood_eval": SplitSpec((20, 28), 10, 1.5),
        "finetune": SplitSpec((28, 100), 160, 1.5),
    }


def check_style_splits(splits: dict[str, SplitSpec]) -> None:
    names = list(splits)
    for name in names:
        if name not in SPLITS:
            raise StyleSplitError(f"unknown split {name!r}; expected one of {SPLITS}")
        lo, hi = splits[name].styles
        if not 0 <= lo < hi:
            raise StyleSplitError(f"split {name}: empty or negative style range {lo}..{hi}")
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            (a0, a1), (b0, b1) = splits[a].styles, splits[b].styles
            if a0 < b1 and b0 < a1:
                raise StyleSplitError(f"style ranges of {a} {a0}..{a1} and {b} {b0}..{b1} overlap")


@dataclass
class Sample:
    image: np.ndarray
    text: str
    semantic_id: int
    language: str
    style_id: int
    split: str


@dataclass
class Dataset:
    samples: list[Sample]
    lexicon: Lexicon
    seed: int
    canvas: tuple[int, int] = DEFAULT_CANVAS
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.split == name], self.lexicon, self.seed,
                       self.canvas, self.header)

    def where(self, language: str | None = None) -> "Dataset":
        keep = [s for s in self.samples if language is None or s.language == language]
        return Dataset(keep, self.lexicon, self.seed, self.canvas, self.header)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0,) + self.canvas)

    def labels(self) -> np.ndarray:
        return np.array([s.semantic_id for s in self.samples], dtype=np.int64)

    def languages(self) -> list[str]:
        return [s.language for s in self.samples]


def _pgm_bytes(img_u8: np.ndarray) -> bytes:
    h, w = img_u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img_u8.tobytes()


def write_pgm(path: Path, img: np.ndarray) -> None:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(_pgm_bytes(u8))


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise DatasetIOError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DatasetIOError(f"{path}: maxval {maxval}, expected 255")
    # exactly one whitespace byte separates maxval from the raster
    pixels = raw[m.end():]
    if len(pixels) != w * h:
        raise DatasetIOError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def _record_checksum(records: list[dict]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r, sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _render_records(lexicon: Lexicon, splits: dict[str, SplitSpec], seed: int,
                    canvas: tuple[int, int]):
    """Yield ``(text, y, language, style_id, split, uint8 image)`` in record order.

    Record ``i`` draws its style and noise from an RNG keyed on ``(seed, i)``
    alone, so the output does not depend on rendering order.
    """
    styles: dict[int, StyleParams] = {}
    index = 0
    for split in SPLITS:
        if split not in splits:
            continue
        spec = splits[split]
        for y in range(lexicon.num_classes):
            for lang in lexicon.languages:
                text = lexicon.word(y, lang)
                for _ in range(spec.per_class_per_lang):
                    ss = _seed_seq(seed, "record", index)
                    sid = int(np.random.default_rng(ss.spawn(1)[0]).integers(*spec.styles))
                    if sid not in styles:
                        styles[sid] = style_params(sid, seed)
                    img = render_word(text, lang, styles[sid], canvas, ss, spec.distortion)
                    yield text, y, lang, sid, split, np.round(img * 255.0).astype(np.uint8)
                    index += 1


def generate_dataset(lexicon: Lexicon, out_dir, splits: dict[str, SplitSpec] | None = None,
                     seed: int = 0, canvas: tuple[int, int] = DEFAULT_CANVAS) -> Path:
    """Render every split to ``out_dir`` and write ``manifest.jsonl``; returns the manifest path."""
    splits = default_style_splits() if splits is None else splits
    check_style_splits(splits)
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.jsonl"
    if manifest.exists():
        raise FileExistsError(f"{manifest} already exists; datasets are never overwritten")
    records = []
    counts: dict[str, int] = {}
    for split in splits:
        (out_dir / "images" / split).mkdir(parents=True, exist_ok=True)
    for index, (text, y, lang, sid, split, u8) in enumerate(_render_records(lexicon, splits, seed, canvas)):
        data = _pgm_bytes(u8)
        rel = f"images/{split}/{index:06d}.pgm"
        (out_dir / rel).write_bytes(data)
        records.append({"image": rel, "text": text, "semantic_id": y, "language": lang,
                        "style_id": sid, "split": split,
                        "sha256": hashlib.sha256(data).hexdigest()})
        key = f"{lang}/{split}"
        counts[key] = counts.get(key, 0) + 1
    header = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "C": lexicon.num_classes,
        "languages": list(lexicon.languages),
        "canvas": list(canvas),
        "lexicon": lexicon.to_json(),
        "splits": {k: {"styles": list(v.styles), "per_class_per_lang": v.per_class_per_lang,
                       "distortion": v.distortion} for k, v in splits.items()},
        "counts": dict(sorted(counts.items())),
        "checksum": _record_checksum(records),
    }
    lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
    lines += [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records]
    tmp = manifest.with_suffix(".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(manifest)
    return manifest


def manifest_hash(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


def read_dataset(manifest_path, verify: bool = True) -> Dataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetIOError(f"{manifest_path}: {exc}") from exc
    if not lines:
        raise DatasetIOError(f"{manifest_path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{manifest_path}: header is not valid JSON") from exc
    if header.get("format") != MANIFEST_FORMAT:
        raise DatasetIOError(f"{manifest_path}: unknown manifest format {header.get('format')!r}")
    lexicon = Lexicon.from_json(header["lexicon"])
    canvas = tuple(header["canvas"])
    samples, records = [], []
    counts: dict[str, int] = {}
    required = ("image", "text", "semantic_id", "language", "style_id", "split", "sha256")
    for i, line in enumerate(lines[1:]):
        try:
            r = json.loads(line)
            missing = [k for k in required if k not in r]
            if missing:
                raise ValueError(f"missing fields {missing}")
        except ValueError as exc:
            raise DatasetIOError(f"record {i}: malformed ({exc})") from exc
        if r["language"] not in lexicon.languages:
            raise DatasetIOError(f"record {i}: language {r['language']!r} not in lexicon")
        if r["split"] not in SPLITS:
            raise DatasetIOError(f"record {i}: unknown split {r['split']!r}")
        if lexicon.word(r["semantic_id"], r["language"]) != r["text"]:
            raise DatasetIOError(f"record {i}: text {r['text']!r} disagrees with the lexicon")
        path = root / r["image"]
        if verify:
            try:
                data = path.read_bytes()
            except OSError as exc:
                raise DatasetIOError(f"record {i}: cannot read {path}: {exc}") from exc
            if hashlib.sha256(data).hexdigest() != r["sha256"]:
                raise DatasetIOError(f"record {i}: checksum mismatch for {path}")
        try:
            img = read_pgm(path)
        except DatasetIOError as exc:
            raise DatasetIOError(f"record {i}: {exc}") from exc
        if img.shape != canvas:
            raise DatasetIOError(f"record {i}: {path} is {img.shape}, expected {canvas}")
        samples.append(Sample(img, r["text"], int(r["semantic_id"]), r["language"],
                              int(r["style_id"]), r["split"]))
        records.append(r)
        key = f"{r['language']}/{r['split']}"
        counts[key] = counts.get(key, 0) + 1
    if dict(sorted(counts.items())) != header["counts"]:
        raise DatasetIOError(f"{manifest_path}: header counts do not match the records")
    if _record_checksum(records) != header["checksum"]:
        raise DatasetIOError(f"{manifest_path}: content checksum mismatch")
    return Dataset(samples, lexicon, int(header["seed"]), canvas, header)


def generate_in_memory(lexicon: Lexicon, splits: dict[str, SplitSpec] | None = None, seed: int = 0,
                       canvas: tuple[int, int] = DEFAULT_CANVAS) -> Dataset:
    """Same samples as :func:`generate_dataset` (pixels quantized to 1/255), without touching disk."""
    splits = default_style_splits() if splits is None else splits
    check_style_splits(splits)
    samples = [Sample(u8.astype(np.float64) / 255.0, text, y, lang, sid, split)
               for text, y, lang, sid, split, u8 in _render_records(lexicon, splits, seed, canvas)]
    return Dataset(samples, lexicon, seed, canvas)
