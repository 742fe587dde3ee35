"""Deterministic synthetic region-caption corpus and its JSON-lines format.

Images are patch grids.  Each cell holds a code vector: background cells
one-hot encode two scene attributes, region cells one-hot encode the
region's color, count and shape.  Phrases name those attributes with
language-specific token ids, so every phrase can be decoded back from the
patches it describes.

Token layout: ids ``0 .. languages-1`` are language tags; then one block
per language holding ``scene_a``, ``scene_b`` and each attribute slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import MAX_TEXT_LEN
from .errors import (
    InvalidBoxError,
    NoSlotError,
    ParseError,
    ValidationError,
    VocabTooSmallError,
)
from .region import Box

N_NEGATIVES = 10


@dataclass(frozen=True)
class AttributeVocab:
    languages: int = 2
    scene_values: int = 12
    slots: tuple[tuple[str, int], ...] = (("color", 12), ("count", 12), ("shape", 12))

    def check(self, n_negatives: int = N_NEGATIVES):
        for name, size in self.slots:
            if size < n_negatives + 1:
                raise VocabTooSmallError(f"slot {name!r} has {size} values; need at least {n_negatives + 1}")
        if self.languages < 1 or self.scene_values < 1:
            raise VocabTooSmallError("need at least one language and one scene value")

    @property
    def kinds(self) -> tuple[tuple[str, int], ...]:
        return (("scene_a", self.scene_values), ("scene_b", self.scene_values)) + self.slots

    @property
    def block_size(self) -> int:
        return sum(n for _, n in self.kinds)

    @property
    def size(self) -> int:
        return self.languages + self.languages * self.block_size

    @property
    def patch_dim(self) -> int:
        return self.block_size

    def offset(self, kind: str) -> int:
        off = 0
        for name, n in self.kinds:
            if name == kind:
                return off
            off += n
        raise KeyError(kind)

    def token(self, lang: int, kind: str, value: int) -> int:
        return self.languages + lang * self.block_size + self.offset(kind) + value

    def lang_tag(self, lang: int) -> int:
        return lang

    def decode(self, token: int) -> tuple[int, str, int]:
        """``(lang, kind, value)``; language tags decode to ``(lang, "lang", 0)``."""
        if token < self.languages:
            return token, "lang", 0
        rel = token - self.languages
        lang, pos = divmod(rel, self.block_size)
        for name, n in self.kinds:
            if pos < n:
                return lang, name, pos
            pos -= n
        raise ValueError(token)

    def is_slot(self, token: int) -> bool:
        if not 0 <= token < self.size:
            return False
        _, kind, _ = self.decode(token)
        return kind in dict(self.slots)


@dataclass
class Region:
    box: tuple[float, float, float, float]
    phrase: list[int]
    hard_negatives: list[list[int]]


@dataclass
class Sample:
    image: np.ndarray  # H x W x P
    lang: int
    short_caption: list[int]
    long_caption: list[int]
    regions: list[Region] = field(default_factory=list)


@dataclass(frozen=True)
class CorpusConfig:
    samples: int = 32
    seed: int = 0
    regions_per_image: int = 2
    grid: int = 8
    region_cells: int = 2
    vocab: AttributeVocab = AttributeVocab()
    n_negatives: int = N_NEGATIVES


def perturb_attributes(phrase: Sequence[int], vocab: AttributeVocab, seed: int, n: int = N_NEGATIVES) -> list[list[int]]:
    """``n`` distinct negatives, each changing exactly one attribute token.

    Perturbations cycle round-robin over the phrase's attribute positions;
    replacement values per position are a seeded permutation of the other
    values of that slot.
    """
    positions = [i for i, t in enumerate(phrase) if vocab.is_slot(t)]
    if not positions:
        raise NoSlotError(f"phrase {list(phrase)} has no perturbable attribute token")
    rng = np.random.default_rng(seed)
    sizes = dict(vocab.slots)
    pools = {}
    for pos in positions:
        lang, kind, value = vocab.decode(phrase[pos])
        others = [v for v in range(sizes[kind]) if v != value]
        pools[pos] = [vocab.token(lang, kind, int(v)) for v in rng.permutation(others)]
    used = {pos: 0 for pos in positions}
    negatives = []
    for k in range(n):
        pos = positions[k % len(positions)]
        if used[pos] >= len(pools[pos]):
            raise VocabTooSmallError(f"slot at position {pos} ran out of alternative values")
        neg = list(phrase)
        neg[pos] = pools[pos][used[pos]]
        used[pos] += 1
        negatives.append(neg)
    return negatives


def _region_sites(cfg: CorpusConfig) -> list[tuple[int, int]]:
    """Top-left cells of region blocks inside the one-cell border."""
    inner = cfg.grid - 2
    steps = inner // cfg.region_cells
    return [(1 + r * cfg.region_cells, 1 + c * cfg.region_cells) for r in range(steps) for c in range(steps)]


def generate_corpus(cfg: CorpusConfig = CorpusConfig()) -> list[Sample]:
    vocab = cfg.vocab
    vocab.check(cfg.n_negatives)
    sites = _region_sites(cfg)
    if cfg.regions_per_image < 1 or cfg.regions_per_image > len(sites):
        raise ValueError(f"regions_per_image must be in [1, {len(sites)}] for a {cfg.grid}x{cfg.grid} grid")
    sizes = dict(vocab.slots)
    slot_names = [name for name, _ in vocab.slots]
    rng = np.random.default_rng(cfg.seed)
    seen: set[tuple] = set()
    corpus: list[Sample] = []
    attempts = 0
    while len(corpus) < cfg.samples:
        attempts += 1
        if attempts > 1000 * cfg.samples:
            raise VocabTooSmallError("cannot find enough distinct samples for this vocabulary")
        lang = int(rng.integers(vocab.languages))
        scene = (int(rng.integers(vocab.scene_values)), int(rng.integers(vocab.scene_values)))
        chosen = sorted(int(i) for i in rng.choice(len(sites), size=cfg.regions_per_image, replace=False))
        attrs = [{name: int(rng.integers(sizes[name])) for name in slot_names} for _ in chosen]
        neg_seeds = [int(rng.integers(2**63)) for _ in chosen]
        key = (scene, attrs[0][slot_names[0]], attrs[0][slot_names[-1]])
        if key in seen:
            continue
        seen.add(key)

        image = np.zeros((cfg.grid, cfg.grid, vocab.patch_dim))
        image[:, :, vocab.offset("scene_a") + scene[0]] = 1.0
        image[:, :, vocab.offset("scene_b") + scene[1]] = 1.0
        regions = []
        phrase_tokens: list[int] = []
        for site_idx, a, nseed in zip(chosen, attrs, neg_seeds):
            r0, c0 = sites[site_idx]
            cells = image[r0 : r0 + cfg.region_cells, c0 : c0 + cfg.region_cells]
            cells[...] = 0.0
            for name in slot_names:
                cells[:, :, vocab.offset(name) + a[name]] = 1.0
            box = (
                c0 / cfg.grid,
                r0 / cfg.grid,
                (c0 + cfg.region_cells) / cfg.grid,
                (r0 + cfg.region_cells) / cfg.grid,
            )
            phrase = [vocab.token(lang, name, a[name]) for name in slot_names]
            regions.append(Region(box, phrase, perturb_attributes(phrase, vocab, nseed, cfg.n_negatives)))
            phrase_tokens.extend(phrase)
        scene_tokens = [vocab.token(lang, "scene_a", scene[0]), vocab.token(lang, "scene_b", scene[1])]
        first = attrs[0]
        short = [vocab.lang_tag(lang)] + scene_tokens + [
            vocab.token(lang, slot_names[0], first[slot_names[0]]),
            vocab.token(lang, slot_names[-1], first[slot_names[-1]]),
        ]
        long = [vocab.lang_tag(lang)] + phrase_tokens + scene_tokens
        corpus.append(Sample(image, lang, short, long, regions))
    return corpus


def decode_region_attributes(sample: Sample, region: Region, vocab: AttributeVocab) -> list[int]:
    """Re-read a region's attribute tokens from the patch codes under its box."""
    h, w, _ = sample.image.shape
    x1, y1, x2, y2 = region.box
    cells = sample.image[round(y1 * h) : round(y2 * h), round(x1 * w) : round(x2 * w)]
    code = cells.reshape(-1, cells.shape[-1]).mean(axis=0)
    tokens = []
    for name, n in vocab.slots:
        off = vocab.offset(name)
        tokens.append(vocab.token(sample.lang, name, int(np.argmax(code[off : off + n]))))
    return tokens


# -- JSON-lines format -------------------------------------------------------


def sample_to_json(s: Sample) -> str:
    obj = {
        "image": s.image.tolist(),
        "lang": int(s.lang),
        "short_caption": [int(t) for t in s.short_caption],
        "long_caption": [int(t) for t in s.long_caption],
        "regions": [
            {
                "box": [float(v) for v in r.box],
                "phrase": [int(t) for t in r.phrase],
                "hard_negatives": [[int(t) for t in neg] for neg in r.hard_negatives],
            }
            for r in s.regions
        ],
    }
    return json.dumps(obj, separators=(",", ":"))


def save_corpus(corpus: Iterable[Sample], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for s in corpus:
            fh.write(sample_to_json(s))
            fh.write("\n")


def _int_list(obj, line: int, what: str) -> list[int]:
    if not isinstance(obj, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in obj):
        raise ParseError(line, f"{what} must be a list of integer token ids")
    return list(obj)


def _require(obj: dict, key: str, line: int, where: str = "record"):
    if key not in obj:
        raise ParseError(line, f"{where} is missing {key!r}")
    return obj[key]


def parse_sample(text: str, line: int, n_negatives: int = N_NEGATIVES, max_len: int = MAX_TEXT_LEN) -> Sample:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(line, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ParseError(line, "record must be a JSON object")
    try:
        image = np.asarray(_require(obj, "image", line), dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(line, "image must be a rectangular numeric array") from None
    if image.ndim != 3 or image.size == 0:
        raise ValidationError(line, f"image must be a non-empty H x W x P array, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError(line, "image contains non-finite values")
    lang = _require(obj, "lang", line)
    if not isinstance(lang, int) or isinstance(lang, bool):
        raise ParseError(line, "lang must be an integer")
    short = _int_list(_require(obj, "short_caption", line), line, "short_caption")
    long = _int_list(_require(obj, "long_caption", line), line, "long_caption")
    for name, cap in (("short_caption", short), ("long_caption", long)):
        if not cap:
            raise ValidationError(line, f"{name} is empty")
        if len(cap) > max_len:
            raise ValidationError(line, f"{name} has {len(cap)} tokens; the limit is {max_len}")
    raw_regions = _require(obj, "regions", line)
    if not isinstance(raw_regions, list):
        raise ParseError(line, "regions must be a list")
    regions = []
    for ri, rr in enumerate(raw_regions):
        where = f"region {ri}"
        if not isinstance(rr, dict):
            raise ParseError(line, f"{where} must be an object")
        box = _require(rr, "box", line, where)
        phrase = _int_list(_require(rr, "phrase", line, where), line, f"{where} phrase")
        negs = _require(rr, "hard_negatives", line, where)
        if not isinstance(box, list) or len(box) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise ParseError(line, f"{where} box must be four numbers")
        try:
            Box.of(box)
        except InvalidBoxError as exc:
            raise ValidationError(line, f"{where}: {exc}") from None
        if not isinstance(negs, list):
            raise ParseError(line, f"{where} hard_negatives must be a list")
        negs = [_int_list(n, line, f"{where} hard negative") for n in negs]
        if len(negs) != n_negatives:
            raise ValidationError(line, f"{where} has {len(negs)} hard negatives; exactly {n_negatives} required")
        if not phrase or len(phrase) > max_len:
            raise ValidationError(line, f"{where} phrase length {len(phrase)} outside [1, {max_len}]")
        for neg in negs:
            if len(neg) != len(phrase) or neg == phrase:
                raise ValidationError(line, f"{where} hard negative {neg} must keep the phrase length and differ from it")
        regions.append(Region(tuple(float(v) for v in box), phrase, negs))
    return Sample(image, lang, short, long, regions)


def load_corpus(path, n_negatives: int = N_NEGATIVES, max_len: int = MAX_TEXT_LEN) -> list[Sample]:
    corpus = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            corpus.append(parse_sample(text, lineno, n_negatives, max_len))
    return corpus


def max_token_id(corpus: Iterable[Sample]) -> int:
    top = -1
    for s in corpus:
        top = max(top, max(s.short_caption), max(s.long_caption))
        for r in s.regions:
            top = max(top, max(r.phrase), *(max(n) for n in r.hard_negatives))
    return top
