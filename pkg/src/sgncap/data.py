"""Caption preprocessing, vocabulary, attribute vectors, and the synthetic
scene -> caption dataset that stands in for a CNN feature pipeline.

A scene is a small grid where each cell is empty or holds a coloured shape.
Region features are drawn from a seeded per-(shape, color) embedding table
plus gaussian noise, captions come from templates whose spatial relations
are consistent with the placement, and the attribute vector marks which of
the most frequent caption words appear in the scene's own captions.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractError

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow", "purple")
RELATIONS = ("left of", "right of", "above", "below")
_INVERSE = {"left of": "right of", "right of": "left of",
            "above": "below", "below": "above"}

_ALLOWED = set("abcdefghijklmnopqrstuvwxyz0123456789 ")


def preprocess(text: str) -> list[str]:
    """Lowercase, drop characters outside [a-z0-9 ], split on whitespace."""
    lowered = text.lower()
    cleaned = "".join(ch for ch in lowered if ch in _ALLOWED)
    return cleaned.split()


@dataclass
class Vocabulary:
    """Token <-> id bijection with the four reserved tokens at ids 0..3."""

    tokens: list[str]
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ContractError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary tokens must be unique")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> list[int]:
        return [self._ids.get(w, UNK_ID) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(captions: list[list[str]], min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times; everything else is unk.

    Ordering is frequency-descending with lexicographic tie-breaking so two
    builds over the same corpus are identical.
    """
    if not captions:
        raise ContractError("build_vocab needs a nonempty caption set")
    counts = Counter()
    for cap in captions:
        counts.update(cap)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, counts={t: counts[t] for t in kept})


@dataclass
class AttributeSpec:
    """The ordered list of attribute words an image vector is scored against."""

    words: list[str]

    def vector_for(self, captions: list[list[str]]) -> np.ndarray:
        """Indicator over attribute words present in the captions, sum-normalised.

        All-zero when no attribute word occurs (kept as the zero vector).
        """
        present = set()
        for cap in captions:
            present.update(cap)
        v = np.array([1.0 if w in present else 0.0 for w in self.words])
        total = v.sum()
        return v / total if total > 0 else v

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "AttributeSpec":
        return cls([ln for ln in Path(path).read_text().splitlines() if ln])


def build_attributes(caption_sets: list[list[list[str]]], vocab: Vocabulary,
                     d_a: int):
    """Pick the d_a most frequent vocabulary words and vectorise every record.

    ``caption_sets`` holds one list of tokenised captions per record. Returns
    (AttributeSpec, list of per-record vectors).
    """
    candidates = [t for t in vocab.tokens[4:]]
    if d_a > len(candidates):
        raise ContractError(
            f"d_a={d_a} exceeds the {len(candidates)} non-reserved vocabulary words")
    ranked = sorted(candidates, key=lambda t: (-vocab.counts.get(t, 0), t))
    spec = AttributeSpec(ranked[:d_a])
    return spec, [spec.vector_for(caps) for caps in caption_sets]


@dataclass
class SceneObject:
    row: int
    col: int
    shape: str
    color: str


@dataclass
class SceneRecord:
    """One dataset entry: scene layout, region features, attributes, captions."""

    id: int
    grid: tuple  # (rows, cols)
    objects: list
    annotations: np.ndarray  # K x D
    attributes: np.ndarray   # D_a
    captions: list[str]

    def validate(self):
        rows, cols = self.grid
        k, _ = self.annotations.shape
        if k != rows * cols:
            raise ContractError(f"record {self.id}: {k} regions for a {rows}x{cols} grid")
        if not self.captions:
            raise ContractError(f"record {self.id}: no captions")
        if not np.isfinite(self.annotations).all() or not np.isfinite(self.attributes).all():
            raise ContractError(f"record {self.id}: non-finite features")
        if self.attributes.min() < 0 or self.attributes.max() > 1:
            raise ContractError(f"record {self.id}: attribute entries outside [0, 1]")
        return self

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "grid": list(self.grid),
            "objects": [[o.row, o.col, o.shape, o.color] for o in self.objects],
            "annotations": [[round(v, 10) for v in row] for row in self.annotations.tolist()],
            "attributes": [round(v, 10) for v in self.attributes.tolist()],
            "captions": self.captions,
        })

    @classmethod
    def from_json(cls, line: str) -> "SceneRecord":
        d = json.loads(line)
        return cls(
            id=d["id"],
            grid=tuple(d["grid"]),
            objects=[SceneObject(*o) for o in d["objects"]],
            annotations=np.array(d["annotations"], dtype=np.float64),
            attributes=np.array(d["attributes"], dtype=np.float64),
            captions=list(d["captions"]),
        ).validate()


def save_records(records: list[SceneRecord], path):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_records(path) -> list[SceneRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path) as f:
        return [SceneRecord.from_json(line) for line in f if line.strip()]


def relation_between(a: SceneObject, b: SceneObject) -> str:
    """Spatial relation of a w.r.t. b; horizontal wins ties on equal offsets."""
    dc, dr = b.col - a.col, b.row - a.row
    if dc != 0 and abs(dc) >= abs(dr):
        return "left of" if dc > 0 else "right of"
    return "above" if dr > 0 else "below"


def _phrase(o: SceneObject) -> str:
    return f"a {o.color} {o.shape}"


def captions_for_scene(objects: list[SceneObject]) -> list[str]:
    """Two paraphrase captions per scene, spatially consistent by construction."""
    if len(objects) == 1:
        o = objects[0]
        return [_phrase(o), f"there is {_phrase(o)}"]
    if len(objects) == 2:
        a, b = objects
        rel = relation_between(a, b)
        return [f"{_phrase(a)} {rel} {_phrase(b)}",
                f"{_phrase(b)} {_INVERSE[rel]} {_phrase(a)}"]
    a, b, c = objects[:3]
    return [f"{_phrase(a)} {relation_between(a, b)} {_phrase(b)}",
            f"{_phrase(b)} {relation_between(b, c)} {_phrase(c)}"]


def caption_consistent_with_scene(caption: str, objects: list[SceneObject]) -> bool:
    """Check any spatial relation stated by a template caption against the layout."""
    toks = preprocess(caption)
    rel = None
    for name in RELATIONS:
        parts = name.split()
        for i in range(len(toks) - len(parts) + 1):
            if toks[i:i + len(parts)] == parts:
                rel = name
                first, second = toks[:i], toks[i + len(parts):]
                break
        if rel:
            break
    if rel is None:
        return True  # single-object caption states no relation
    def match(phrase):
        cands = [o for o in objects if [o.color, o.shape] == phrase[-2:]]
        return cands
    for a in match(first):
        for b in match(second):
            if a is b:
                continue
            if rel == "left of" and a.col < b.col:
                return True
            if rel == "right of" and a.col > b.col:
                return True
            if rel == "above" and a.row < b.row:
                return True
            if rel == "below" and a.row > b.row:
                return True
    return False


def generate_dataset(out_dir, n_train: int, n_val: int, n_test: int,
                     grid: tuple = (4, 4), d: int = 16, d_a: int = 16,
                     min_count: int = 1, seed: int = 0) -> dict:
    """Write train/val/test.jsonl plus vocab.txt and attrs.txt; returns paths.

    The per-(shape, color) embedding table, all placements and all noise are
    drawn from one seeded generator, so identical arguments produce
    byte-identical files.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("split sizes must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows, cols = grid
    k = rows * cols

    styles = [(s, c) for s in SHAPES for c in COLORS]
    table = {sc: rng.normal(0.0, 1.0, size=d) for sc in styles}

    def make_record(rid):
        n_obj = int(rng.integers(1, 4))
        cells = rng.choice(k, size=n_obj, replace=False)
        objects = []
        for cell in cells:
            shape = SHAPES[rng.integers(len(SHAPES))]
            color = COLORS[rng.integers(len(COLORS))]
            objects.append(SceneObject(int(cell) // cols, int(cell) % cols, shape, color))
        ann = rng.normal(0.0, 0.05, size=(k, d))
        for o in objects:
            ann[o.row * cols + o.col] += table[(o.shape, o.color)]
        caps = captions_for_scene(objects)
        return SceneRecord(rid, grid, objects, ann, np.zeros(1), caps)

    total = n_train + n_val + n_test
    records = [make_record(i) for i in range(total)]
    train = records[:n_train]
    splits = {"train": train,
              "val": records[n_train:n_train + n_val],
              "test": records[n_train + n_val:]}

    train_caps = [preprocess(c) for r in train for c in r.captions]
    vocab = build_vocab(train_caps, min_count=min_count)
    spec, _ = build_attributes([[preprocess(c) for c in r.captions] for r in train],
                               vocab, d_a)
    for r in records:
        r.attributes = spec.vector_for([preprocess(c) for c in r.captions])
        r.validate()

    paths = {}
    for name, recs in splits.items():
        paths[name] = out_dir / f"{name}.jsonl"
        save_records(recs, paths[name])
    vocab.save(out_dir / "vocab.txt")
    spec.save(out_dir / "attrs.txt")
    paths["vocab"] = out_dir / "vocab.txt"
    paths["attrs"] = out_dir / "attrs.txt"
    return paths


def write_references(records: list[SceneRecord], path):
    """Reference file for evaluation: an ``IMG <id>`` header per image, then
    one reference caption per line."""
    with open(path, "w") as f:
        for r in records:
            f.write(f"IMG {r.id}\n")
            for c in r.captions:
                f.write(c + "\n")


def read_references(path) -> list[list[list[str]]]:
    """Parse an IMG-grouped reference file into per-image token lists."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"references file not found: {path}")
    groups, current = [], None
    for line in path.read_text().splitlines():
        if line.startswith("IMG "):
            current = []
            groups.append(current)
        elif line.strip():
            if current is None:
                raise ContractError("references file must start with an IMG header line")
            current.append(preprocess(line))
    if any(not g for g in groups):
        raise ContractError("every IMG group needs at least one reference")
    return groups


def read_candidates(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"candidates file not found: {path}")
    return [preprocess(line) for line in path.read_text().splitlines()]
