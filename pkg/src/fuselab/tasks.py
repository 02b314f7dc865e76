"""Procedural vision-language data: glyph-grid scenes, captions, and QA.

Scenes are k x k grids of colored glyphs rendered as fixed 8 x 8 bitmaps, so
every cell is patch-local. The caption split enumerates occupied cells in
raster order (projector pretraining); the QA split stratifies evenly over
detail-color / detail-glyph / count / majority-color questions, with every
answer derivable from the grid by a pure label oracle.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, StateError
from .rng import Rng

CELL_PIXELS = 8

COLOR_NAMES = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
COLOR_VALUES = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 1.0],
])

GLYPH_NAMES = ("A", "B", "C", "D", "E", "F", "H", "K",
               "L", "N", "P", "R", "T", "U", "X", "Z")

_GLYPH_ART = {
    "A": ["..####..", ".#....#.", ".#....#.", ".######.", ".#....#.", ".#....#.", ".#....#.", "........"],
    "B": [".#####..", ".#....#.", ".#....#.", ".#####..", ".#....#.", ".#....#.", ".#####..", "........"],
    "C": ["..####..", ".#....#.", ".#......", ".#......", ".#......", ".#....#.", "..####..", "........"],
    "D": [".#####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#####..", "........"],
    "E": [".######.", ".#......", ".#......", ".#####..", ".#......", ".#......", ".######.", "........"],
    "F": [".######.", ".#......", ".#......", ".#####..", ".#......", ".#......", ".#......", "........"],
    "H": [".#....#.", ".#....#.", ".#....#.", ".######.", ".#....#.", ".#....#.", ".#....#.", "........"],
    "K": [".#...#..", ".#..#...", ".#.#....", ".##.....", ".#.#....", ".#..#...", ".#...#..", "........"],
    "L": [".#......", ".#......", ".#......", ".#......", ".#......", ".#......", ".######.", "........"],
    "N": [".#....#.", ".##...#.", ".#.#..#.", ".#..#.#.", ".#...##.", ".#....#.", ".#....#.", "........"],
    "P": [".#####..", ".#....#.", ".#....#.", ".#####..", ".#......", ".#......", ".#......", "........"],
    "R": [".#####..", ".#....#.", ".#....#.", ".#####..", ".#.#....", ".#..#...", ".#...#..", "........"],
    "T": [".######.", "...#....", "...#....", "...#....", "...#....", "...#....", "...#....", "........"],
    "U": [".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"],
    "X": [".#....#.", "..#..#..", "...##...", "...##...", "...##...", "..#..#..", ".#....#.", "........"],
    "Z": [".######.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######.", "........"],
}

GLYPH_BITMAPS = np.stack([
    np.array([[ch == "#" for ch in row] for row in _GLYPH_ART[name]], dtype=np.float64)
    for name in GLYPH_NAMES
])

QA_TAGS = ("detail-color", "detail-glyph", "count", "majority-color")
ALL_TAGS = ("caption",) + QA_TAGS

SPLITS = ("pretrain-captions", "sft-qa")


# ---------------------------------------------------------------------------
# Scenes and the label oracle
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    """k x k grid; -1 marks an empty cell in both id arrays."""

    glyphs: np.ndarray
    colors: np.ndarray

    @property
    def grid_k(self) -> int:
        return self.glyphs.shape[0]

    def occupied_cells(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.glyphs >= 0)
        return list(zip(rows.tolist(), cols.tolist()))

    def glyph_at(self, r: int, c: int) -> str | None:
        gid = int(self.glyphs[r, c])
        return None if gid < 0 else GLYPH_NAMES[gid]

    def color_at(self, r: int, c: int) -> str | None:
        cid = int(self.colors[r, c])
        return None if cid < 0 else COLOR_NAMES[cid]

    def count(self) -> int:
        return int((self.glyphs >= 0).sum())

    def majority_color(self) -> str | None:
        """Most frequent color; ties break toward the smallest color id."""
        ids = self.colors[self.colors >= 0]
        if ids.size == 0:
            return None
        counts = np.bincount(ids, minlength=len(COLOR_NAMES))
        return COLOR_NAMES[int(np.argmax(counts))]

    def caption_words(self) -> list[str]:
        words: list[str] = []
        for r, c in self.occupied_cells():
            if words:
                words.append(",")
            words.extend([self.color_at(r, c), self.glyph_at(r, c), "at", str(r), str(c)])
        return words

    def to_dict(self) -> dict:
        return {"glyphs": self.glyphs.tolist(), "colors": self.colors.tolist()}


def render(scene: SyntheticScene) -> np.ndarray:
    """Draw the scene as a (3, k*8, k*8) float image; background is zeros."""
    k = scene.grid_k
    size = k * CELL_PIXELS
    img = np.zeros((3, size, size), dtype=np.float64)
    for r, c in scene.occupied_cells():
        gid = int(scene.glyphs[r, c])
        cid = int(scene.colors[r, c])
        if gid >= len(GLYPH_NAMES):
            raise ConfigError(f"unknown glyph id {gid}")
        bitmap = GLYPH_BITMAPS[gid]
        tint = COLOR_VALUES[cid]
        block = bitmap[None, :, :] * tint[:, None, None]
        r0, c0 = r * CELL_PIXELS, c * CELL_PIXELS
        img[:, r0 : r0 + CELL_PIXELS, c0 : c0 + CELL_PIXELS] = block
    return img


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if len(self.tokens) > 128:
            raise ConfigError(f"vocabulary of {len(self.tokens)} tokens exceeds 128")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._ids["<pad>"]

    @property
    def bos_id(self) -> int:
        return self._ids["<bos>"]

    @property
    def eos_id(self) -> int:
        return self._ids["<eos>"]

    def encode(self, words: list[str]) -> tuple[int, ...]:
        try:
            return tuple(self._ids[w] for w in words)
        except KeyError as e:
            raise ConfigError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def hash(self) -> str:
        blob = json.dumps(list(self.tokens)).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def build_vocab(grid_k: int = 4) -> Vocabulary:
    numbers = tuple(str(i) for i in range(grid_k * grid_k + 1))
    words = ("at", ",", "?", "color", "glyph", "count", "majority", "describe")
    return Vocabulary(("<pad>", "<bos>", "<eos>") + GLYPH_NAMES + COLOR_NAMES
                      + numbers + words)


# ---------------------------------------------------------------------------
# Samples and generation
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    prompt_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]
    task_tag: str
    scene: SyntheticScene
    answer_cell: tuple[int, int] | None = None


def _random_scene(rng: Rng, grid_k: int, min_occupied: int = 0) -> SyntheticScene:
    cells = grid_k * grid_k
    n_occ = int(rng.integers(min_occupied, cells + 1))
    glyphs = np.full((grid_k, grid_k), -1, dtype=np.int64)
    colors = np.full((grid_k, grid_k), -1, dtype=np.int64)
    spots = rng.choice(cells, n_occ)
    for s in spots:
        r, c = divmod(int(s), grid_k)
        glyphs[r, c] = rng.integers(0, len(GLYPH_NAMES))
        colors[r, c] = rng.integers(0, len(COLOR_NAMES))
    return SyntheticScene(glyphs=glyphs, colors=colors)


def _majority_scene(rng: Rng, grid_k: int) -> SyntheticScene:
    """Dense scene whose majority color strictly dominates (>= 3/4 of cells)."""
    cells = grid_k * grid_k
    lo = max(4, cells // 2)
    n_occ = int(rng.integers(lo, cells + 1))
    major = int(rng.integers(0, len(COLOR_NAMES)))
    minor = int(rng.integers(0, len(COLOR_NAMES) - 1))
    if minor >= major:
        minor += 1
    n_minor = int(rng.integers(0, min(3, n_occ // 4) + 1))
    glyphs = np.full((grid_k, grid_k), -1, dtype=np.int64)
    colors = np.full((grid_k, grid_k), -1, dtype=np.int64)
    spots = rng.choice(cells, n_occ)
    for idx, s in enumerate(spots):
        r, c = divmod(int(s), grid_k)
        glyphs[r, c] = rng.integers(0, len(GLYPH_NAMES))
        colors[r, c] = minor if idx < n_minor else major
    return SyntheticScene(glyphs=glyphs, colors=colors)


def oracle_answer(scene: SyntheticScene, tag: str,
                  cell: tuple[int, int] | None = None) -> list[str]:
    """Re-derive the answer words for a question from the grid alone."""
    if tag == "caption":
        return scene.caption_words()
    if tag == "detail-color":
        return [scene.color_at(*cell)]
    if tag == "detail-glyph":
        return [scene.glyph_at(*cell)]
    if tag == "count":
        return [str(scene.count())]
    if tag == "majority-color":
        return [scene.majority_color()]
    raise ConfigError(f"unknown task tag '{tag}'")


def _make_sample(rng: Rng, vocab: Vocabulary, grid_k: int, tag: str) -> Sample:
    cell = None
    if tag == "caption":
        scene = _random_scene(rng, grid_k)
        prompt = ["<bos>", "describe"]
    elif tag in ("detail-color", "detail-glyph"):
        scene = _random_scene(rng, grid_k, min_occupied=1)
        occ = scene.occupied_cells()
        cell = occ[int(rng.integers(0, len(occ)))]
        word = "color" if tag == "detail-color" else "glyph"
        prompt = ["<bos>", word, "at", str(cell[0]), str(cell[1]), "?"]
    elif tag == "count":
        scene = _random_scene(rng, grid_k)
        prompt = ["<bos>", "count", "?"]
    elif tag == "majority-color":
        scene = _majority_scene(rng, grid_k)
        prompt = ["<bos>", "majority", "color", "?"]
    else:
        raise ConfigError(f"unknown task tag '{tag}'")
    answer = oracle_answer(scene, tag, cell) + ["<eos>"]
    return Sample(image=render(scene), prompt_ids=vocab.encode(prompt),
                  answer_ids=vocab.encode(answer), task_tag=tag,
                  scene=scene, answer_cell=cell)


def generate_dataset(seed: int, split: str, size: int, grid_k: int = 4,
                     index_offset: int = 0, n_patches: int = 64) -> list[Sample]:
    """Deterministic dataset; per-sample streams keyed by (split, index).

    Disjoint ``index_offset`` ranges give collision-free train/eval splits.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}'")
    if size < 1:
        raise ConfigError(f"dataset size must be >= 1, got {size}")
    if grid_k * grid_k > n_patches:
        raise ConfigError(
            f"grid {grid_k}x{grid_k} finer than the {n_patches}-patch resolution")
    vocab = build_vocab(grid_k)
    base = Rng(seed)
    samples = []
    for i in range(size):
        rng = base.split(f"{split}/{index_offset + i}")
        tag = "caption" if split == "pretrain-captions" else QA_TAGS[i % len(QA_TAGS)]
        samples.append(_make_sample(rng, vocab, grid_k, tag))
    return samples


# ---------------------------------------------------------------------------
# Dump / regenerate
# ---------------------------------------------------------------------------


def sample_record(sample: Sample) -> dict:
    return {
        "image_b64": base64.b64encode(
            np.ascontiguousarray(sample.image, dtype="<f8").tobytes()).decode("ascii"),
        "image_shape": list(sample.image.shape),
        "prompt_ids": list(sample.prompt_ids),
        "answer_ids": list(sample.answer_ids),
        "task_tag": sample.task_tag,
        "scene": sample.scene.to_dict(),
        "answer_cell": list(sample.answer_cell) if sample.answer_cell else None,
    }


def dataset_jsonl_bytes(samples: list[Sample]) -> bytes:
    lines = [json.dumps(sample_record(s), sort_keys=True, separators=(",", ":"))
             for s in samples]
    return ("\n".join(lines) + "\n").encode("utf-8")


def dump_dataset(samples: list[Sample], path_stem, *, seed: int, split: str,
                 grid_k: int, index_offset: int = 0) -> tuple[Path, Path]:
    """Write <stem>.jsonl plus <stem>.manifest.json; returns both paths."""
    stem = Path(path_stem)
    jsonl_path = stem.with_suffix(".jsonl")
    manifest_path = stem.parent / (stem.name + ".manifest.json")
    jsonl_path.write_bytes(dataset_jsonl_bytes(samples))
    manifest = {
        "seed": seed,
        "split": split,
        "size": len(samples),
        "grid_k": grid_k,
        "index_offset": index_offset,
        "vocab_hash": build_vocab(grid_k).hash(),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return jsonl_path, manifest_path


def regenerate_from_manifest(manifest: dict) -> list[Sample]:
    vocab = build_vocab(manifest["grid_k"])
    if vocab.hash() != manifest["vocab_hash"]:
        raise StateError("vocabulary hash mismatch; cannot regenerate dataset")
    return generate_dataset(manifest["seed"], manifest["split"], manifest["size"],
                            grid_k=manifest["grid_k"],
                            index_offset=manifest.get("index_offset", 0))
