import json

import numpy as np
import pytest

from fuselab.errors import ConfigError
from fuselab.tasks import (
    CELL_PIXELS,
    COLOR_NAMES,
    GLYPH_NAMES,
    QA_TAGS,
    SyntheticScene,
    build_vocab,
    dataset_jsonl_bytes,
    dump_dataset,
    generate_dataset,
    oracle_answer,
    regenerate_from_manifest,
    render,
)


def empty_scene(k=4):
    return SyntheticScene(glyphs=np.full((k, k), -1), colors=np.full((k, k), -1))


def one_glyph_scene(k=4, r=0, c=0, glyph=0, color=0):
    s = empty_scene(k)
    s.glyphs[r, c] = glyph
    s.colors[r, c] = color
    return s


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_empty_grid_all_zeros():
    assert np.all(render(empty_scene()) == 0.0)


def test_render_deterministic():
    s = one_glyph_scene(r=1, c=2, glyph=3, color=4)
    assert render(s).tobytes() == render(s).tobytes()


def test_render_shape_matches_grid():
    img = render(empty_scene(4))
    assert img.shape == (3, 32, 32)


def test_render_diff_confined_to_changed_cell():
    a = one_glyph_scene(r=1, c=1, glyph=2, color=1)
    b = one_glyph_scene(r=1, c=1, glyph=5, color=3)
    b.glyphs[2, 3] = 7
    b.colors[2, 3] = 2
    diff = np.abs(render(a) - render(b)).sum(axis=0)
    changed = np.argwhere(diff > 0)
    for r, c in changed:
        cell = (r // CELL_PIXELS, c // CELL_PIXELS)
        assert cell in ((1, 1), (2, 3))


def test_render_unknown_glyph_rejected():
    s = one_glyph_scene()
    s.glyphs[0, 0] = 99
    with pytest.raises(ConfigError):
        render(s)


def test_glyph_bitmaps_distinct():
    from fuselab.tasks import GLYPH_BITMAPS

    flat = {bm.tobytes() for bm in GLYPH_BITMAPS}
    assert len(flat) == len(GLYPH_NAMES)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocab_size_and_roundtrip():
    vocab = build_vocab(4)
    assert vocab.size <= 128
    for words in (["red", "A", "at", "0", "0"], ["majority", "color", "?"],
                  list(GLYPH_NAMES), list(COLOR_NAMES)):
        assert vocab.decode(vocab.encode(words)) == words


def test_vocab_unknown_word():
    with pytest.raises(ConfigError):
        build_vocab(4).encode(["turquoise"])


def test_vocab_stable_hash():
    assert build_vocab(4).hash() == build_vocab(4).hash()
    assert build_vocab(4).hash() != build_vocab(3).hash()


# ---------------------------------------------------------------------------
# label oracle
# ---------------------------------------------------------------------------


def test_single_red_glyph_detail_color():
    s = one_glyph_scene(r=0, c=0, glyph=0, color=0)  # red 'A' at (0, 0)
    assert oracle_answer(s, "detail-color", (0, 0)) == ["red"]
    assert oracle_answer(s, "detail-glyph", (0, 0)) == ["A"]


def test_count_empty_grid_is_zero():
    assert oracle_answer(empty_scene(), "count") == ["0"]


def test_majority_tie_breaks_to_smallest_id():
    s = empty_scene()
    s.glyphs[0, 0], s.colors[0, 0] = 0, 3
    s.glyphs[0, 1], s.colors[0, 1] = 1, 1
    assert s.majority_color() == COLOR_NAMES[1]


def test_caption_raster_order():
    s = empty_scene()
    s.glyphs[1, 2], s.colors[1, 2] = 2, 2   # blue C at 1 2
    s.glyphs[0, 0], s.colors[0, 0] = 0, 0   # red A at 0 0
    assert s.caption_words() == ["red", "A", "at", "0", "0", ",",
                                 "blue", "C", "at", "1", "2"]


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def test_generation_deterministic_bytes():
    a = generate_dataset(7, "sft-qa", 24)
    b = generate_dataset(7, "sft-qa", 24)
    assert dataset_jsonl_bytes(a) == dataset_jsonl_bytes(b)


def test_qa_split_stratified_evenly():
    samples = generate_dataset(1, "sft-qa", 40)
    tags = [s.task_tag for s in samples]
    for tag in QA_TAGS:
        assert tags.count(tag) == 10


def test_caption_split_all_captions():
    samples = generate_dataset(2, "pretrain-captions", 8)
    assert all(s.task_tag == "caption" for s in samples)


def test_label_oracle_consistency():
    vocab = build_vocab(4)
    for s in generate_dataset(3, "sft-qa", 40):
        derived = oracle_answer(s.scene, s.task_tag, s.answer_cell) + ["<eos>"]
        assert vocab.encode(derived) == s.answer_ids, s.task_tag


def test_detail_answers_are_patch_local():
    # Emptying the answer cell changes pixels only there and breaks the label.
    for s in generate_dataset(4, "sft-qa", 16):
        if not s.task_tag.startswith("detail"):
            continue
        r, c = s.answer_cell
        masked = SyntheticScene(glyphs=s.scene.glyphs.copy(), colors=s.scene.colors.copy())
        masked.glyphs[r, c] = -1
        masked.colors[r, c] = -1
        diff = np.abs(render(masked) - s.image).sum(axis=0)
        rows, cols = np.nonzero(diff)
        assert rows.size > 0
        assert all((rr // CELL_PIXELS, cc // CELL_PIXELS) == (r, c)
                   for rr, cc in zip(rows, cols))
        assert masked.color_at(r, c) is None


def test_majority_samples_have_strict_majority():
    for s in generate_dataset(5, "sft-qa", 40):
        if s.task_tag != "majority-color":
            continue
        ids = s.scene.colors[s.scene.colors >= 0]
        counts = np.bincount(ids, minlength=len(COLOR_NAMES))
        top = np.sort(counts)[::-1]
        assert top[0] > top[1]


def test_index_offset_gives_disjoint_samples():
    train = generate_dataset(6, "sft-qa", 16)
    held = generate_dataset(6, "sft-qa", 16, index_offset=1_000_000)
    train_imgs = {s.image.tobytes() for s in train}
    held_imgs = {s.image.tobytes() for s in held}
    assert not (train_imgs & held_imgs)


def test_grid_too_fine_rejected():
    with pytest.raises(ConfigError):
        generate_dataset(0, "sft-qa", 4, grid_k=9, n_patches=64)


def test_bad_split_and_size():
    with pytest.raises(ConfigError):
        generate_dataset(0, "nope", 4)
    with pytest.raises(ConfigError):
        generate_dataset(0, "sft-qa", 0)


def test_dump_and_regenerate_bytewise(tmp_path):
    samples = generate_dataset(8, "sft-qa", 12, index_offset=50)
    jsonl_path, manifest_path = dump_dataset(
        samples, tmp_path / "qa", seed=8, split="sft-qa", grid_k=4, index_offset=50)
    manifest = json.loads(manifest_path.read_text())
    regen = regenerate_from_manifest(manifest)
    assert dataset_jsonl_bytes(regen) == jsonl_path.read_bytes()
