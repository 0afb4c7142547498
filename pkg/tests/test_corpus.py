import json
from dataclasses import replace

import numpy as np
import pytest

from fullpage.corpus import (CorpusConfig, CorpusError, advance, generate_corpus, generate_page,
                             page_seed, read_corpus, read_pgm, render_text_line, write_corpus,
                             write_pgm)

CFG = CorpusConfig()


def test_space_renders_blank_advance():
    bmp = render_text_line(" ", 14)
    assert bmp.shape == (14, advance(14))
    assert np.all(bmp == 1.0)


def test_render_width_and_purity():
    a = render_text_line("AB", 14)
    assert a.shape == (14, 2 * advance(14))
    assert (a == 0).any()
    np.testing.assert_array_equal(a, render_text_line("AB", 14))


def test_unknown_symbol():
    with pytest.raises(ValueError, match="glyph"):
        render_text_line("a", 12)


def test_generation_is_deterministic():
    a = generate_page(CFG, 11)
    b = generate_page(CFG, 11)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.lines == b.lines


def test_noise_free_crop_equals_rendering():
    page = generate_page(replace(CFG, noise=0.0), 3)
    for ln in page.lines:
        crop = page.image[0, ln.y_top:ln.y_bottom, ln.x_left:ln.x_left + ln.width]
        np.testing.assert_array_equal(crop, render_text_line(ln.text, ln.height))


def test_invariants_and_ink_inside_boxes():
    pages = generate_corpus(replace(CFG, noise=0.0), 30, seed=5)
    for page in pages:
        mask = np.zeros(page.image.shape[1:], dtype=bool)
        for ln in page.lines:
            assert ln.text and ln.height >= 8
            assert 0 <= ln.x_left and ln.x_left + ln.width <= page.width
            assert 0 <= ln.y_top and ln.y_bottom <= page.height
            mask[ln.y_top:ln.y_bottom, ln.x_left:ln.x_left + ln.width] = True
        assert np.all(page.image[0][~mask] == 1.0)


def test_two_column_right_extension_hits_other_text():
    cfg = replace(CFG, p_two_columns=1.0)
    for page in generate_corpus(cfg, 100, seed=9):
        split = page.width / 2
        left = [ln for ln in page.lines if ln.x_left < split]
        right = [ln for ln in page.lines if ln.x_left >= split]
        assert left and right and min(r.x_left for r in right) > max(l.x_left + l.width for l in left) + 8
        for ln in left:
            hits = [r for r in right
                    if r.y_top < ln.y_bottom and ln.y_top < r.y_bottom and r.x_left > ln.x_left]
            assert hits, (page.id, ln)


def test_mean_lines_per_page_near_target():
    pages = generate_corpus(CFG, 120, seed=2)
    mean = np.mean([len(p.lines) for p in pages])
    target = CFG.expected_lines_per_page()
    assert abs(mean - target) <= 0.2 * target


def test_per_page_seeds_independent_of_order():
    seq = generate_corpus(CFG, 5, seed=4)
    tail = generate_corpus(CFG, 2, seed=4, start=3)
    for a, b in zip(seq[3:], tail):
        np.testing.assert_array_equal(a.image, b.image)
    direct = generate_page(CFG, page_seed(4, "p00002"), "p00002")
    np.testing.assert_array_equal(direct.image, seq[2].image)


def test_corpus_round_trip(tmp_path):
    pages = generate_corpus(CFG, 10, seed=1)
    write_corpus(tmp_path, pages)
    back = read_corpus(tmp_path)
    assert [p.id for p in back] == [p.id for p in pages]
    for a, b in zip(pages, back):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.lines == b.lines


def test_truncated_image_names_file(tmp_path):
    write_corpus(tmp_path, generate_corpus(CFG, 1, seed=1))
    path = tmp_path / "pages" / "p00000.pgm"
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CorpusError, match="p00000.pgm"):
        read_corpus(tmp_path)


def test_negative_height_rejected(tmp_path):
    write_corpus(tmp_path, generate_corpus(CFG, 1, seed=1))
    rec = json.loads((tmp_path / "gt.jsonl").read_text())
    rec["lines"][0]["height"] = -3
    (tmp_path / "gt.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(CorpusError, match="gt.jsonl:1"):
        read_corpus(tmp_path)


def test_malformed_json_has_line_number(tmp_path):
    write_corpus(tmp_path, generate_corpus(CFG, 2, seed=1))
    lines = (tmp_path / "gt.jsonl").read_text().splitlines()
    (tmp_path / "gt.jsonl").write_text(lines[0] + "\n{oops\n")
    with pytest.raises(CorpusError, match="gt.jsonl:2"):
        read_corpus(tmp_path)


def test_pgm_with_comment(tmp_path):
    img = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    (tmp_path / "b.pgm").write_bytes(raw.replace(b"P5\n", b"P5\n# made here\n", 1))
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), read_pgm(tmp_path / "a.pgm"))


def test_degenerate_config_rejected():
    with pytest.raises(ValueError):
        CorpusConfig(line_height_range=(12, 10))
    with pytest.raises(ValueError):
        CorpusConfig(line_height_range=(6, 10))
