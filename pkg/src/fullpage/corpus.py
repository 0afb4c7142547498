"""Synthetic document pages with line-level ground truth, plus corpus file I/O.

A corpus directory holds ``pages/<id>.pgm`` (8-bit binary PGM) and
``gt.jsonl`` with one record per page::

    {"id": ..., "width": W, "height": H,
     "lines": [{"x_left": .., "y_bottom": .., "height": .., "text": ..}, ...]}

Geometry is in integer pixels, origin top-left, y downward. ``y_bottom`` is
the first row below the line's ink, so the line occupies rows
``[y_bottom - height, y_bottom)``.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctc import TOY_SYMBOLS
from .font import BASE_H, BASE_W, GLYPHS


class CorpusError(ValueError):
    pass


# -- rendering ---------------------------------------------------------------

def glyph_width(height: int) -> int:
    return max(1, round(BASE_W * height / BASE_H))


def advance(height: int) -> int:
    """Horizontal pitch of one character at the given line height."""
    return glyph_width(height) + max(1, round(height / BASE_H))


def text_width(text: str, height: int) -> int:
    return len(text) * advance(height)


def render_text_line(text: str, height: int) -> np.ndarray:
    """Black-on-white (0 = ink, 1 = paper) bitmap of shape (height, len*advance)."""
    if height < 1:
        raise ValueError("height must be positive")
    gw, adv = glyph_width(height), advance(height)
    rows = (np.arange(height) * BASE_H) // height
    cols = (np.arange(gw) * BASE_W) // gw
    out = np.ones((height, len(text) * adv), dtype=np.float32)
    for k, ch in enumerate(text):
        g = GLYPHS.get(ch)
        if g is None:
            raise ValueError(f"no glyph for symbol {ch!r}")
        scaled = g[rows][:, cols]
        out[:, k * adv:k * adv + gw][scaled] = 0.0
    return out


# -- data types ---------------------------------------------------------------

@dataclass
class GroundTruthLine:
    x_left: int
    y_bottom: int
    height: int
    text: str

    @property
    def width(self) -> int:
        return text_width(self.text, self.height)

    @property
    def y_top(self) -> int:
        return self.y_bottom - self.height

    def triplet(self, page_width):
        return (self.x_left / page_width, self.y_bottom / page_width, self.height / page_width)

    def to_json(self):
        return {"x_left": self.x_left, "y_bottom": self.y_bottom,
                "height": self.height, "text": self.text}


@dataclass
class PageSample:
    id: str
    image: np.ndarray  # (1, H, W) float32 in [0, 1], multiples of 1/255
    lines: list

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]

    def triplets(self):
        return np.array([ln.triplet(self.width) for ln in self.lines]).reshape(-1, 3)

    def text(self):
        return "\n".join(ln.text for ln in reading_order(self.lines))


def reading_order(lines):
    return sorted(lines, key=lambda ln: (ln.y_bottom, ln.x_left))


@dataclass(frozen=True)
class CorpusConfig:
    width_range: tuple = (240, 256)
    height_range: tuple = (192, 208)
    p_two_columns: float = 0.5
    line_height_range: tuple = (10, 14)
    line_gap_range: tuple = (12, 16)  # blank rows between consecutive lines
    lines_per_column_range: tuple = (3, 6)
    words_per_line_range: tuple = (1, 3)
    word_length_range: tuple = (2, 5)
    margin_range: tuple = (8, 20)
    gutter_range: tuple = (16, 28)
    indent_max: int = 6
    noise: float = 0.05
    symbols: str = TOY_SYMBOLS

    def __post_init__(self):
        for name in ("width_range", "height_range", "line_height_range", "line_gap_range",
                     "lines_per_column_range", "words_per_line_range",
                     "word_length_range", "margin_range", "gutter_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} is degenerate: {(lo, hi)}")
        if self.line_height_range[0] < 8:
            raise ValueError("line height must be at least 8 px")
        if self.gutter_range[0] < 8:
            raise ValueError("gutter must be at least 8 px")
        if not 0 <= self.p_two_columns <= 1:
            raise ValueError("p_two_columns must be a probability")

    def expected_lines_per_page(self) -> float:
        lo, hi = self.lines_per_column_range
        return (lo + hi) / 2 * (1 + self.p_two_columns)


def page_seed(seed: int, page_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(page_id.encode())])


def page_id(index: int) -> str:
    return f"p{index:05d}"


# -- generation ---------------------------------------------------------------

def _ri(rng, lo_hi):
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _random_text(rng, cfg, max_width, height):
    letters = [s for s in cfg.symbols if s != " "]
    max_chars = max_width // advance(height)
    words = []
    for _ in range(_ri(rng, cfg.words_per_line_range)):
        w = "".join(rng.choice(letters, size=_ri(rng, cfg.word_length_range)))
        candidate = " ".join(words + [w])
        if len(candidate) > max_chars:
            break
        words.append(w)
    if not words:
        words = ["".join(rng.choice(letters, size=max(1, min(max_chars, cfg.word_length_range[0]))))]
    return " ".join(words)


def _layout(rng, cfg, W, H):
    two = rng.random() < cfg.p_two_columns
    left, right = _ri(rng, cfg.margin_range), _ri(rng, cfg.margin_range)
    top, bottom = _ri(rng, cfg.margin_range), _ri(rng, cfg.margin_range)
    usable = W - left - right
    if two:
        gutter = _ri(rng, cfg.gutter_range)
        col_w = (usable - gutter) // 2
        columns = [(left, col_w), (left + col_w + gutter, col_w)]
    else:
        columns = [(left, usable)]
    # rows are shared by all columns, so every left-column line has
    # right-column text at the same height on two-column pages
    n_rows = _ri(rng, cfg.lines_per_column_range)
    rows, y = [], top
    for _ in range(n_rows):
        h = _ri(rng, cfg.line_height_range)
        if y + h > H - bottom:
            break
        rows.append((y + h, h))
        y += h + _ri(rng, cfg.line_gap_range)
    lines = []
    for y_bottom, h in rows:
        for col_x, col_w in columns:
            indent = int(rng.integers(0, cfg.indent_max + 1))
            avail = col_w - indent
            if avail < advance(h):
                raise CorpusError("column too narrow for a single character")
            text = _random_text(rng, cfg, avail, h)
            lines.append(GroundTruthLine(col_x + indent, y_bottom, h, text))
    return lines


def generate_page(config: CorpusConfig, seed, page_id: str = "p00000", max_tries: int = 10) -> PageSample:
    """Deterministic page for (config, seed). ``seed`` may be an int or SeedSequence."""
    rng = np.random.Generator(np.random.PCG64(seed))
    W = _ri(rng, config.width_range)
    H = _ri(rng, config.height_range)
    for _ in range(max_tries):
        lines = _layout(rng, config, W, H)
        if lines:
            break
    else:
        raise CorpusError(f"could not place any line on a {W}x{H} page")
    img = np.ones((H, W), dtype=np.float32)
    for ln in lines:
        bmp = render_text_line(ln.text, ln.height)
        img[ln.y_top:ln.y_bottom, ln.x_left:ln.x_left + bmp.shape[1]] = bmp
    if config.noise > 0:
        img = img + rng.normal(0.0, config.noise, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return PageSample(page_id, img.astype(np.float32)[None], lines)


def generate_corpus(config: CorpusConfig, n_pages: int, seed: int, start: int = 0):
    return [generate_page(config, page_seed(seed, page_id(i)), page_id(i))
            for i in range(start, start + n_pages)]


# -- PGM / jsonl I/O ----------------------------------------------------------

def write_pgm(path, image):
    """Write a (H, W) or (1, H, W) array in [0, 1] as 8-bit binary PGM."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a (1, H, W) float32 array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorpusError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise CorpusError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorpusError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise CorpusError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    body = raw[pos:pos + w * h]
    if len(body) < w * h:
        raise CorpusError(f"{path}: truncated image data ({len(body)} of {w * h} bytes)")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return (img.astype(np.float32) / 255.0)[None]


def page_record(page: PageSample, extra_line_fields=None):
    lines = []
    for i, ln in enumerate(page.lines):
        rec = ln.to_json()
        if extra_line_fields:
            rec.update(extra_line_fields[i])
        lines.append(rec)
    return {"id": page.id, "width": page.width, "height": page.height, "lines": lines}


def parse_line_record(d, where, check_bounds=True):
    try:
        ln = GroundTruthLine(int(d["x_left"]), int(d["y_bottom"]), int(d["height"]), str(d["text"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"{where}: bad line record ({exc})") from None
    if ln.height <= 0:
        raise CorpusError(f"{where}: line height must be positive, got {ln.height}")
    if check_bounds and (ln.x_left < 0 or ln.y_top < 0):
        raise CorpusError(f"{where}: line box outside the page")
    return ln


def read_jsonl(path):
    """Yield (record, 'file:line') for each non-blank line of a jsonl file."""
    with open(path, encoding="utf-8") as f:
        for lineno, text in enumerate(f, 1):
            if not text.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: {exc.msg}") from None
            if not isinstance(rec, dict) or not {"id", "width", "height", "lines"} <= rec.keys():
                raise CorpusError(f"{where}: record needs id, width, height, lines")
            yield rec, where


def write_corpus(directory, pages):
    d = Path(directory)
    (d / "pages").mkdir(parents=True, exist_ok=True)
    with open(d / "gt.jsonl", "w", encoding="utf-8") as f:
        for page in pages:
            write_pgm(d / "pages" / f"{page.id}.pgm", page.image)
            f.write(json.dumps(page_record(page)) + "\n")


def read_corpus(directory):
    d = Path(directory)
    gt = d / "gt.jsonl"
    if not gt.exists():
        raise CorpusError(f"{gt}: missing ground-truth file")
    pages = []
    for rec, where in read_jsonl(gt):
        image = read_pgm(d / "pages" / f"{rec['id']}.pgm")
        if image.shape[1:] != (rec["height"], rec["width"]):
            raise CorpusError(f"{where}: image is {image.shape[2]}x{image.shape[1]}, "
                              f"record says {rec['width']}x{rec['height']}")
        lines = [parse_line_record(ln, where) for ln in rec["lines"]]
        for ln in lines:
            if ln.y_bottom > rec["height"] or ln.x_left >= rec["width"]:
                raise CorpusError(f"{where}: line box outside the page")
        pages.append(PageSample(rec["id"], image, lines))
    return pages
