"""2D-LSTM line recognizer trained with CTC and an end-of-line label.

Line crops are normalized to a fixed height, passed through a conv/MDLSTM
stack, summed over the remaining rows and mapped to per-column class
posteriors. The recognizer reads from the left edge of the crop and is
expected to transcribe only the line's own text followed by EOL, even when
the crop runs on into other text.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .checkpoint import OPT_PREFIX
from .ctc import Alphabet, InfeasibleAlignment, TOY_SYMBOLS, best_path_decode, ctc_loss_from_logits, log_softmax
from .detect_net import LineBox, TripletCandidate, triplet_to_box
from .mdlstm import MDLSTM
from .metrics import edit_distance
from .numeric_core import Conv2D, DimensionError, RMSProp, conv_output_size, make_rng

log = logging.getLogger(__name__)

DEFAULT_LAYERS = (
    ("conv", 8, (4, 4), (4, 2)),
    ("lstm", 8),
    ("conv", 16, (4, 4), (4, 2)),
    ("lstm", 16),
)


@dataclass
class RecognizerConfig:
    height: int = 32
    layers: tuple = DEFAULT_LAYERS
    symbols: str = TOY_SYMBOLS
    dropout: float = 0.0
    eol: bool = True

    def __post_init__(self):
        self.layers = tuple(tuple(tuple(p) if isinstance(p, list) else p for p in spec)
                            for spec in self.layers)

    def to_json(self):
        return asdict(self)


class Recognizer:
    def __init__(self, config: RecognizerConfig, rng=None, dtype=np.float32):
        self.config = config
        self.alphabet = Alphabet(config.symbols)
        rng = rng if rng is not None else make_rng(0)
        self.layers = []
        c = 1
        for k, spec in enumerate(config.layers):
            if spec[0] == "conv":
                _, feats, kernel, stride = spec
                self.layers.append(Conv2D(f"r{k}", c, feats, kernel, stride,
                                          dropout=config.dropout, rng=rng, dtype=dtype))
                c = feats
            else:
                self.layers.append(MDLSTM(f"r{k}", c, spec[1], rng=rng, dtype=dtype))
                c = spec[1]
        self.head = Conv2D("head", c, self.alphabet.n_classes, (1, 1), (1, 1),
                           activation=None, rng=rng, dtype=dtype)
        self.params, self.grads = {}, {}
        for layer in self.layers + [self.head]:
            self.params.update(layer.params)
            self.grads.update(layer.grads)

    def n_frames(self, width):
        """Output columns for an input of the given width (0 if too narrow)."""
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                if width < layer.kernel[1]:
                    return 0
                width = conv_output_size(width, layer.kernel[1], layer.stride[1])
        return width

    def min_width(self):
        w = 1
        for layer in reversed(self.layers):
            if isinstance(layer, Conv2D):
                w = (w - 1) * layer.stride[1] + layer.kernel[1]
        return w

    def forward(self, x, training=False, rng=None):
        """x: (B, 1, height, W) ink-positive lines -> scores (B, T, classes)."""
        if x.shape[2] != self.config.height:
            raise DimensionError(f"line height {x.shape[2]} != configured {self.config.height}")
        if x.shape[3] < self.min_width():
            raise DimensionError(f"line width {x.shape[3]} below receptive field {self.min_width()}")
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        self._rows = x.shape[2]
        x = x.sum(axis=2, keepdims=True)
        s = self.head.forward(x)
        return s[:, :, 0, :].transpose(0, 2, 1)

    def backward(self, d_scores):
        d = d_scores.transpose(0, 2, 1)[:, :, None, :]
        d = self.head.backward(np.ascontiguousarray(d))
        d = np.repeat(d, self._rows, axis=2)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def save(self, path, extra_meta=None):
        meta = {"kind": "recognizer", "config": self.config.to_json(), **(extra_meta or {})}
        checkpoint.save_model(path, self.params, meta)

    @classmethod
    def load(cls, path):
        params, meta = checkpoint.load_model(path)
        if meta.get("kind") != "recognizer":
            raise checkpoint.CheckpointError(f"{path}: not a recognizer checkpoint")
        model = cls(RecognizerConfig(**meta["config"]))
        for name, arr in params.items():
            if name.startswith(OPT_PREFIX):
                continue  # optimizer state kept for resuming training
            if name not in model.params or model.params[name].shape != arr.shape:
                raise checkpoint.CheckpointError(f"{path}: unexpected tensor {name}")
            model.params[name][...] = arr
        return model, meta


def build_recognizer(config: RecognizerConfig, rng=None, dtype=np.float32) -> Recognizer:
    return Recognizer(config, rng=rng, dtype=dtype)


# -- line extraction ------------------------------------------------------------

def resize_bilinear(img, out_h, out_w):
    """Bilinear resampling of a 2-d array with pixel-centre alignment."""
    h, w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return (top * (1 - fr)[:, None] + bot * fr[:, None]).astype(np.float32)


def prepare_line(page_image, box: LineBox, target_height=32):
    """Crop ``box`` from a (1, H, W) page and scale it to ``target_height`` rows."""
    crop = page_image[0, box.y_top:box.y_bottom, box.x_left:box.x_right]
    if crop.size == 0:
        raise ValueError(f"empty crop for box {box}")
    h, w = crop.shape
    out_w = max(1, int(round(w * target_height / h)))
    return np.clip(resize_bilinear(crop, target_height, out_w), 0.0, 1.0)[None]


def reference_box(line, page_width, page_height, margin=10):
    """Ground-truth line box: margin on the left, top and bottom, right edge at the text end."""
    return LineBox(max(0, line.x_left - margin), max(0, line.y_top - margin),
                   min(page_width, line.x_left + line.width),
                   min(page_height, line.y_bottom + margin))


def left_extended_box(line, page_width, page_height, margin=10, jitter=0, rng=None):
    dx = dy = dh = 0
    if jitter:
        dx, dy, dh = (int(v) for v in rng.integers(-jitter, jitter + 1, size=3))
    W = page_width
    t = TripletCandidate(((line.x_left + dx) / W, (line.y_bottom + dy) / W,
                          max(1, line.height + dh) / W), 1.0, (0, 0, 0))
    return triplet_to_box(t, page_width, page_height, margin)


def line_samples(pages, mode="left-extended", margin=10, height=32, jitter=0, rng=None):
    """(line image, transcript) pairs cut from ground truth in the given crop mode."""
    out = []
    for page in pages:
        for ln in page.lines:
            if mode == "reference":
                box = reference_box(ln, page.width, page.height, margin)
            elif mode == "left-extended":
                box = left_extended_box(ln, page.width, page.height, margin, jitter, rng)
            else:
                raise ValueError(f"unknown crop mode {mode!r}")
            if box is not None:
                out.append((prepare_line(page.image, box, height), ln.text))
    return out


# -- inference --------------------------------------------------------------------

def posteriors_from_scores(scores):
    return np.exp(log_softmax(np.asarray(scores, dtype=np.float64)))


def recognize_line(model: Recognizer, line_image):
    """(text, posteriors (T, classes)) for one (1, height, W) line image."""
    scores = model.forward((1.0 - line_image)[None])[0]
    post = posteriors_from_scores(scores)
    return best_path_decode(post, model.alphabet), post


# -- training ---------------------------------------------------------------------

def _pad_batch(images):
    """Ink-positive batch, left-padded with paper so every line keeps its own right edge."""
    w = max(im.shape[2] for im in images)
    h = images[0].shape[1]
    x = np.zeros((len(images), 1, h, w), dtype=np.float32)
    for b, im in enumerate(images):
        x[b, :, :, w - im.shape[2]:] = 1.0 - im
    return x


def recognizer_batch_loss(model, images, texts, training=True, rng=None):
    """Mean CTC loss over a batch; accumulates gradients. Returns (loss, n_used).

    Each line is scored on the last frames covering its own width.
    """
    x = _pad_batch(images)
    scores = model.forward(x, training=training, rng=rng)
    d = np.zeros(scores.shape, dtype=np.float64)
    total, used = 0.0, 0
    for b, (im, text) in enumerate(zip(images, texts)):
        T = model.n_frames(im.shape[2])
        first = scores.shape[1] - T
        target = model.alphabet.encode(text, eol=model.config.eol)
        try:
            loss, g = ctc_loss_from_logits(scores[b, first:], target)
        except InfeasibleAlignment as exc:
            log.warning("skipping line %r: %s", text, exc)
            continue
        total += loss
        d[b, first:] = g
        used += 1
    if used:
        model.backward((d / used).astype(scores.dtype))
    return (total / used if used else float("nan")), used


def recognizer_train_step(model, images, texts, optimizer: RMSProp, rng=None):
    model.zero_grad()
    loss, used = recognizer_batch_loss(model, images, texts, True, rng)
    if used:
        optimizer.update(model.params, model.grads)
    return loss


def corpus_wer(model, samples):
    """Total word edits over total reference words on (image, text) samples."""
    edits = words = 0
    for im, text in samples:
        hyp, _ = recognize_line(model, im)
        ref = text.split()
        edits += edit_distance(hyp.split(), ref)
        words += len(ref)
    return edits / words if words else 0.0


@dataclass
class RecogTrainState:
    optimizer: RMSProp
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)


def train_recognizer(model, samples, epochs, batch_size=4, lr=5e-3, seed=0,
                     val_samples=None, state=None, on_epoch=None,
                     decay_epoch=None, decay=0.2):
    """Minibatches are drawn from width-sorted buckets to keep padding small.

    ``samples`` is a list of (image, transcript) pairs, or a callable that takes the
    training rng and returns a fresh list each epoch (crop augmentation).
    The learning rate is multiplied by ``decay`` once, after epoch ``decay_epoch``.
    """
    state = state or RecogTrainState(RMSProp(lr=lr), make_rng(seed))
    draw = samples if callable(samples) else (lambda _rng: samples)
    for _ in range(epochs):
        if decay_epoch is not None and state.epoch == decay_epoch:
            state.optimizer.lr *= decay
        samples = draw(state.rng)
        widths = np.array([im.shape[2] for im, _ in samples])
        # shuffle, then sort within chunks of 8 batches by width
        order = state.rng.permutation(len(samples))
        chunk = batch_size * 8
        batches = []
        for s in range(0, len(order), chunk):
            part = order[s:s + chunk]
            part = part[np.argsort(widths[part], kind="stable")]
            batches += [part[i:i + batch_size] for i in range(0, len(part), batch_size)]
        batches = [batches[i] for i in state.rng.permutation(len(batches))]
        losses = []
        for idx in batches:
            loss = recognizer_train_step(model, [samples[i][0] for i in idx],
                                         [samples[i][1] for i in idx], state.optimizer, state.rng)
            if np.isfinite(loss):
                losses.append(loss)
        state.epoch += 1
        metric = corpus_wer(model, val_samples) if val_samples else float("nan")
        state.history.append((state.epoch, float(np.mean(losses)), metric))
        log.info("epoch %d loss %.4f WER %.4f", state.epoch, np.mean(losses), metric)
        if on_epoch:
            on_epoch(state)
    return state


# -- full page ------------------------------------------------------------------

def recognize_page(detector, recognizer, image, threshold=None, margin=10):
    """Detect line starts, crop to the right edge, recognize. Returns records."""
    from .detect_net import detect
    H, W = image.shape[1:]
    records = []
    for cand in detect(detector, image, threshold):
        box = triplet_to_box(cand, W, H, margin)
        if box is None:
            continue
        line = prepare_line(image, box, recognizer.config.height)
        if line.shape[2] < recognizer.min_width():
            continue
        text, _ = recognize_line(recognizer, line)
        records.append({"cand": cand, "box": box, "text": text})
    records.sort(key=lambda r: (r["cand"].y, r["cand"].x))
    return records
