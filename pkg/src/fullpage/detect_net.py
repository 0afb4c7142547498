"""Fully-convolutional 2D-LSTM detector for the left sides of text lines.

The network ends with a 1x1 convolution producing, at every output cell,
``A`` candidates of ``K`` coordinates plus a confidence. Coordinates are
decoded relative to the cell and normalized by page width:

    x = (j + sigmoid(r_x)) * S_x / W
    y = (i + sigmoid(r_y)) * S_y / W
    h = h_max * sigmoid(r_h) / W

with ``S_x, S_y`` the cumulative strides of the network.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .checkpoint import OPT_PREFIX
from .match_loss import MatchLossConfig, match_and_loss
from .mdlstm import MDLSTM
from .metrics import AcceptanceZone, detection_fmeasure
from .numeric_core import Conv2D, DimensionError, RMSProp, make_rng, sigmoid

log = logging.getLogger(__name__)

# ("conv", features, (fh, fw), (sh, sw)) or ("lstm", hidden)
TABLE_I = (
    ("conv", 12, (4, 4), (3, 3)),
    ("lstm", 12),
    ("conv", 16, (4, 3), (3, 2)),
    ("lstm", 16),
    ("conv", 24, (6, 3), (4, 2)),
    ("lstm", 24),
    ("conv", 30, (4, 3), (3, 2)),
    ("lstm", 30),
    ("conv", 36, (3, 2), (2, 1)),
)

MINIATURE = (
    ("conv", 8, (4, 4), (3, 3)),
    ("lstm", 8),
    ("conv", 16, (3, 3), (2, 2)),
    ("lstm", 16),
    ("conv", 24, (3, 3), (2, 2)),
)

COORD_NAMES = {2: ("x", "y"), 3: ("x", "y", "h"), 4: ("x", "y", "w", "h")}


class ConfigError(ValueError):
    pass


@dataclass
class DetectorConfig:
    layers: tuple = TABLE_I
    K: int = 3
    A: int = 20
    threshold: float = 0.5
    h_max: float | None = None  # pixels; None -> 2 * vertical stride
    dropout: float = 0.5
    in_channels: int = 1

    def __post_init__(self):
        self.layers = tuple(tuple(tuple(p) if isinstance(p, list) else p for p in spec)
                            for spec in self.layers)
        if self.K not in COORD_NAMES:
            raise ConfigError(f"K must be 2, 3 or 4, got {self.K}")
        if self.A < 1:
            raise ConfigError("A must be positive")
        if not 0 < self.threshold <= 1:
            raise ConfigError("threshold must be in (0, 1]")

    @property
    def strides(self):
        sy = math.prod(spec[3][0] for spec in self.layers if spec[0] == "conv")
        sx = math.prod(spec[3][1] for spec in self.layers if spec[0] == "conv")
        return sy, sx

    @property
    def height_scale(self):
        return self.h_max if self.h_max is not None else 2.0 * self.strides[0]

    def to_json(self):
        return asdict(self)


def miniature_config(**overrides) -> DetectorConfig:
    """Desk-scale detector: MINIATURE stack, 4 candidates per cell, no dropout."""
    return DetectorConfig(**{"layers": MINIATURE, "A": 4, "dropout": 0.0, **overrides})


@dataclass
class TripletCandidate:
    coords: tuple  # K values normalized by page width
    confidence: float
    cell: tuple  # (i, j, a)

    @property
    def x(self):
        return self.coords[0]

    @property
    def y(self):
        return self.coords[1]

    @property
    def h(self):
        return self.coords[-1]


@dataclass
class LineBox:
    x_left: int
    y_top: int
    x_right: int
    y_bottom: int


class Detector:
    def __init__(self, config: DetectorConfig, rng=None, dtype=np.float32):
        self.config = config
        rng = rng if rng is not None else make_rng(0)
        self.layers = []
        c = config.in_channels
        for k, spec in enumerate(config.layers):
            if spec[0] == "conv":
                _, feats, kernel, stride = spec
                self.layers.append(Conv2D(f"c{k}", c, feats, kernel, stride,
                                          dropout=config.dropout, rng=rng, dtype=dtype))
                c = feats
            elif spec[0] == "lstm":
                self.layers.append(MDLSTM(f"l{k}", c, spec[1], rng=rng, dtype=dtype))
                c = spec[1]
            else:
                raise ConfigError(f"layer {k}: unknown layer kind {spec[0]!r}")
        self.layers.append(Conv2D("out", c, (config.K + 1) * config.A, (1, 1), (1, 1),
                                  activation=None, rng=rng, dtype=dtype))
        self.params = {}
        self.grads = {}
        for layer in self.layers:
            self.params.update(layer.params)
            self.grads.update(layer.grads)

    # -- structure --------------------------------------------------------

    def layer_param_counts(self):
        return [layer.n_params for layer in self.layers]

    def feature_map_shapes(self, h, w):
        shapes = []
        c = self.config.in_channels
        for layer in self.layers:
            c, h, w = layer.out_shape(h, w)
            if h < 1 or w < 1:
                raise DimensionError(f"input too small: {layer.name} output is {h}x{w}")
            shapes.append((c, h, w))
        return shapes

    def min_input_size(self):
        h = w = 1
        for layer in reversed(self.layers):
            if isinstance(layer, Conv2D):
                h = (h - 1) * layer.stride[0] + layer.kernel[0]
                w = (w - 1) * layer.stride[1] + layer.kernel[1]
        return h, w

    def n_candidates(self, h, w):
        _, ho, wo = self.feature_map_shapes(h, w)[-1]
        return ho * wo * self.config.A

    # -- forward / backward -------------------------------------------------

    def forward(self, x, training=False, rng=None):
        """x: (B, C, H, W) network input (ink positive). Returns raw outputs."""
        mh, mw = self.min_input_size()
        if x.shape[2] < mh or x.shape[3] < mw:
            raise DimensionError(f"image {x.shape[2]}x{x.shape[3]} is smaller than the "
                                 f"receptive field; minimum size is {mh}x{mw}")
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, d_raw):
        for layer in reversed(self.layers):
            d_raw = layer.backward(d_raw)
        return d_raw

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    # -- decoding -------------------------------------------------------------

    def _split(self, raw):
        """(C, Ho, Wo) -> (Ho, Wo, A, K+1); last entry of each anchor is confidence."""
        K, A = self.config.K, self.config.A
        ho, wo = raw.shape[1:]
        return raw.reshape(A, K + 1, ho, wo).transpose(2, 3, 0, 1)

    def decode(self, raw, page_width):
        """Decode one raw output map into (coords (N,K), conf (N,), cells (N,3))."""
        K = self.config.K
        sy, sx = self.config.strides
        r = self._split(raw).astype(np.float64)
        ho, wo, A = r.shape[:3]
        s = sigmoid(r)
        ii, jj, aa = np.meshgrid(np.arange(ho), np.arange(wo), np.arange(A), indexing="ij")
        coords = np.empty((ho, wo, A, K))
        coords[..., 0] = (jj + s[..., 0]) * sx / page_width
        coords[..., 1] = (ii + s[..., 1]) * sy / page_width
        if K == 3:
            coords[..., 2] = self.config.height_scale * s[..., 2] / page_width
        elif K == 4:
            coords[..., 2] = s[..., 2]  # width as a fraction of the page width
            coords[..., 3] = self.config.height_scale * s[..., 3] / page_width
        cells = np.stack([ii, jj, aa], axis=-1).reshape(-1, 3)
        return coords.reshape(-1, K), s[..., K].reshape(-1), cells

    def decode_backward(self, raw, page_width, d_coords, d_conf):
        """Chain gradients w.r.t. decoded values back to the raw output map."""
        K = self.config.K
        sy, sx = self.config.strides
        r = self._split(raw).astype(np.float64)
        ho, wo, A = r.shape[:3]
        s = sigmoid(r)
        ds = s * (1 - s)
        scale = np.ones(K + 1)
        scale[0] = sx / page_width
        scale[1] = sy / page_width
        if K == 3:
            scale[2] = self.config.height_scale / page_width
        elif K == 4:
            scale[3] = self.config.height_scale / page_width
        g = np.concatenate([d_coords, d_conf[:, None]], axis=1).reshape(ho, wo, A, K + 1)
        d_r = g * scale * ds
        return d_r.transpose(2, 3, 0, 1).reshape(raw.shape)

    # -- persistence ------------------------------------------------------------

    def save(self, path, extra_meta=None):
        meta = {"kind": "detector", "config": self.config.to_json(), **(extra_meta or {})}
        checkpoint.save_model(path, self.params, meta)

    @classmethod
    def load(cls, path):
        params, meta = checkpoint.load_model(path)
        if meta.get("kind") != "detector":
            raise checkpoint.CheckpointError(f"{path}: not a detector checkpoint")
        model = cls(DetectorConfig(**meta["config"]))
        for name, arr in params.items():
            if name.startswith(OPT_PREFIX):
                continue  # optimizer state kept for resuming training
            if name not in model.params or model.params[name].shape != arr.shape:
                raise checkpoint.CheckpointError(f"{path}: unexpected tensor {name}")
            model.params[name][...] = arr
        return model, meta


def build_detector(config: DetectorConfig, rng=None, dtype=np.float32) -> Detector:
    return Detector(config, rng=rng, dtype=dtype)


def prepare_pages(images):
    """Stack (1,H,W) page images into an ink-positive batch, padding with paper."""
    h = max(im.shape[1] for im in images)
    w = max(im.shape[2] for im in images)
    batch = np.zeros((len(images), 1, h, w), dtype=np.float32)
    for b, im in enumerate(images):
        batch[b, :, :im.shape[1], :im.shape[2]] = 1.0 - im
    return batch


def page_targets(page, K):
    W = page.width
    rows = []
    for ln in page.lines:
        x, y, h = ln.x_left / W, ln.y_bottom / W, ln.height / W
        rows.append({2: (x, y), 3: (x, y, h), 4: (x, y, ln.width / W, h)}[K])
    return np.array(rows, dtype=np.float64).reshape(-1, K)


def detect(model: Detector, image, threshold=None):
    """Candidates above ``threshold`` for one (1, H, W) page, best first."""
    threshold = model.config.threshold if threshold is None else threshold
    raw = model.forward(prepare_pages([image]))[0]
    coords, conf, cells = model.decode(raw, image.shape[2])
    keep = np.flatnonzero(conf > threshold)
    keep = keep[np.argsort(-conf[keep], kind="stable")]
    return [TripletCandidate(tuple(coords[n]), float(conf[n]), tuple(int(v) for v in cells[n]))
            for n in keep]


def triplet_to_box(t, page_width, page_height, margin=10):
    """Pixel box from the left side to the right page edge, expanded by ``margin``.

    Returns None when the clipped box is empty.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    x, y, h = t.coords[0], t.coords[1], t.coords[-1]
    W = page_width
    box = LineBox(
        x_left=int(round(max(0.0, x * W - margin))),
        y_top=int(round(max(0.0, y * W - h * W - margin))),
        x_right=int(page_width),
        y_bottom=int(round(min(page_height, y * W + margin))),
    )
    if box.y_top >= box.y_bottom or box.x_left >= box.x_right:
        return None
    return box


# -- training -----------------------------------------------------------------

def detector_batch_loss(model, pages, match_cfg, training=True, rng=None):
    """Forward + matching loss on a batch; accumulates parameter gradients."""
    x = prepare_pages([p.image for p in pages])
    raw = model.forward(x, training=training, rng=rng)
    d_raw = np.zeros(raw.shape, dtype=np.float64)
    total = 0.0
    for b, page in enumerate(pages):
        coords, conf, _ = model.decode(raw[b], page.width)
        loss, dc, dconf, _ = match_and_loss(coords, conf, page_targets(page, model.config.K), match_cfg)
        total += loss
        d_raw[b] = model.decode_backward(raw[b], page.width, dc, dconf)
    n = len(pages)
    model.backward((d_raw / n).astype(raw.dtype))
    return total / n


def evaluate_detector(model, pages, zones=(0.03,), threshold=None):
    """Micro-averaged detection F per zone over pages."""
    K = model.config.K
    stats = {z: [0, 0, 0] for z in zones}  # correct, n_hyp, n_ref
    for page in pages:
        cands = detect(model, page.image, threshold)
        hyps = np.array([c.coords for c in cands]).reshape(-1, K)
        refs = page_targets(page, K)
        for z in zones:
            p, r, _ = detection_fmeasure(hyps, refs, AcceptanceZone(z, K))
            stats[z][0] += r * len(refs)
            stats[z][1] += len(hyps)
            stats[z][2] += len(refs)
    out = {}
    for z, (correct, nh, nr) in stats.items():
        p = correct / nh if nh else 0.0
        r = correct / nr if nr else 0.0
        out[z] = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return out


@dataclass
class TrainState:
    optimizer: RMSProp
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)


def train_detector(model, pages, epochs, batch_size=8, lr=1e-3, seed=0,
                   match_cfg=MatchLossConfig(), val_pages=None, state=None,
                   on_epoch=None):
    """RMSProp training over ``pages``; returns the TrainState (with loss history)."""
    state = state or TrainState(RMSProp(lr=lr), make_rng(seed))
    for _ in range(epochs):
        order = state.rng.permutation(len(pages))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [pages[i] for i in order[start:start + batch_size]]
            model.zero_grad()
            losses.append(detector_batch_loss(model, batch, match_cfg, True, state.rng))
            state.optimizer.update(model.params, model.grads)
        state.epoch += 1
        metric = evaluate_detector(model, val_pages)[0.03] if val_pages else float("nan")
        state.history.append((state.epoch, float(np.mean(losses)), metric))
        log.info("epoch %d loss %.4f F@0.03 %.4f", state.epoch, np.mean(losses), metric)
        if on_epoch:
            on_epoch(state)
    return state
