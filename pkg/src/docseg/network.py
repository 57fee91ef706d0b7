"""The class-specific saliency detector.

A fully-convolutional network over square RGB pages: two rectangular-kernel
layers, a VGG-style ladder with two 2x2 max pools, a four-layer dilated
block that keeps the quarter-resolution maps at constant size, a 1x1
sigmoid head producing one heatmap per object class, and a bilinear
upsample back to the input resolution.

``scale_factor`` shrinks every map count proportionally so desk-scale
configurations (e.g. 128x128 input at 1/8 width) train in minutes on CPU
while keeping the exact layer structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor
from .common import CLASSES
from .layers import ConvBlock, ParamStore, RectConvPair
from .optim import Adam


class ConfigError(ValueError):
    """A layer table violates the architecture's shape contract."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the step was aborted."""


@dataclass(frozen=True)
class LayerRow:
    """One row of the layer table."""

    kind: str  # rectconv | conv | dilconv | pool
    maps: int = 0
    kernel: tuple = (3, 3)
    pad: tuple = (1, 1)
    dilation: tuple = (1, 1)
    batchnorm: bool = True
    activation: str = "relu"


def _scaled(maps, factor):
    scaled = int(round(maps * factor))
    scaled = max(2, scaled)
    return scaled + (scaled % 2)  # even counts so rectangular splits stay exact


@dataclass(frozen=True)
class NetworkConfig:
    """Hyperparameters of the saliency detector.

    The default values reproduce the reference layer table: channel ladder
    64,64 | 128,128 | 256x3 | 512x6 | dilated 512x4 (rates 2,4,8,16) | 256 |
    class_count, with 300 -> 150 -> 75 spatial resolution and a final
    upsample back to 300.  The dilated rows use pad == dilation so their
    3x3 kernels keep the 75x75 maps at constant size.
    """

    input_size: int = 300
    class_count: int = 4
    scale_factor: float = 1.0
    rect_split: float = 0.5
    rows: tuple = field(default=None)

    def __post_init__(self):
        if self.input_size % 4 != 0:
            raise ConfigError(f"input_size must be divisible by 4, got {self.input_size}")
        if not 0.0 < self.rect_split < 1.0:
            raise ConfigError(f"rect_split must lie in (0,1), got {self.rect_split}")
        if self.rows is None:
            object.__setattr__(self, "rows", self._default_rows())

    def _default_rows(self):
        f = self.scale_factor
        rows = [
            LayerRow("rectconv", _scaled(64, f)),
            LayerRow("rectconv", _scaled(64, f)),
            LayerRow("pool"),
            LayerRow("conv", _scaled(128, f)),
            LayerRow("conv", _scaled(128, f)),
            LayerRow("pool"),
        ]
        rows += [LayerRow("conv", _scaled(256, f))] * 3
        rows += [LayerRow("conv", _scaled(512, f))] * 6
        for rate in (2, 4, 8, 16):
            rows.append(
                LayerRow("dilconv", _scaled(512, f), pad=(rate, rate), dilation=(rate, rate))
            )
        rows.append(LayerRow("conv", _scaled(256, f)))
        rows.append(
            LayerRow(
                "conv",
                self.class_count,
                kernel=(1, 1),
                pad=(0, 0),
                batchnorm=False,
                activation="sigmoid",
            )
        )
        return tuple(rows)

    def shape_trace(self):
        """Per-layer (description, channels, height, width) trace; raises
        :class:`ConfigError` with the partial trace if any row breaks the
        constant-size or pooling contract."""
        trace = [("input", 3, self.input_size, self.input_size)]
        c, h, w = 3, self.input_size, self.input_size
        for idx, row in enumerate(self.rows):
            name = f"layer{idx + 1}:{row.kind}"
            if row.kind == "pool":
                if h % 2 or w % 2:
                    raise ConfigError(
                        f"{name}: pooling needs even input, got {h}x{w}\n" + _format_trace(trace)
                    )
                h, w = h // 2, w // 2
            elif row.kind in ("conv", "dilconv", "rectconv"):
                if row.kind == "rectconv":
                    specs = [
                        ConvSpec(c, row.maps // 2, 3, 7, pad_h=1, pad_w=3),
                        ConvSpec(c, row.maps - row.maps // 2, 7, 3, pad_h=3, pad_w=1),
                    ]
                else:
                    specs = [
                        ConvSpec(
                            c,
                            row.maps,
                            row.kernel[0],
                            row.kernel[1],
                            pad_h=row.pad[0],
                            pad_w=row.pad[1],
                            dilation_h=row.dilation[0],
                            dilation_w=row.dilation[1],
                        )
                    ]
                for spec in specs:
                    oh, ow = spec.out_size(h, w)
                    if (oh, ow) != (h, w):
                        raise ConfigError(
                            f"{name}: kernel {spec.kernel_h}x{spec.kernel_w} pad "
                            f"{spec.pad_h}x{spec.pad_w} dilation {spec.dilation_h}x{spec.dilation_w} "
                            f"maps {h}x{w} to {oh}x{ow}, breaking the constant-size contract\n"
                            + _format_trace(trace)
                        )
                c = row.maps
            else:
                raise ConfigError(f"{name}: unknown row kind {row.kind!r}")
            trace.append((name, c, h, w))
        trace.append(("upsample", c, self.input_size, self.input_size))
        return trace

    # -- key/value + layer-table text form --------------------------------

    def to_text(self):
        lines = [
            f"input_size = {self.input_size}",
            f"class_count = {self.class_count}",
            f"scale_factor = {self.scale_factor}",
            f"rect_split = {self.rect_split}",
            "",
            "# layer table (derived)",
            "# kind maps kernel pad dilation",
        ]
        for row in self.rows:
            lines.append(
                f"{row.kind} {row.maps} {row.kernel[0]}x{row.kernel[1]} "
                f"{row.pad[0]}x{row.pad[1]} {row.dilation[0]}x{row.dilation[1]}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        keys = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            keys[key.strip()] = value.strip()
        return cls(
            input_size=int(keys.get("input_size", 300)),
            class_count=int(keys.get("class_count", 4)),
            scale_factor=float(keys.get("scale_factor", 1.0)),
            rect_split=float(keys.get("rect_split", 0.5)),
        )


def _format_trace(trace):
    return "\n".join(f"  {name:<24} {c:>4} x {h:>4} x {w:>4}" for name, c, h, w in trace)


@dataclass
class SaliencyStack:
    """Per-class heatmaps over the input resolution, in class order
    table, pie, bar, line; every value lies in [0, 1]."""

    maps: np.ndarray  # [N, H, W] float32

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 3:
            raise ValueError(f"saliency stack must be [N,H,W], got {self.maps.shape}")

    @property
    def class_names(self):
        return CLASSES[: self.maps.shape[0]]


class SaliencyNet:
    """The detector: owns a parameter store and the layer blocks."""

    def __init__(self, config: NetworkConfig, seed=0):
        config.shape_trace()  # reject bad tables before allocating anything
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.blocks = []
        c = 3
        for idx, row in enumerate(config.rows):
            prefix = f"sal.l{idx + 1}"
            if row.kind == "pool":
                self.blocks.append(("pool", None))
                continue
            if row.kind == "rectconv":
                block = RectConvPair(self.store, prefix, c, row.maps, rng, split=config.rect_split)
            else:
                spec = ConvSpec(
                    c,
                    row.maps,
                    row.kernel[0],
                    row.kernel[1],
                    pad_h=row.pad[0],
                    pad_w=row.pad[1],
                    dilation_h=row.dilation[0],
                    dilation_w=row.dilation[1],
                    has_batchnorm=row.batchnorm,
                    activation=row.activation,
                )
                block = ConvBlock(self.store, prefix, spec, rng)
            self.blocks.append(("block", block))
            c = row.maps

    def forward(self, x, training=False):
        """[B,3,S,S] Tensor -> [B,N,S,S] Tensor of per-class heatmaps."""
        if x.shape[1] != 3 or x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ad.ShapeError(
                f"network expects [B,3,{self.config.input_size},{self.config.input_size}] input, "
                f"got {x.shape}"
            )
        out = x
        for kind, block in self.blocks:
            out = ad.maxpool2d(out) if kind == "pool" else block(out, training)
        return ad.upsample_bilinear(out, (self.config.input_size, self.config.input_size))

    def forward_trace(self, x):
        """Eval-mode forward that also records each layer's output shape."""
        shapes = [("input",) + tuple(x.shape[1:])]
        out = x
        for idx, (kind, block) in enumerate(self.blocks):
            out = ad.maxpool2d(out) if kind == "pool" else block(out, False)
            shapes.append((f"layer{idx + 1}:{kind if kind == 'pool' else self.config.rows[idx].kind}",)
                          + tuple(out.shape[1:]))
        out = ad.upsample_bilinear(out, (self.config.input_size, self.config.input_size))
        shapes.append(("upsample",) + tuple(out.shape[1:]))
        return out, shapes

    def predict(self, images):
        """Eval-mode inference on a [B,3,S,S] or [3,S,S] float array in [0,1]."""
        arr = np.asarray(images, dtype=np.float32)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        out = self.forward(Tensor(arr), training=False)
        maps = out.data
        return maps[0] if single else maps

    def state_dict(self):
        state = self.store.state_dict()
        state["meta.input_size"] = np.array([self.config.input_size], dtype=np.float32)
        state["meta.class_count"] = np.array([self.config.class_count], dtype=np.float32)
        return state

    def load_state_dict(self, state):
        meta = state.get("meta.input_size")
        if meta is not None and int(meta[0]) != self.config.input_size:
            raise ValueError(
                f"checkpoint was trained for input size {int(meta[0])}, "
                f"config asks for {self.config.input_size}"
            )
        self.store.load_state_dict({k: v for k, v in state.items() if not k.startswith("meta.")})


def build_network(config: NetworkConfig, seed=0):
    """Construct a detector with deterministic seeded initialisation."""
    return SaliencyNet(config, seed=seed)


def predict_saliency(net: SaliencyNet, image):
    """Run one [3,S,S] RGB image (values in [0,1]) through the detector."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ad.ShapeError(f"expected a [3,H,W] image, got {arr.shape}")
    return SaliencyStack(net.predict(arr))


def saliency_loss(computed, target):
    """Mean squared error between heatmap stacks.

    Accepts Tensors (returns a Tensor on the tape, used in training) or
    stacks/arrays (returns a float).
    """
    if isinstance(computed, Tensor) or isinstance(target, Tensor):
        return ad.mse_loss(computed, target)
    y = computed.maps if isinstance(computed, SaliencyStack) else np.asarray(computed)
    t = target.maps if isinstance(target, SaliencyStack) else np.asarray(target)
    if y.shape != t.shape:
        raise ad.ShapeError(f"saliency loss shape mismatch: {y.shape} vs {t.shape}")
    diff = y.astype(np.float64) - t.astype(np.float64)
    return float(np.mean(diff * diff))


@dataclass
class LossReport:
    saliency: float
    classification: float | None
    total: float


def make_optimizer(net, lr=1e-3, beta1=0.9):
    """Training defaults: Adam with learning rate 0.001 and momentum 0.9."""
    return Adam(net.store, lr=lr, beta1=beta1)


def train_saliency_step(net, images, targets, optimizer, classifier_hook=None):
    """One optimisation step on a batch.

    ``images`` [B,3,S,S] in [0,1]; ``targets`` [B,N,S,S] binary masks.  When
    ``classifier_hook`` is given it maps the predicted heatmap Tensor to a
    classification-loss Tensor (its classifiers must be frozen) and the
    total loss becomes the sum of both terms; otherwise the saliency term
    alone is optimised.  Returns a :class:`LossReport`.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    x = Tensor(np.asarray(images, dtype=np.float32))
    t = Tensor(np.asarray(targets, dtype=np.float32))
    pred = net.forward(x, training=True)
    l_s = ad.mse_loss(pred, t)
    if classifier_hook is not None:
        l_c = classifier_hook(pred)
        total = ad.add(l_c, l_s)
        report = LossReport(float(l_s.data), float(l_c.data), float(total.data))
    else:
        total = l_s
        report = LossReport(float(l_s.data), None, float(l_s.data))
    if not np.isfinite(report.total):
        net.store.zero_grad()
        raise DivergenceError(f"non-finite training loss {report.total}")
    total.backward()
    optimizer.step()
    return report
