"""The two segmentation networks as compute graphs.

GSM (first stage): residual conv encoder + U-Net decoder, 3-channel input
(PET, PET, CT).  LRM (second stage): plain 2D U-Net, 5-channel input (PET,
PET, CT, first-stage probability, first-stage binary mask).  Both end in a
1x1 conv and a sigmoid.

Encoder parameters are named ``encoder.l{level}.{conv}.{weight|bias}`` so
that pretrained encoders load into the GSM by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ComputeGraph
from .errors import ConfigInvalid, ShapeMismatch
from .losses import GsmLoss, LrmLoss
from .trainer import he_init

GSM_IN_CHANNELS = 3
LRM_IN_CHANNELS = 5
OUT_CHANNELS = 1
THRESHOLD = 0.5


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigInvalid(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 2:
            raise ConfigInvalid(f"base_channels must be >= 2, got {self.base_channels}")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth)]


def _conv(g: ComputeGraph, x: int, name: str, cin: int, cout: int, k: int,
          rng: np.random.Generator, zero: bool = False) -> int:
    w = np.zeros((cout, cin, k, k)) if zero else he_init((cout, cin, k, k), cin * k * k, rng)
    g.add_param(f"{name}.weight", w)
    g.add_param(f"{name}.bias", np.zeros(cout))
    return g.conv2d(x, f"{name}.weight", f"{name}.bias", stride=1, padding=k // 2)


def _double_conv(g, x, name, cin, cout, rng):
    x = g.relu(_conv(g, x, f"{name}.conv1", cin, cout, 3, rng))
    return g.relu(_conv(g, x, f"{name}.conv2", cout, cout, 3, rng))


def _residual_block(g, x, name, cin, cout, rng):
    y = g.relu(_conv(g, x, f"{name}.conv1", cin, cout, 3, rng))
    y = _conv(g, y, f"{name}.conv2", cout, cout, 3, rng)
    skip = x if cin == cout else _conv(g, x, f"{name}.shortcut", cin, cout, 1, rng)
    return g.relu(g.add(y, skip))


def _encoder(g: ComputeGraph, cfg: NetConfig, in_channels: int, block, rng) -> list[int]:
    x = g.input("image", in_channels)
    skips = []
    cin = in_channels
    for level, width in enumerate(cfg.widths()):
        if level > 0:
            x = g.maxpool2d(x)
        x = block(g, x, f"encoder.l{level}", cin, width, rng)
        skips.append(x)
        cin = width
    g.mark_output("features", x)
    g.config = cfg
    return skips


def build_gsm_encoder(cfg: NetConfig, seed: int = 0) -> ComputeGraph:
    """The GSM encoder alone; parameter names match :func:`build_gsm`."""
    g = ComputeGraph()
    _encoder(g, cfg, GSM_IN_CHANNELS, _residual_block, np.random.default_rng(seed))
    return g


def _unet(cfg: NetConfig, in_channels: int, block, seed: int, zero_head: bool,
          loss) -> ComputeGraph:
    rng = np.random.default_rng(seed)
    g = ComputeGraph()
    widths = cfg.widths()
    skips = _encoder(g, cfg, in_channels, block, rng)
    x = skips[-1]
    for level in range(len(widths) - 2, -1, -1):
        x = g.concat([g.upsample2x(x), skips[level]])
        x = _double_conv(g, x, f"decoder.l{level}", widths[level + 1] + widths[level],
                         widths[level], rng)
    logits = _conv(g, x, "head", widths[0], OUT_CHANNELS, 1, rng, zero=zero_head)
    prob = g.sigmoid(logits)
    g.mark_output("prob", prob)
    target = g.input("target", OUT_CHANNELS)
    g.mark_output("loss", g.head(prob, target, loss))
    return g


def build_gsm(cfg: NetConfig, seed: int = 0, zero_head: bool = False) -> ComputeGraph:
    """Residual encoder / U-Net decoder with the first-stage loss head."""
    return _unet(cfg, GSM_IN_CHANNELS, _residual_block, seed, zero_head, GsmLoss())


def build_lrm(cfg: NetConfig, seed: int = 0, zero_head: bool = False) -> ComputeGraph:
    """Plain U-Net with the second-stage loss head."""
    return _unet(cfg, LRM_IN_CHANNELS, _double_conv, seed, zero_head, LrmLoss())


def encoder_param_names(net: ComputeGraph) -> list[str]:
    return sorted(k for k in net.params if k.startswith("encoder."))


def make_gsm_input(pet: np.ndarray, ct: np.ndarray) -> np.ndarray:
    """Stack (PET, PET, CT) along the channel axis.  Accepts (H,W) or (N,H,W)."""
    pet, ct = np.asarray(pet, dtype=np.float64), np.asarray(ct, dtype=np.float64)
    if pet.shape != ct.shape:
        raise ShapeMismatch(f"PET {pet.shape} and CT {ct.shape} differ")
    return np.stack([pet, pet, ct], axis=-3)


def make_lrm_input(pet, ct, prob, binary=None) -> np.ndarray:
    """Stack (PET, PET, CT, prob, binary); binary defaults to prob >= 0.5."""
    prob = np.asarray(prob, dtype=np.float64)
    if binary is None:
        binary = (prob >= THRESHOLD).astype(np.float64)
    parts = [np.asarray(a, dtype=np.float64) for a in (pet, pet, ct, prob, binary)]
    if len({a.shape for a in parts}) != 1:
        raise ShapeMismatch(f"LRM channels have shapes {[a.shape for a in parts]}")
    return np.stack(parts, axis=-3)


def forward_segment(net: ComputeGraph, image: np.ndarray) -> np.ndarray:
    """Probability map for ``(C,H,W)`` or ``(N,C,H,W)`` input, same spatial size."""
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    expected = net.nodes[net.input_ids["image"]].channels
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeMismatch(f"network expects {expected} input channels, got shape {x.shape}")
    factor = 2 ** (net.config.depth - 1)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeMismatch(f"spatial extents {x.shape[2:]} must be divisible by {factor}")
    prob = net.forward({"image": x}, until="prob")[:, 0]
    return prob[0] if single else prob
