"""Label-free two-view contrastive pretraining of the GSM encoder.

Two augmented views of each tumor slice form a positive pair; every other
view in the batch is a negative.  The projection head (global average
pool, linear map to 16 dims, L2 normalisation) is discarded on export.
Only the ``has_tumor`` flag of a slice is read, never its mask pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import LossHead, save_checkpoint
from .errors import BatchTooSmall, EmptyCorpus, NonFiniteLoss, NotTumorSlice
from .networks import NetConfig, build_gsm_encoder, encoder_param_names, make_gsm_input
from .preprocess import AugmentDraw, SlicePair, apply_draw
from .trainer import AdamWConfig, EpochRecord, OptimState, adamw_step, cosine_lr, he_init

PROJECTION_DIM = 16
TEMPERATURE = 0.1


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray


def make_views(s: SlicePair, draw_a: AugmentDraw, draw_b: AugmentDraw) -> ViewPair:
    """Two independently augmented (PET, PET, CT) views of a tumor slice."""
    if not s.has_tumor:
        raise NotTumorSlice("contrastive views are built from tumor slices only")
    image = make_gsm_input(s.pet, s.ct)
    return ViewPair(apply_draw(image, draw_a), apply_draw(image, draw_b))


def _positives(m: int) -> np.ndarray:
    b = m // 2
    return (np.arange(m) + b) % m


def nt_xent_loss(embeddings: np.ndarray, temperature: float = TEMPERATURE) -> float:
    """Normalised temperature-scaled cross-entropy.

    ``embeddings`` holds 2B unit vectors; rows i and i + B are positives.
    """
    u = np.asarray(embeddings, dtype=np.float64)
    m = u.shape[0]
    if m < 4 or m % 2:
        raise BatchTooSmall(f"need an even number of at least 4 embeddings, got {m}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sim = u @ u.T / temperature
    np.fill_diagonal(sim, -np.inf)
    pos = _positives(m)
    top = sim.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(sim - top).sum(axis=1))
    return math.fsum(lse - sim[np.arange(m), pos]) / m


class NtXentHead(LossHead):
    """L2-normalises raw projections, then applies :func:`nt_xent_loss`."""

    name = "nt_xent"

    def __init__(self, temperature: float = TEMPERATURE):
        self.temperature = temperature

    def value(self, pred, target=None):
        z = np.asarray(pred, dtype=np.float64)
        return nt_xent_loss(z / np.linalg.norm(z, axis=1, keepdims=True), self.temperature)

    def grad(self, pred, target=None):
        z = np.asarray(pred, dtype=np.float64)
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        u = z / norms
        m = u.shape[0]
        sim = u @ u.T / self.temperature
        np.fill_diagonal(sim, -np.inf)
        soft = np.exp(sim - sim.max(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(m), _positives(m)] -= 1.0
        g = soft / m
        du = (g + g.T) @ u / self.temperature
        return (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms


def build_pretrain_graph(cfg: NetConfig, seed: int = 0, temperature: float = TEMPERATURE):
    g = build_gsm_encoder(cfg, seed)
    width = cfg.widths()[-1]
    rng = np.random.default_rng(seed + 1)
    g.add_param("proj.weight", he_init((width, PROJECTION_DIM), width, rng))
    z = g.matmul(g.global_avg_pool(g.outputs["features"]), "proj.weight")
    g.mark_output("projection", z)
    g.mark_output("loss", g.head(z, None, NtXentHead(temperature)))
    return g


def embed(graph, images: np.ndarray) -> np.ndarray:
    """Unit-norm projections for a (N, 3, H, W) stack."""
    z = graph.forward({"image": images}, until="projection")
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@dataclass
class PretrainResult:
    encoder_state: dict
    history: list
    graph: object


def pretrain_encoder(corpus: list[SlicePair], cfg: NetConfig, epochs: int, seed: int = 0,
                     batch_size: int = 8, optim: AdamWConfig | None = None,
                     temperature: float = TEMPERATURE, log=None) -> PretrainResult:
    """Train the encoder contrastively; returns encoder-only parameters."""
    slices = [s for s in corpus if s.has_tumor]
    if not slices:
        raise EmptyCorpus("pretraining needs at least one tumor slice")
    if min(batch_size, len(slices)) < 2:
        raise BatchTooSmall("pretraining needs at least two slices per batch")
    optim = optim or AdamWConfig(lr_max=1e-3)
    g = build_pretrain_graph(cfg, seed, temperature)
    rng = np.random.default_rng(seed)
    state = OptimState.create(g.params, optim)
    history = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, optim.lr_max)
        order = rng.permutation(len(slices))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            pairs = [make_views(slices[i], AugmentDraw.sample(rng), AugmentDraw.sample(rng))
                     for i in idx]
            x = np.stack([p.view_a for p in pairs] + [p.view_b for p in pairs])
            loss = float(g.forward({"image": x}))
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"contrastive loss became {loss} at epoch {epoch}")
            g.backward()
            adamw_step(g.params, state, lr)
            losses.append(loss)
        rec = EpochRecord(epoch, lr, math.fsum(losses) / len(losses), {"nt_xent": math.fsum(losses) / len(losses)})
        history.append(rec)
        if log is not None:
            log(rec)
    enc = {k: g.params[k].data.copy() for k in encoder_param_names(g)}
    return PretrainResult(enc, history, g)


def save_encoder(result: PretrainResult, path, cfg: NetConfig) -> None:
    save_checkpoint(path, result.encoder_state, topology=None,
                    meta={"kind": "gsm_encoder", "base_channels": cfg.base_channels,
                          "depth": cfg.depth})
