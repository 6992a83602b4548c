"""Masked tube reconstruction: encoder over visible volumes, decoder over masked ones."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import container, layers, numerics as nx
from .errors import Divergence, NoTarget, ShapeError
from .tubemask import (DEFAULT_SCALES, TubeSpec, VolumePartition, VolumeSpec, extract_volumes,
                       make_mask_plan, partition_volumes, sample_scale)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    volume_t: int = 2
    patch: int = 8
    channels: int = 1
    width: int = 32
    depth: int = 2
    heads: int = 1
    pixel_mean: float = 0.3
    pixel_std: float = 0.2

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def volume(self) -> VolumeSpec:
        return VolumeSpec(self.volume_t, self.patch)

    @property
    def volume_size(self) -> int:
        return self.volume_t * self.patch * self.patch * self.channels


class VideoEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = layers.Linear(cfg.volume_size, cfg.width)
        self.placeholder = nn.Parameter(torch.zeros(1, cfg.width))
        nx.uniform_fan_in_(self.placeholder)
        self.blocks = nn.ModuleList(layers.Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = layers.LayerNorm(cfg.width)

    def forward(self, volumes: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """``volumes`` is ``(..., n, volume_size)``; ``coords`` is ``(n, 3)``."""
        pos = layers.sinusoid_3d(coords, self.cfg.width).to(volumes.dtype)
        x = self.embed((volumes - self.cfg.pixel_mean) / self.cfg.pixel_std) + pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode_placeholder(self) -> torch.Tensor:
        x = self.placeholder
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode_clip(self, video: torch.Tensor) -> torch.Tensor:
        """Latents for every volume of ``video`` (no masking), ``(m, width)``."""
        vols = extract_volumes(video, self.cfg.volume)
        n, h, w, _ = video.shape
        grid = (n // self.cfg.volume_t, h // self.cfg.patch, w // self.cfg.patch)
        return self(vols, torch.from_numpy(grid_coords(grid)))


def grid_coords(grid) -> np.ndarray:
    nt, ny, nx_ = grid
    t, y, x = np.meshgrid(np.arange(nt), np.arange(ny), np.arange(nx_), indexing="ij")
    return np.stack([t.ravel(), y.ravel(), x.ravel()], axis=1).astype(np.int64)


class VideoDecoder(nn.Module):
    def __init__(self, enc_width: int, width: int, depth: int, heads: int, volume_size: int):
        super().__init__()
        self.width = width
        self.inp = layers.Linear(enc_width, width)
        self.mask_token = nn.Parameter(torch.zeros(1, width))
        nx.uniform_fan_in_(self.mask_token)
        self.blocks = nn.ModuleList(layers.Block(width, heads) for _ in range(depth))
        self.norm = layers.LayerNorm(width)
        self.head = layers.Linear(width, volume_size)

    def forward(self, z_v: torch.Tensor, vis_coords: torch.Tensor | None, mask_coords: torch.Tensor):
        dtype = z_v.dtype
        visible = self.inp(z_v)
        if vis_coords is not None and len(vis_coords):
            visible = visible + layers.sinusoid_3d(vis_coords, self.width).to(dtype)
        masked = self.mask_token.expand(len(mask_coords), -1) + \
            layers.sinusoid_3d(mask_coords, self.width).to(dtype)
        x = torch.cat([visible, masked], dim=0)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x[visible.shape[0]:]))


@dataclass(frozen=True)
class MVReconConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_width: int | None = None  # default: half the encoder width
    decoder_depth: int = 2
    decoder_heads: int = 1
    scales: tuple[int, ...] = DEFAULT_SCALES
    tube_size: int = 16
    r: float = 0.1
    background_keep_prob: float = 0.0
    lr: float = 5e-4
    steps: int = 200
    seed: int = 0
    precision: str = "float32"

    @property
    def dec_width(self) -> int:
        return self.decoder_width or max(self.encoder.width // 2, 1)


class MVRecon(nn.Module):
    def __init__(self, cfg: MVReconConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.encoder = VideoEncoder(enc)
        self.decoder = VideoDecoder(enc.width, cfg.dec_width, cfg.decoder_depth, cfg.decoder_heads,
                                    enc.volume_size)


def encode_visible(encoder: VideoEncoder, partition: VolumePartition, video) -> torch.Tensor:
    """One latent per visible volume; a single placeholder latent when nothing is visible."""
    if partition.degenerate_visible:
        log.debug("DegenerateVisible: encoder sees only the placeholder")
        return encoder.encode_placeholder()
    video = torch.as_tensor(video)
    vols = extract_volumes(video, partition.volume)[torch.from_numpy(partition.visible)]
    coords = torch.from_numpy(partition.coords(partition.visible))
    return encoder(vols.to(encoder.embed.weight.dtype), coords)


def decode_masked(decoder: VideoDecoder, z_v: torch.Tensor, partition: VolumePartition) -> torch.Tensor:
    if partition.no_target:
        raise NoTarget("every volume is visible; nothing to reconstruct")
    vis_coords = None if partition.degenerate_visible else torch.from_numpy(partition.coords(partition.visible))
    return decoder(z_v, vis_coords, torch.from_numpy(partition.coords(partition.masked)))


def masked_targets(video, partition: VolumePartition) -> torch.Tensor:
    vols = extract_volumes(torch.as_tensor(video), partition.volume)
    return vols[torch.from_numpy(partition.masked)]


def recon_loss(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element of the masked volumes."""
    if target.shape != pred.shape:
        raise ShapeError(f"reconstruction {tuple(pred.shape)} does not match targets {tuple(target.shape)}")
    diff = pred - target
    return (diff * diff).mean()


def reconstruct(model: MVRecon, video, partition: VolumePartition):
    z_v = encode_visible(model.encoder, partition, video)
    pred = decode_masked(model.decoder, z_v, partition)
    target = masked_targets(video, partition).to(pred.dtype)
    return pred, recon_loss(target, pred)


def plan_seed(seed: int, step: int, clip: int) -> int:
    return (seed * 1_000_003 + step) * 10_007 + clip


def pretrain_mvrecon(videos, annotations, cfg: MVReconConfig, on_step=None):
    """Train encoder and decoder on freshly sampled mask plans.

    Returns ``(model, losses)``. Each step draws one tube duration from
    ``cfg.scales`` and averages the loss over all clips that have a target.
    """
    torch.manual_seed(cfg.seed)
    dtype = nx.resolve_dtype(cfg.precision)
    model = MVRecon(cfg).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    clips = [torch.as_tensor(np.asarray(v), dtype=dtype) for v in videos]
    losses = []
    for step in range(cfg.steps):
        k = sample_scale(cfg.scales, rng)
        spec = TubeSpec(k, cfg.tube_size, cfg.tube_size)
        total, used = None, 0
        for ci, (video, ann) in enumerate(zip(clips, annotations)):
            plan = make_mask_plan(video.shape, ann, spec, cfg.r, plan_seed(cfg.seed, step, ci),
                                  cfg.background_keep_prob)
            part = partition_volumes(video.shape, plan.hint, spec, cfg.encoder.volume)
            if part.no_target:
                continue
            _, loss = reconstruct(model, video, part)
            total = loss if total is None else total + loss
            used += 1
        if total is None:
            losses.append(0.0)
            continue
        loss = total / used
        value = loss.item()
        if not math.isfinite(value):
            raise Divergence("pretrain", step, value)
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_step is not None:
            on_step(step, value)
    return model, losses


def encoder_checkpoint(model: MVRecon, cfg: MVReconConfig, losses=None) -> container.Checkpoint:
    arrays = container.module_arrays(model.encoder, "encoder.")
    arrays.update(container.module_arrays(model.decoder, "decoder."))
    if losses is not None:
        arrays["log.loss"] = np.asarray(losses, dtype=np.float64)
    return container.Checkpoint("pretrain", arrays, {"mvrecon": _jsonable(asdict(cfg))})


def load_encoder(ckpt: container.Checkpoint, enc_cfg: EncoderConfig, dtype=torch.float32) -> VideoEncoder:
    encoder = VideoEncoder(enc_cfg)
    container.load_module_arrays(encoder, ckpt.subset("encoder."))
    return encoder.to(dtype)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
