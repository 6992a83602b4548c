"""Video-text context alignment: shared embedding space with VTC, VTM and MLM objectives."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import container, layers, lexicon, numerics as nx
from .errors import DegenerateInput, Divergence, ShapeError

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 1e-3, 1.0


@dataclass(frozen=True)
class AlignConfig:
    text_width: int = 32
    text_depth: int = 2
    heads: int = 1
    embed_width: int = 32
    match_hidden: int = 32
    vocab_size: int = lexicon.VOCAB_SIZE
    max_len: int = 64
    tau_init: float = 0.07
    use_vtm: bool = True
    use_mlm: bool = True
    w_vtc: float = 1.0
    w_vtm: float = 1.0
    w_mlm: float = 1.0
    mlm_prob: float = 0.15
    lr: float = 1e-3
    weight_decay: float = 0.02
    batch_size: int = 8
    steps: int = 200
    train_encoder: bool = True
    freeze: bool = False
    seed: int = 0
    precision: str = "float32"


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, width: int, depth: int, heads: int, max_len: int):
        super().__init__()
        self.width = width
        self.max_len = max_len
        self.tokens = nn.Parameter(torch.empty(vocab_size, width))
        nx.uniform_fan_in_(self.tokens)
        self.blocks = nn.ModuleList(layers.Block(width, heads) for _ in range(depth))
        self.norm = layers.LayerNorm(width)

    def forward(self, ids: torch.Tensor, prefix: torch.Tensor | None = None) -> torch.Tensor:
        """``ids`` is ``(B, L)`` padded with PAD; ``prefix`` optional ``(B, width)``.

        Returns hidden states ``(B, L, width)`` for the token positions only.
        """
        b, length = ids.shape
        x = self.tokens[ids]
        keep = ids != lexicon.PAD_ID
        if prefix is not None:
            x = torch.cat([prefix[:, None, :], x], dim=1)
            keep = torch.cat([torch.ones(b, 1, dtype=torch.bool), keep], dim=1)
        if x.shape[1] > self.max_len:
            raise ShapeError(f"text length {x.shape[1]} exceeds {self.max_len}")
        x = x + layers.sinusoid(torch.arange(x.shape[1]), self.width).to(x.dtype)
        mask = keep[:, None, :]
        for block in self.blocks:
            x = block(x, mask=mask)
        x = self.norm(x)
        return x[:, 1:] if prefix is not None else x

    def pooled(self, ids: torch.Tensor) -> torch.Tensor:
        h = self(ids)
        keep = (ids != lexicon.PAD_ID).to(h.dtype)[..., None]
        return (h * keep).sum(1) / keep.sum(1).clamp(min=1.0)


class AlignHeads(nn.Module):
    def __init__(self, video_width: int, cfg: AlignConfig):
        super().__init__()
        self.text = TextEncoder(cfg.vocab_size, cfg.text_width, cfg.text_depth, cfg.heads, cfg.max_len)
        self.proj_v = layers.Linear(video_width, cfg.embed_width, bias=False)
        self.proj_t = layers.Linear(cfg.text_width, cfg.embed_width, bias=False)
        # learned in log space so optimizer steps are relative changes of tau
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        self.match = nn.Sequential(layers.Linear(2 * cfg.embed_width, cfg.match_hidden), nn.Tanh(),
                                   layers.Linear(cfg.match_hidden, 1))
        self.prefix = layers.Linear(cfg.embed_width, cfg.text_width)
        self.mlm_head = layers.Linear(cfg.text_width, cfg.vocab_size)

    def temperature(self) -> torch.Tensor:
        return torch.exp(self.log_tau.clamp(math.log(TAU_MIN), math.log(TAU_MAX)))


@dataclass
class AlignedBatch:
    f_v: torch.Tensor
    f_t: torch.Tensor
    tau: torch.Tensor

    def similarity(self) -> torch.Tensor:
        return nx.matmul(self.f_v, self.f_t.t())


def normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = torch.sqrt((x * x).sum(-1, keepdim=True))
    if bool((norms < eps).any()):
        raise DegenerateInput("zero-norm embedding cannot be normalized")
    return x / norms


def pad_ids(seqs: list[list[int]], length: int | None = None) -> torch.Tensor:
    length = length or max(len(s) for s in seqs)
    out = torch.full((len(seqs), length), lexicon.PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def project(video_pooled: torch.Tensor, text_pooled: torch.Tensor, heads: AlignHeads) -> AlignedBatch:
    return AlignedBatch(normalize(heads.proj_v(video_pooled)), normalize(heads.proj_t(text_pooled)),
                        heads.temperature())


def embed_pair(videos, captions: list[list[int]], video_encoder, heads: AlignHeads) -> AlignedBatch:
    """Mean-pool both encoders, project into the shared space, normalize rows."""
    if len(videos) != len(captions) or len(videos) < 2:
        raise ShapeError("embed_pair needs K >= 2 aligned videos and captions")
    dtype = heads.proj_v.weight.dtype
    pooled_v = torch.stack([video_encoder.encode_clip(torch.as_tensor(v, dtype=dtype)).mean(0) for v in videos])
    pooled_t = heads.text.pooled(pad_ids(captions))
    return project(pooled_v, pooled_t, heads)


def vtc_loss(batch: AlignedBatch) -> torch.Tensor:
    """Symmetric InfoNCE over ``similarity / tau`` with matching pairs on the diagonal."""
    tau = batch.tau
    if float(torch.as_tensor(tau).detach()) <= 0:
        raise ValueError("temperature must be positive")
    k = batch.f_v.shape[0]
    if k < 2:
        raise ShapeError("vtc_loss needs K >= 2")
    logits = batch.similarity() / tau
    diag = torch.diagonal(logits)
    v2t = torch.logsumexp(logits, dim=1) - diag
    t2v = torch.logsumexp(logits, dim=0) - diag
    return 0.5 * (v2t.mean() + t2v.mean())


def hardest_negatives(sim: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per video, the most similar non-matching text; per text, the most similar non-matching video."""
    k = sim.shape[0]
    off = sim.detach().clone()
    off[torch.arange(k), torch.arange(k)] = -math.inf
    return off.argmax(dim=1), off.argmax(dim=0)


def match_logits(batch: AlignedBatch, match_head: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits and 0/1 labels for K positives plus 2K hardest in-batch negatives."""
    k = batch.f_v.shape[0]
    neg_text, neg_video = hardest_negatives(batch.similarity())
    idx = torch.arange(k)
    v_rows = torch.cat([idx, idx, neg_video])
    t_rows = torch.cat([idx, neg_text, idx])
    pairs = torch.cat([batch.f_v[v_rows], batch.f_t[t_rows]], dim=1)
    labels = torch.cat([torch.ones(k), torch.zeros(2 * k)]).to(pairs.dtype)
    return match_head(pairs).squeeze(-1), labels


def binary_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    # softplus(-x) for positives, softplus(x) for negatives
    return (labels * nn.functional.softplus(-logits) + (1 - labels) * nn.functional.softplus(logits)).mean()


def vtm_loss(batch: AlignedBatch, match_head: nn.Module) -> torch.Tensor:
    if batch.f_v.shape[0] < 2:
        raise ShapeError("vtm_loss needs K >= 2")
    logits, labels = match_logits(batch, match_head)
    return binary_cross_entropy(logits, labels)


def mlm_masks(captions: list[list[int]], seed: int, prob: float = 0.15) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.random(len(c)) < prob for c in captions]


def mlm_loss(captions: list[list[int]], heads: AlignHeads, f_v: torch.Tensor | None = None,
             seed: int = 0, prob: float = 0.15, masks: list[np.ndarray] | None = None) -> torch.Tensor:
    """Cross-entropy on randomly masked caption tokens, conditioned on ``f_v`` through a prefix token."""
    if any(len(c) == 0 for c in captions):
        raise ShapeError("empty caption")
    masks = masks if masks is not None else mlm_masks(captions, seed, prob)
    dtype = heads.mlm_head.weight.dtype
    if not any(m.any() for m in masks):
        log.info("mlm: no positions masked, skipping")
        return torch.zeros((), dtype=dtype)
    ids = pad_ids(captions)
    target_mask = torch.zeros(ids.shape, dtype=torch.bool)
    for i, m in enumerate(masks):
        target_mask[i, :len(m)] = torch.from_numpy(m)
    inputs = ids.masked_fill(target_mask, lexicon.MASK_ID)
    prefix = heads.prefix(f_v) if f_v is not None else None
    hidden = heads.text(inputs, prefix=prefix)
    logits = heads.mlm_head(hidden[target_mask])
    targets = ids[target_mask]
    return (torch.logsumexp(logits, dim=-1) - logits.gather(1, targets[:, None]).squeeze(1)).mean()


def retrieval_accuracy(batch: AlignedBatch) -> tuple[float, float]:
    """Top-1 video->text and text->video accuracy over the batch."""
    sim = batch.similarity().detach()
    idx = torch.arange(sim.shape[0])
    v2t = float((sim.argmax(dim=1) == idx).to(torch.float64).mean())
    t2v = float((sim.argmax(dim=0) == idx).to(torch.float64).mean())
    return v2t, t2v


def alignment_loss(videos, captions, indices, encoder, heads: AlignHeads, cfg: AlignConfig):
    batch = embed_pair(videos, captions, encoder, heads)
    terms = {"vtc": vtc_loss(batch)}
    if cfg.use_vtm:
        terms["vtm"] = vtm_loss(batch, heads.match)
    if cfg.use_mlm:
        masks = [mlm_masks([c], cfg.seed * 1_000_003 + int(i), cfg.mlm_prob)[0] for c, i in zip(captions, indices)]
        terms["mlm"] = mlm_loss(captions, heads, batch.f_v, masks=masks)
    weights = {"vtc": cfg.w_vtc, "vtm": cfg.w_vtm, "mlm": cfg.w_mlm}
    total = sum(weights[k] * v for k, v in terms.items())
    return total, terms, batch


def align_train(videos, captions: list[list[int]], encoder, cfg: AlignConfig, on_step=None):
    """Optimize the weighted VTC + VTM + MLM objective. Returns ``(encoder, heads, losses)``.

    MLM mask positions are fixed per training pair, so a frozen run sees a constant loss.
    """
    if len(videos) < 2:
        raise ShapeError("alignment needs at least two pairs")
    torch.manual_seed(cfg.seed)
    dtype = nx.resolve_dtype(cfg.precision)
    encoder = encoder.to(dtype)
    heads = AlignHeads(encoder.cfg.width, cfg).to(dtype)
    params = list(heads.parameters()) + (list(encoder.parameters()) if cfg.train_encoder else [])
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(videos)
    k = min(cfg.batch_size, n)
    order, cursor = rng.permutation(n), 0
    losses = []
    for step in range(cfg.steps):
        if k == n:
            idx = np.arange(n)
        else:
            if cursor + k > n:
                order, cursor = rng.permutation(n), 0
            idx = np.sort(order[cursor:cursor + k])
            cursor += k
        total, _, _ = alignment_loss([videos[i] for i in idx], [captions[i] for i in idx], idx,
                                     encoder, heads, cfg)
        value = total.item()
        if not math.isfinite(value):
            raise Divergence("align", step, value)
        losses.append(value)
        if not cfg.freeze:
            opt.zero_grad()
            total.backward()
            opt.step()
        if on_step is not None:
            on_step(step, value)
    return encoder, heads, losses


def align_checkpoint(encoder, heads: AlignHeads, cfg: AlignConfig, losses=None) -> container.Checkpoint:
    arrays = container.module_arrays(encoder, "encoder.")
    arrays.update(container.module_arrays(heads, "align."))
    if losses is not None:
        arrays["log.loss"] = np.asarray(losses, dtype=np.float64)
    return container.Checkpoint("align", arrays, {"align": asdict(cfg)})
