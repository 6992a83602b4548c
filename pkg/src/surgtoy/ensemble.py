"""Task-routed adapter ensemble over a tiny causal language model.

Per task ``g`` the ensemble owns a bank of Q-Former memory tokens and a set of
low-rank deltas on the LM's attention (query, value) and feed-forward
projections. A linear router over the pooled text embedding of the input
picks ``g``; the LM then decodes greedily with ``W_0 + delta_g`` active.

Task ids are 1-based, in :data:`TASKS` order.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import container, layers, lexicon, numerics as nx
from .errors import Divergence, SequenceOverflow, ShapeError
from .synthgen import TASK_KINDS
from .temporal import ClipSegment, InterleavedSequence, assemble, segment_video

log = logging.getLogger(__name__)

TASKS = TASK_KINDS
CAPTION_QUERY = "describe the scene in the video."
VISUAL_SLOT = -1  # token-id stand-in for a zero visual embedding during LM pretraining


def task_id(kind: str) -> int:
    return TASKS.index(kind) + 1


@dataclass(frozen=True)
class EnsembleConfig:
    enc_width: int = 32
    lm_width: int = 64
    lm_depth: int = 2
    lm_heads: int = 1
    lm_max_len: int = 512
    qformer_width: int = 32
    qformer_heads: int = 1
    memory_tokens: int = 8
    n_tasks: int = len(TASKS)
    shared_qformer: bool = False
    lora_rank: int = 8
    lora_alpha: float = 8.0
    vocab_size: int = lexicon.VOCAB_SIZE


@dataclass
class LoRADelta:
    name: str
    A: torch.Tensor  # (rank, d_in)
    B: torch.Tensor  # (d_out, rank)
    rank: int = 8
    alpha: float = 8.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def materialize(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


def lora_apply(weight: torch.Tensor, delta: LoRADelta | None, x: torch.Tensor,
               bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x W_0^T (+ bias) + (alpha/rank) (x A^T) B^T``; rows of ``x`` are inputs."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    out = x @ weight.t()
    if bias is not None:
        out = out + bias
    if delta is None:
        return out
    if delta.A.shape != (delta.rank, weight.shape[1]) or delta.B.shape != (weight.shape[0], delta.rank):
        raise ShapeError(f"delta {delta.name} shapes {tuple(delta.A.shape)}/{tuple(delta.B.shape)} "
                         f"do not fit weight {tuple(weight.shape)}")
    return out + delta.scale * ((x @ delta.A.t()) @ delta.B.t())


class LoRALinear(nn.Module):
    """Frozen-base linear layer with one swappable low-rank delta per task."""

    def __init__(self, d_in: int, d_out: int, n_tasks: int, rank: int, alpha: float):
        super().__init__()
        self.base = layers.Linear(d_in, d_out)
        self.rank, self.alpha = rank, alpha
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for g in range(1, n_tasks + 1):
            a = nn.Parameter(torch.empty(rank, d_in))
            nx.uniform_fan_in_(a)
            self.A[str(g)] = a
            self.B[str(g)] = nn.Parameter(torch.zeros(d_out, rank))
        self.active: int | None = None

    def delta(self, g: int) -> LoRADelta:
        return LoRADelta("", self.A[str(g)], self.B[str(g)], self.rank, self.alpha)

    def forward(self, x):
        delta = self.delta(self.active) if self.active is not None else None
        return lora_apply(self.base.weight, delta, x, self.base.bias)


class LMBlock(nn.Module):
    def __init__(self, cfg: EnsembleConfig):
        super().__init__()
        d, g, r, a = cfg.lm_width, cfg.n_tasks, cfg.lora_rank, cfg.lora_alpha
        self.heads = cfg.lm_heads
        self.ln1 = layers.LayerNorm(d)
        self.q = LoRALinear(d, d, g, r, a)
        self.k = layers.Linear(d, d)
        self.v = LoRALinear(d, d, g, r, a)
        self.o = layers.Linear(d, d)
        self.ln2 = layers.LayerNorm(d)
        self.fc1 = LoRALinear(d, 2 * d, g, r, a)
        self.fc2 = LoRALinear(2 * d, d, g, r, a)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.o(nx.cross_attention(self.q(h), self.k(h), self.v(h), self.heads, mask))
        return x + self.fc2(nx.gelu(self.fc1(self.ln2(x))))


class ToyLM(nn.Module):
    def __init__(self, cfg: EnsembleConfig):
        super().__init__()
        self.cfg = cfg
        self.tokens = nn.Parameter(torch.empty(cfg.vocab_size, cfg.lm_width))
        nx.uniform_fan_in_(self.tokens)
        self.blocks = nn.ModuleList(LMBlock(cfg) for _ in range(cfg.lm_depth))
        self.norm = layers.LayerNorm(cfg.lm_width)
        self.head = layers.Linear(cfg.lm_width, cfg.vocab_size)

    def lora_layers(self) -> dict[str, LoRALinear]:
        return {name: m for name, m in self.named_modules() if isinstance(m, LoRALinear)}

    def set_task(self, g: int | None):
        for m in self.lora_layers().values():
            m.active = g

    def embed(self, ids) -> torch.Tensor:
        return self.tokens[torch.as_tensor(ids, dtype=torch.long)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Causal LM over input embeddings ``(B, L, D)``; returns logits ``(B, L, V)``."""
        length = x.shape[-2]
        if length > self.cfg.lm_max_len:
            raise SequenceOverflow(f"sequence of {length} exceeds {self.cfg.lm_max_len}")
        x = x + layers.sinusoid(torch.arange(length), self.cfg.lm_width).to(x.dtype)
        mask = torch.ones(length, length, dtype=torch.bool).tril()
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.norm(x))


class QFormer(nn.Module):
    """Memory tokens read the question, then the visual features, then map to LM width."""

    def __init__(self, cfg: EnsembleConfig):
        super().__init__()
        c = cfg.qformer_width
        self.width = c
        banks = ["shared"] if cfg.shared_qformer else [str(g) for g in range(1, cfg.n_tasks + 1)]
        self.memories = nn.ParameterDict()
        for name in banks + ["caption"]:
            mem = nn.Parameter(torch.empty(cfg.memory_tokens, c))
            nx.uniform_fan_in_(mem)
            self.memories[name] = mem
        self.shared = cfg.shared_qformer
        self.tokens = nn.Parameter(torch.empty(cfg.vocab_size, c))
        nx.uniform_fan_in_(self.tokens)
        self.ln_q = layers.LayerNorm(c)
        self.attn_q = layers.Attention(c, cfg.qformer_heads)
        self.ln_v = layers.LayerNorm(c)
        self.attn_v = layers.Attention(c, cfg.qformer_heads, kv_width=cfg.enc_width)
        self.out = layers.Linear(c, cfg.lm_width)
        # zero output map: before tuning the LM sees exactly the zero visual slots it was pretrained with
        with torch.no_grad():
            self.out.weight.zero_()

    def bank(self, g: int | str) -> str:
        if g in (0, "caption"):
            return "caption"
        return "shared" if self.shared else str(g)

    def memory(self, g) -> torch.Tensor:
        return self.memories[self.bank(g)]

    def read_query(self, memory: torch.Tensor, q_ids: torch.Tensor) -> torch.Tensor:
        """Stage 1: memories ``(m, C)`` attend to question tokens ``(B, Lq)``; returns ``(B, m, C)``."""
        q = self.tokens[q_ids] + layers.sinusoid(torch.arange(q_ids.shape[-1]), self.width).to(memory.dtype)
        keep = (q_ids != lexicon.PAD_ID)[:, None, :]
        x = memory.expand(q_ids.shape[0], -1, -1)
        return x + self.attn_q(self.ln_q(x), context=q, mask=keep)

    def read_visual(self, x: torch.Tensor, z_v: torch.Tensor) -> torch.Tensor:
        """Stage-2 attention output alone (no residual): ``x`` attends to ``z_v``."""
        return self.attn_v(self.ln_v(x), context=z_v)

    def forward(self, g, q_ids: torch.Tensor, z_v: torch.Tensor) -> torch.Tensor:
        """``z_v`` is ``(B, S, Nz, enc_width)``; returns ``(B, S, m, lm_width)``."""
        if z_v.shape[-1] != self.attn_v.k.weight.shape[1]:
            raise ShapeError(f"visual width {z_v.shape[-1]} does not match the Q-Former")
        if z_v.shape[-2] == 0:
            raise ShapeError("no visual features")
        x = self.read_query(self.memory(g), q_ids)            # (B, m, C)
        x = x[:, None].expand(-1, z_v.shape[1], -1, -1)       # (B, S, m, C)
        x = x + self.read_visual(x, z_v)
        return self.out(x)


class Router(nn.Module):
    def __init__(self, width: int, n_tasks: int):
        super().__init__()
        self.linear = layers.Linear(width, n_tasks)

    def forward(self, pooled):
        return self.linear(pooled)


def argmax_task(logits) -> int:
    """1-based argmax; ties go to the lowest task id."""
    return int(np.argmax(np.asarray(torch.as_tensor(logits).detach().cpu()))) + 1


class SurgicalEnsemble(nn.Module):
    def __init__(self, cfg: EnsembleConfig):
        super().__init__()
        self.cfg = cfg
        self.qformer = QFormer(cfg)
        self.lm = ToyLM(cfg)
        self.router = Router(cfg.lm_width, cfg.n_tasks)

    # -- sequence construction --------------------------------------------

    def visual_tokens(self, g, q_ids: list[int], z_segments: torch.Tensor) -> torch.Tensor:
        """``(S, m, lm_width)`` visual blocks for one item."""
        q = torch.as_tensor([q_ids], dtype=torch.long)
        return self.qformer(g, q, z_segments[None])[0]

    def build(self, strategy: str, g, q_ids: list[int], z_segments: torch.Tensor, t: float) -> InterleavedSequence:
        visual = self.visual_tokens(g, q_ids, z_segments)
        segments = [ClipSegment(i, i * t, (i + 1) * t, visual[i]) for i in range(visual.shape[0])]
        return assemble(strategy, segments, q_ids)

    def embed(self, seq: InterleavedSequence) -> torch.Tensor:
        parts = [b.visual if b.kind == "visual" else self.lm.embed(b.tokens) for b in seq.blocks]
        dtype = self.lm.tokens.dtype
        return torch.cat([p.to(dtype) for p in parts], dim=0)

    # -- routing ------------------------------------------------------------

    def route_logits(self, seq: InterleavedSequence) -> torch.Tensor:
        return self.router(pool_text(self, seq))

    def route(self, seq: InterleavedSequence) -> int:
        return argmax_task(self.route_logits(seq))

    # -- generation -----------------------------------------------------------

    @torch.no_grad()
    def generate(self, seq: InterleavedSequence, g: int | None, max_new: int = 12) -> list[int]:
        """Greedy decode after ``<ans>`` with task ``g``'s deltas active (None: base weights)."""
        if g is not None and not 1 <= g <= self.cfg.n_tasks:
            raise ValueError(f"task id {g} outside 1..{self.cfg.n_tasks}")
        prev = [m.active for m in self.lm.lora_layers().values()]
        self.lm.set_task(g)
        try:
            x = torch.cat([self.embed(seq), self.lm.embed([lexicon.ANS_ID])], dim=0)
            out: list[int] = []
            for _ in range(max_new):
                logits = self.lm(x[None])[0, -1]
                nxt = int(torch.argmax(logits))
                if nxt == lexicon.EOS_ID:
                    break
                out.append(nxt)
                x = torch.cat([x, self.lm.embed([nxt])], dim=0)
            return out
        finally:
            for m, a in zip(self.lm.lora_layers().values(), prev):
                m.active = a

    def respond(self, z_segments: torch.Tensor, question: str, strategy: str, t: float,
                max_new: int = 12) -> tuple[int, str]:
        """Route on the text-only layout, rebuild with the chosen memory, then decode."""
        q_ids = lexicon.encode(question)
        g = self.route(text_layout(strategy, z_segments.shape[0], t, q_ids))
        seq = self.build(strategy, g, q_ids, z_segments, t)
        return g, lexicon.decode(self.generate(seq, g, max_new))

    # -- parameter groups ----------------------------------------------------

    def task_parameters(self, g: int) -> list[nn.Parameter]:
        params = [self.qformer.memory(g)]
        for m in self.lm.lora_layers().values():
            params += [m.A[str(g)], m.B[str(g)]]
        return params


def pool_text(ens: SurgicalEnsemble, seq: InterleavedSequence) -> torch.Tensor:
    """Mean base-LM token embedding over every text token of ``seq``."""
    ids = [tok for b in seq.text_blocks() for tok in b.tokens]
    if not ids:
        raise ShapeError("cannot route an empty sequence")
    return ens.lm.embed(ids).mean(0)


def text_layout(strategy: str, clip_count: int, t: float, q_ids: list[int]) -> InterleavedSequence:
    """The layout with empty visual blocks, for routing before any memory is chosen."""
    empty = torch.zeros(0, 1)
    segs = [ClipSegment(i, i * t, (i + 1) * t, empty) for i in range(clip_count)]
    return assemble(strategy, segs, q_ids)


# --- checkpoint naming ---------------------------------------------------------

_LORA_RE = re.compile(r"^lm\.(.+)\.(A|B)\.(\d+)$")
_QMEM_RE = re.compile(r"^qformer\.memories\.(\w+)$")
_LORA_OUT = re.compile(r"^task(\d+)\.lora\.(.+)\.(A|B)$")
_QMEM_OUT = re.compile(r"^task(\d+)\.qmem$|^(caption|shared)\.qmem$")


def export_name(key: str) -> str:
    m = _LORA_RE.match(key)
    if m:
        return f"task{m.group(3)}.lora.{m.group(1)}.{m.group(2)}"
    m = _QMEM_RE.match(key)
    if m:
        bank = m.group(1)
        return f"task{bank}.qmem" if bank.isdigit() else f"{bank}.qmem"
    return key


def import_name(name: str) -> str:
    m = _LORA_OUT.match(name)
    if m:
        return f"lm.{m.group(2)}.{m.group(3)}.{m.group(1)}"
    m = _QMEM_OUT.match(name)
    if m:
        return f"qformer.memories.{m.group(1) or m.group(2)}"
    return name


def ensemble_arrays(ens: SurgicalEnsemble) -> dict[str, np.ndarray]:
    return {export_name(k): v.detach().cpu().numpy().copy() for k, v in ens.state_dict().items()}


def load_ensemble_arrays(ens: SurgicalEnsemble, arrays: dict[str, np.ndarray]) -> SurgicalEnsemble:
    keys = set(ens.state_dict())
    state = {import_name(k): torch.from_numpy(np.array(v)) for k, v in arrays.items() if import_name(k) in keys}
    ens.load_state_dict(state, strict=True)
    return ens


# --- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TuneConfig:
    lm_steps: int = 300
    lm_lr: float = 3e-3
    caption_steps: int = 200
    caption_lr: float = 1e-3
    caption_weight_decay: float = 0.05
    task_steps: int = 300
    task_lr: float = 3e-3
    router_steps: int = 1000
    router_lr: float = 0.1
    batch_size: int = 16
    strategy: str = "interleave"
    clip_seconds: float = 4.0
    seed: int = 0


@dataclass
class Item:
    """One training/eval example: per-segment encoder latents plus question and answer ids."""
    z: torch.Tensor  # (S, Nz, enc_width)
    question: list[int]
    answer: list[int]
    kind: str = "caption"
    clip_id: str = ""


def segment_latents(encoder, video, t: float, fps: int = 1) -> torch.Tensor:
    """Encode each ``t``-second clip separately; returns ``(S, Nz, width)``."""
    video = torch.as_tensor(np.asarray(video), dtype=encoder.embed.weight.dtype)
    segs = segment_video(video, t, fps)
    per = int(t * fps)
    with torch.no_grad():
        return torch.stack([encoder.encode_clip(video[s.index * per:(s.index + 1) * per]) for s in segs])


def _batch_inputs(ens: SurgicalEnsemble, items: list[Item], g, strategy: str, t: float):
    """Padded embeddings, next-token targets and loss mask for teacher forcing."""
    dtype = ens.lm.tokens.dtype
    q = torch.full((len(items), max(len(it.question) for it in items)), lexicon.PAD_ID, dtype=torch.long)
    for i, it in enumerate(items):
        q[i, :len(it.question)] = torch.as_tensor(it.question)
    visual = ens.qformer(g, q, torch.stack([it.z for it in items]).to(dtype))
    rows, targets, weights = [], [], []
    for i, it in enumerate(items):
        segs = [ClipSegment(s, s * t, (s + 1) * t, visual[i, s]) for s in range(visual.shape[1])]
        prompt = ens.embed(assemble(strategy, segs, it.question))
        tail = [lexicon.ANS_ID] + list(it.answer)
        x = torch.cat([prompt, ens.lm.embed(tail)], dim=0)
        tgt = torch.full((x.shape[0],), lexicon.PAD_ID, dtype=torch.long)
        n_prompt = prompt.shape[0]
        # position n_prompt holds <ans>; it predicts answer[0], ..., last answer token predicts <eos>
        tgt[n_prompt:n_prompt + len(it.answer) + 1] = torch.as_tensor(list(it.answer) + [lexicon.EOS_ID])
        rows.append(x)
        targets.append(tgt)
    length = max(r.shape[0] for r in rows)
    x = torch.zeros(len(rows), length, rows[0].shape[1], dtype=dtype)
    y = torch.full((len(rows), length), lexicon.PAD_ID, dtype=torch.long)
    for i, (r, tg) in enumerate(zip(rows, targets)):
        x[i, :r.shape[0]] = r
        y[i, :tg.shape[0]] = tg
    return x, y


def token_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    keep = targets != lexicon.PAD_ID
    sel = logits[keep]
    tgt = targets[keep]
    return (torch.logsumexp(sel, dim=-1) - sel.gather(1, tgt[:, None]).squeeze(1)).mean()


def answer_loss(ens: SurgicalEnsemble, items: list[Item], g, strategy: str, t: float) -> torch.Tensor:
    x, y = _batch_inputs(ens, items, g, strategy, t)
    return token_loss(ens.lm(x), y)


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, size):
            yield np.sort(order[i:i + size])


def _optimize(params, loss_fn, steps: int, lr: float, stage: str, weight_decay: float = 0.0):
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    losses = []
    for step in range(steps):
        loss = loss_fn(step)
        value = loss.item()
        if not math.isfinite(value):
            raise Divergence(stage, step, value)
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return losses


def _frozen(ens: SurgicalEnsemble, trainable):
    ids = {id(p) for p in trainable}
    for p in ens.parameters():
        p.requires_grad_(id(p) in ids)


def prompt_ids(strategy: str, clip_count: int, t: float, q_ids: list[int], answer_ids: list[int],
               slots: int) -> list[int]:
    """A prompt plus answer with each visual block replaced by ``slots`` :data:`VISUAL_SLOT` ids."""
    layout = text_layout(strategy, clip_count, t, q_ids)
    ids = []
    for b in layout.blocks:
        ids += [VISUAL_SLOT] * slots if b.kind == "visual" else list(b.tokens)
    return ids + [lexicon.ANS_ID] + list(answer_ids) + [lexicon.EOS_ID]


def pretrain_lm(ens: SurgicalEnsemble, texts: list, cfg: TuneConfig) -> list[float]:
    """Next-token training of the base LM weights (no adapters).

    ``texts`` holds plain strings, wrapped as ``<bos> text <eos>``, or ready token-id lists.
    """
    lm = ens.lm
    lm.set_task(None)
    base = [p for n, p in lm.named_parameters() if not _LORA_RE.match("lm." + n)]
    _frozen(ens, base)
    seqs = [[lexicon.BOS_ID] + lexicon.encode(s) + [lexicon.EOS_ID] if isinstance(s, str) else list(s)
            for s in texts]
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(seqs), cfg.batch_size, rng)

    def loss_fn(step):
        idx = next(batches)
        chunk = [seqs[i] for i in idx]
        length = max(len(s) for s in chunk)
        ids = torch.full((len(chunk), length), lexicon.PAD_ID, dtype=torch.long)
        for i, s in enumerate(chunk):
            ids[i, :len(s)] = torch.as_tensor(s)
        targets = torch.full_like(ids, lexicon.PAD_ID)
        targets[:, :-1] = ids[:, 1:]
        targets[targets == VISUAL_SLOT] = lexicon.PAD_ID
        slot = (ids == VISUAL_SLOT)[..., None]
        x = lm.embed(ids.clamp(min=0)).masked_fill(slot, 0.0)
        return token_loss(lm(x), targets)

    return _optimize(base, loss_fn, cfg.lm_steps, cfg.lm_lr, "lm")


def tune_captions(ens: SurgicalEnsemble, items: list[Item], cfg: TuneConfig) -> list[float]:
    """Full Q-Former tuning (shared weights plus caption memory) with the LM frozen."""
    ens.lm.set_task(None)
    qf = ens.qformer
    params = [p for n, p in qf.named_parameters() if not n.startswith("memories.")] + [qf.memory("caption")]
    _frozen(ens, params)
    rng = np.random.default_rng(cfg.seed + 1)
    batches = _batches(len(items), cfg.batch_size, rng)
    return _optimize(params, lambda s: answer_loss(ens, [items[i] for i in next(batches)], "caption",
                                                   cfg.strategy, cfg.clip_seconds),
                     cfg.caption_steps, cfg.caption_lr, "tune-captions", cfg.caption_weight_decay)


def seed_task_memories(ens: SurgicalEnsemble):
    """Copy the caption memory into every task bank before per-task tuning."""
    with torch.no_grad():
        for name, mem in ens.qformer.memories.items():
            if name != "caption":
                mem.copy_(ens.qformer.memories["caption"])


def tune_task(ens: SurgicalEnsemble, g: int, items: list[Item], cfg: TuneConfig,
              steps: int | None = None) -> list[float]:
    """Train only task ``g``'s memory bank and low-rank deltas."""
    if not items:
        raise ShapeError(f"no training items for task {g}")
    params = ens.task_parameters(g)
    _frozen(ens, params)
    ens.lm.set_task(g)
    rng = np.random.default_rng(cfg.seed * 31 + g)
    batches = _batches(len(items), cfg.batch_size, rng)
    try:
        return _optimize(params, lambda s: answer_loss(ens, [items[i] for i in next(batches)], g,
                                                       cfg.strategy, cfg.clip_seconds),
                         cfg.task_steps if steps is None else steps, cfg.task_lr, f"tune-task{g}")
    finally:
        ens.lm.set_task(None)


def train_router(ens: SurgicalEnsemble, layouts: list[InterleavedSequence], labels: list[int],
                 cfg: TuneConfig) -> list[float]:
    params = list(ens.router.parameters())
    _frozen(ens, params)
    with torch.no_grad():
        pooled = torch.stack([pool_text(ens, s) for s in layouts])
    target = torch.as_tensor(labels, dtype=torch.long) - 1

    def loss_fn(step):
        logits = ens.router(pooled)
        return (torch.logsumexp(logits, 1) - logits.gather(1, target[:, None]).squeeze(1)).mean()

    return _optimize(params, loss_fn, cfg.router_steps, cfg.router_lr, "route-train")


def ensemble_checkpoint(ens: SurgicalEnsemble, stage: str, extra_config: dict | None = None) -> container.Checkpoint:
    config = {"ensemble": asdict(ens.cfg)}
    config.update(extra_config or {})
    return container.Checkpoint(stage, ensemble_arrays(ens), config)


def load_ensemble(ckpt: container.Checkpoint, dtype=torch.float32) -> SurgicalEnsemble:
    cfg = EnsembleConfig(**ckpt.config["ensemble"])
    ens = SurgicalEnsemble(cfg)
    load_ensemble_arrays(ens, ckpt.arrays)
    return ens.to(dtype)
