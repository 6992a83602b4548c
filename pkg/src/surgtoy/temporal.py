"""Clip segmentation, temporal descriptors and LLM input assembly.

Three layouts are supported::

    direct      [H_1, ..., H_N, q]
    front       [S_global, H_1, ..., H_N, q]
    interleave  [S_1, H_1, S_2, H_2, ..., S_N, H_N, q]

where ``S_i`` states the time span of clip ``i`` and ``H_i`` are its visual tokens.
Clips are 0-based: clip 0 spans ``[0, t)`` seconds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import lexicon
from .errors import NonDivisible, ShapeError

STRATEGIES = ("direct", "front", "interleave")
DESCRIPTOR_TEMPLATE = "This is a video clip spanning from {start} to {end} seconds"
GLOBAL_TEMPLATE = "This is a video with {total} seconds"


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


@dataclass
class ClipSegment:
    index: int
    start_s: float
    end_s: float
    visual: torch.Tensor | None = None


def segment_video(frames, t: float, fps: int = 1) -> list[ClipSegment]:
    """Cut ``frames`` (a count or an array with frames first) into clips of ``t`` seconds."""
    frame_count = frames if isinstance(frames, int) else int(frames.shape[0])
    if t <= 0:
        raise ValueError("clip duration must be positive")
    per_clip = t * fps
    if per_clip != int(per_clip) or frame_count % int(per_clip):
        raise NonDivisible("time", frame_count, per_clip)
    clip_count = frame_count // int(per_clip)
    return [ClipSegment(i, i * t, (i + 1) * t) for i in range(clip_count)]


def descriptor_text(i: int, t: float) -> str:
    if t <= 0:
        raise ValueError("clip duration must be positive")
    if i < 0:
        raise ValueError("clip index must be non-negative")
    return DESCRIPTOR_TEMPLATE.format(start=_num(i * t), end=_num((i + 1) * t))


def render_descriptor(i: int, t: float) -> list[int]:
    return lexicon.encode(descriptor_text(i, t))


def global_text(clip_count: int, t: float) -> str:
    return GLOBAL_TEMPLATE.format(total=_num(clip_count * t))


@dataclass
class Block:
    kind: str  # "descriptor" | "visual" | "query"
    tokens: tuple[int, ...] = ()
    visual: torch.Tensor | None = None
    segment: int | None = None
    text: str = ""

    def __len__(self) -> int:
        return int(self.visual.shape[0]) if self.kind == "visual" else len(self.tokens)


@dataclass
class InterleavedSequence:
    strategy: str
    blocks: list[Block] = field(default_factory=list)

    def kinds(self) -> list[str]:
        return [b.kind for b in self.blocks]

    def token_count(self) -> int:
        return sum(len(b) for b in self.blocks)

    def text_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.kind != "visual"]

    def to_record(self) -> dict:
        out = []
        for b in self.blocks:
            if b.kind == "visual":
                arr = b.visual.detach().cpu().numpy()
                out.append({"kind": "visual", "segment": b.segment, "dtype": str(arr.dtype),
                            "shape": list(arr.shape), "data": arr.reshape(-1).tolist()})
            else:
                out.append({"kind": b.kind, "segment": b.segment, "text": b.text, "tokens": list(b.tokens)})
        return {"strategy": self.strategy, "blocks": out}

    def dumps(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_record(cls, record: dict) -> "InterleavedSequence":
        blocks = []
        for b in record["blocks"]:
            if b["kind"] == "visual":
                arr = np.asarray(b["data"], dtype=np.dtype(b["dtype"])).reshape(b["shape"])
                blocks.append(Block("visual", visual=torch.from_numpy(arr), segment=b["segment"]))
            else:
                blocks.append(Block(b["kind"], tuple(b["tokens"]), segment=b["segment"], text=b["text"]))
        return cls(record["strategy"], blocks)

    @classmethod
    def loads(cls, text: str) -> "InterleavedSequence":
        return cls.from_record(json.loads(text))


def assemble(strategy: str, segments: list[ClipSegment], query: str | list[int]) -> InterleavedSequence:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not segments:
        raise ShapeError("assemble needs at least one segment")
    if isinstance(query, str):
        query_text, query_tokens = query, lexicon.encode(query)
    else:
        query_text, query_tokens = lexicon.decode(query, stop_at_eos=False), list(query)
    if not query_tokens:
        raise ShapeError("empty query")
    t = segments[0].end_s - segments[0].start_s
    blocks: list[Block] = []
    if strategy == "front":
        text = global_text(len(segments), t)
        blocks.append(Block("descriptor", tuple(lexicon.encode(text)), text=text))
    for seg in segments:
        if seg.visual is None:
            raise ShapeError(f"segment {seg.index} has no visual tokens")
        if strategy == "interleave":
            text = descriptor_text(seg.index, seg.end_s - seg.start_s)
            blocks.append(Block("descriptor", tuple(lexicon.encode(text)), segment=seg.index, text=text))
        blocks.append(Block("visual", visual=seg.visual, segment=seg.index))
    blocks.append(Block("query", tuple(query_tokens), text=query_text))
    return InterleavedSequence(strategy, blocks)
