"""Deterministic toy surgical clips with box, phase, triplet and event ground truth.

Each clip is a static textured background with bright rectangular instruments
sliding across it. Instrument ``slot`` 0 is the one named in the triplet; every
slot is visible only inside its own event interval. Captions and QA pairs are
filled from fixed templates, so every answer can be recomputed from the
annotation alone.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container, lexicon
from .errors import NonDivisible, UnsupportedTask

log = logging.getLogger(__name__)

TASK_KINDS = ("phase", "triplet", "location", "relation", "movement", "duration", "time_spot")
GENERAL_TASKS = TASK_KINDS[:5]
TEMPORAL_TASKS = TASK_KINDS[5:]

BACKGROUND_MAX = 0.45
INSTRUMENT_MIN = 0.7
INSTRUMENT_THRESHOLD = 0.6

# instrument -> (box width, box height) in pixels
INSTRUMENT_SHAPES = {
    "grasper": (6, 6),
    "bipolar": (4, 8),
    "hook": (8, 4),
    "scissors": (5, 7),
    "clipper": (7, 5),
    "irrigator": (3, 9),
}
VELOCITIES = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "static": (0, 0)}


@dataclass(frozen=True)
class ClipConfig:
    frames: int = 64
    height: int = 32
    width: int = 32
    channels: int = 1
    n_instruments: int = 1
    max_tube_frames: int = 16
    tube_height: int = 16
    tube_width: int = 16
    event_quantum: int = 4
    contrast_margin: float = 0.25

    def validate(self):
        if self.frames % self.max_tube_frames:
            raise NonDivisible("time", self.frames, self.max_tube_frames)
        if self.height % self.tube_height:
            raise NonDivisible("height", self.height, self.tube_height)
        if self.width % self.tube_width:
            raise NonDivisible("width", self.width, self.tube_width)
        if self.frames % self.event_quantum:
            raise NonDivisible("time", self.frames, self.event_quantum)
        if self.n_instruments < 0 or self.channels < 1:
            raise ValueError("n_instruments must be >= 0 and channels >= 1")
        longest = max(max(s) for s in INSTRUMENT_SHAPES.values())
        if self.height <= longest or self.width <= longest:
            raise ValueError(f"frames must be larger than {longest} px")


@dataclass(frozen=True)
class Box:
    slot: int
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0


@dataclass
class ClipAnnotation:
    clip_id: str
    frames: int
    height: int
    width: int
    phase: str
    triplet: tuple[str, str, str]
    instruments: list[str]
    events: list[tuple[int, int]]
    boxes: list[list[Box]]
    fps: int = 1

    def slot_boxes(self, slot: int) -> list[tuple[int, Box]]:
        return [(f, b) for f, frame in enumerate(self.boxes) for b in frame if b.slot == slot]

    def to_json(self) -> dict:
        d = asdict(self)
        d["triplet"] = list(self.triplet)
        d["events"] = [list(e) for e in self.events]
        d["boxes"] = [[[b.slot, b.x0, b.y0, b.x1, b.y1] for b in frame] for frame in self.boxes]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ClipAnnotation":
        d = dict(d)
        d["triplet"] = tuple(d["triplet"])
        d["events"] = [tuple(e) for e in d["events"]]
        d["boxes"] = [[Box(*b) for b in frame] for frame in d["boxes"]]
        return cls(**d)


@dataclass(frozen=True)
class CaptionRecord:
    clip_id: str
    short: str
    long: str


@dataclass(frozen=True)
class QARecord:
    kind: str
    question: str
    answer: str
    clip_id: str


def _phase_label(name: str) -> str:
    return name.upper()


def generate_clip(seed: int, config: ClipConfig = ClipConfig(), clip_id: str | None = None):
    """Render one clip. Returns ``(video, annotation)``; video is float32 ``(N, H, W, C)`` in [0, 1]."""
    config.validate()
    rng = np.random.default_rng(seed)
    n, h, w, c = config.frames, config.height, config.width, config.channels

    phase_idx = int(rng.integers(len(lexicon.PHASES)))
    instrument = lexicon.INSTRUMENTS[int(rng.integers(len(lexicon.INSTRUMENTS)))]
    action = lexicon.ACTIONS[int(rng.integers(len(lexicon.ACTIONS)))]
    target_idx = int(rng.integers(len(lexicon.TARGETS)))
    target = lexicon.TARGETS[target_idx]

    # background: level from target, stripe texture from phase, fixed per-pixel grain
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    level = 0.14 + 0.02 * target_idx
    angle = math.pi * phase_idx / len(lexicon.PHASES)
    freq = 2 * math.pi * (2 + phase_idx) / max(h, w)
    texture = 0.07 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    grain = 0.04 * rng.random((h, w))
    background = np.clip(level + texture + grain, 0.02, BACKGROUND_MAX)
    tint = np.linspace(1.0, 0.8, c) if c > 1 else np.ones(1)
    frame_bg = background[:, :, None] * tint[None, None, :]
    video = np.repeat(frame_bg[None], n, axis=0).astype(np.float64)

    instruments = [instrument] + [
        lexicon.INSTRUMENTS[int(rng.integers(len(lexicon.INSTRUMENTS)))]
        for _ in range(config.n_instruments - 1)
    ]
    instruments = instruments[:config.n_instruments]
    q = config.event_quantum
    slots_q = n // q
    events = []
    boxes: list[list[Box]] = [[] for _ in range(n)]
    for slot, name in enumerate(instruments):
        start_q = int(rng.integers(slots_q))
        end_q = int(rng.integers(start_q + 1, slots_q + 1))
        start, end = start_q * q, end_q * q
        events.append((start, end))
        bw, bh = INSTRUMENT_SHAPES[name]
        vx, vy = VELOCITIES[lexicon.MOVEMENTS[int(rng.integers(len(lexicon.MOVEMENTS)))]]
        travel = end - start - 1
        x_lo, x_hi = max(0, -vx * travel), min(w - bw, w - bw - vx * travel)
        y_lo, y_hi = max(0, -vy * travel), min(h - bh, h - bh - vy * travel)
        if x_hi < x_lo or y_hi < y_lo:
            # path longer than the frame: pin the instrument in place
            vx = vy = 0
            x_lo, x_hi, y_lo, y_hi = 0, w - bw, 0, h - bh
        x0 = int(rng.integers(x_lo, x_hi + 1))
        y0 = int(rng.integers(y_lo, y_hi + 1))
        brightness = 0.8 + 0.02 * lexicon.ACTIONS.index(action) if slot == 0 else 0.85
        shade = 1.0 - 0.1 * (np.arange(bw) / max(bw - 1, 1))
        for f in range(start, end):
            bx, by = x0 + vx * (f - start), y0 + vy * (f - start)
            video[f, by:by + bh, bx:bx + bw, :] = (brightness * shade)[None, :, None]
            boxes[f].append(Box(slot, bx, by, bx + bw, by + bh))

    annotation = ClipAnnotation(
        clip_id=clip_id if clip_id is not None else f"clip{seed}",
        frames=n, height=h, width=w,
        phase=_phase_label(lexicon.PHASES[phase_idx]),
        triplet=(instrument, action, target),
        instruments=instruments,
        events=events,
        boxes=boxes,
    )
    return video.astype(np.float32), annotation


def instrument_pixels(video: np.ndarray) -> np.ndarray:
    """Boolean ``(N, H, W)`` map of instrument-coloured pixels."""
    return video.mean(axis=-1) >= INSTRUMENT_THRESHOLD


# --- derived attributes -------------------------------------------------------

def location_of(annotation: ClipAnnotation, slot: int = 0) -> str | None:
    seen = annotation.slot_boxes(slot)
    if not seen:
        return None
    cx, cy = seen[0][1].centroid
    col = min(int(cx * 3 // annotation.width), 2)
    row = min(int(cy * 3 // annotation.height), 2)
    return f"{lexicon.ROWS[row]}-{lexicon.COLS[col]}"


def movement_of(annotation: ClipAnnotation, slot: int = 0) -> str | None:
    seen = annotation.slot_boxes(slot)
    if not seen:
        return None
    (x_a, y_a), (x_b, y_b) = seen[0][1].centroid, seen[-1][1].centroid
    dx, dy = x_b - x_a, y_b - y_a
    if max(abs(dx), abs(dy)) < 1:
        return "static"
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


def relation_of(annotation: ClipAnnotation) -> str | None:
    """Where slot 0 sits relative to slot 1, from mean centroids over visible frames."""
    a, b = annotation.slot_boxes(0), annotation.slot_boxes(1)
    if not a or not b:
        return None
    ax = np.mean([bx.centroid[0] for _, bx in a]); ay = np.mean([bx.centroid[1] for _, bx in a])
    bx_ = np.mean([bx.centroid[0] for _, bx in b]); by = np.mean([bx.centroid[1] for _, bx in b])
    dx, dy = ax - bx_, ay - by
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "below" if dy > 0 else "above"


# --- text ---------------------------------------------------------------------

SHORT_TEMPLATE = "the {instrument} is used to {action} the {target} in phase {phase}."
LONG_VISIBLE = " the {instrument} is in the {location} of the view and moves {movement}." \
               " it is visible from {start} to {end} seconds."
LONG_HIDDEN = " the {instrument} is not visible."


def make_captions(annotation: ClipAnnotation) -> CaptionRecord:
    if annotation.frames < 4:
        raise ValueError("captions need at least 4 frames")
    instrument, action, target = annotation.triplet
    short = SHORT_TEMPLATE.format(instrument=instrument, action=action, target=target, phase=annotation.phase)
    location = location_of(annotation)
    if location is None:
        tail = LONG_HIDDEN.format(instrument=instrument)
    else:
        start, end = annotation.events[0]
        tail = LONG_VISIBLE.format(instrument=instrument, location=location,
                                   movement=movement_of(annotation), start=start, end=end)
    return CaptionRecord(annotation.clip_id, short, short + tail)


QUESTION_TEMPLATES = {
    "phase": ("what surgical phase is shown in the video?",
              "which phase of the surgery is this?"),
    "triplet": ("which instrument action and target are observed?",
                "what triplet is performed in the video?"),
    "location": ("where is the {instrument} located?",
                 "in which region of the view is the {instrument}?"),
    "relation": ("how is the {instrument} positioned relative to the {other}?",
                 "what is the relation between the {instrument} and the {other}?"),
    "movement": ("in which direction does the {instrument} move?",
                 "how does the {instrument} move?"),
    "duration": ("how long does the {instrument} {action} the {target}?",
                 "what is the duration of the {action} by the {instrument}?"),
    "time_spot": ("when does the {instrument} {action} the {target}?",
                  "at what time does the {instrument} {action} the {target}?"),
}


def supports(annotation: ClipAnnotation, kind: str) -> bool:
    if kind not in TASK_KINDS:
        raise UnsupportedTask(f"unknown task kind {kind!r}")
    if kind in ("phase", "triplet"):
        return True
    if kind == "relation":
        return relation_of(annotation) is not None
    return len(annotation.instruments) >= 1 and bool(annotation.events)


def answer_for(annotation: ClipAnnotation, kind: str) -> str:
    if not supports(annotation, kind):
        raise UnsupportedTask(f"{kind} not answerable for {annotation.clip_id}")
    if kind == "phase":
        return annotation.phase
    if kind == "triplet":
        return " ".join(annotation.triplet)
    if kind == "location":
        return location_of(annotation)
    if kind == "relation":
        return relation_of(annotation)
    if kind == "movement":
        return movement_of(annotation)
    start, end = annotation.events[0]
    if kind == "duration":
        return f"{end - start} seconds"
    return f"[{start}, {end}]"


def make_qa(annotation: ClipAnnotation, kind: str, seed: int = 0) -> QARecord:
    answer = answer_for(annotation, kind)
    templates = QUESTION_TEMPLATES[kind]
    template = templates[int(np.random.default_rng(seed).integers(len(templates)))]
    instrument, action, target = annotation.triplet
    other = annotation.instruments[1] if len(annotation.instruments) > 1 else ""
    question = template.format(instrument=instrument, action=action, target=target, other=other)
    return QARecord(kind, question, answer, annotation.clip_id)


def allocate(n: int, proportions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder split of ``n`` items over ``proportions`` (ties by kind order)."""
    total = sum(proportions.values())
    exact = {k: n * p / total for k, p in proportions.items()}
    counts = {k: int(math.floor(v)) for k, v in exact.items()}
    order = sorted(proportions, key=lambda k: (-(exact[k] - counts[k]), TASK_KINDS.index(k)))
    for k in order[: n - sum(counts.values())]:
        counts[k] += 1
    return counts


def make_qa_corpus(annotations: list[ClipAnnotation], n: int, proportions: dict[str, float] | None = None,
                   seed: int = 0) -> list[QARecord]:
    """``n`` QA records with per-kind counts fixed by ``proportions``.

    Clips are assigned round-robin among those supporting each kind.
    """
    proportions = proportions or {k: 1.0 for k in TASK_KINDS}
    counts = allocate(n, proportions)
    records = []
    for kind in TASK_KINDS:
        if not counts.get(kind):
            continue
        pool = [a for a in annotations if supports(a, kind)]
        if not pool:
            raise UnsupportedTask(f"no clip supports {kind}")
        for j in range(counts[kind]):
            records.append(make_qa(pool[j % len(pool)], kind, seed=seed * 7919 + len(records)))
    return records


# --- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    clips: int = 16
    frames: int = 64
    height: int = 32
    width: int = 32
    channels: int = 1
    instrument_counts: tuple[int, ...] = (1, 2)
    event_quantum: int = 4
    max_tube_frames: int = 16
    tube_size: int = 16
    qa_per_clip: int = 7
    proportions: dict = field(default_factory=lambda: {k: 1.0 for k in TASK_KINDS})


def clip_seed(base_seed: int, index: int) -> int:
    return base_seed * 1_000_003 + index


@dataclass
class Sample:
    video: np.ndarray
    annotation: ClipAnnotation
    captions: CaptionRecord
    qa: list[QARecord]


def generate_dataset(config: DatasetConfig, seed: int) -> list[Sample]:
    samples = []
    for i in range(config.clips):
        s = clip_seed(seed, i)
        n_inst = config.instrument_counts[i % len(config.instrument_counts)]
        clip_cfg = ClipConfig(frames=config.frames, height=config.height, width=config.width,
                              channels=config.channels, n_instruments=n_inst,
                              max_tube_frames=config.max_tube_frames, tube_height=config.tube_size,
                              tube_width=config.tube_size, event_quantum=config.event_quantum)
        video, ann = generate_clip(s, clip_cfg, clip_id=f"clip{i:05d}")
        kinds = [k for k in TASK_KINDS if supports(ann, k) and config.proportions.get(k, 0) > 0]
        qa = [make_qa(ann, k, seed=s + j) for j, k in enumerate(kinds)][: config.qa_per_clip]
        samples.append(Sample(video, ann, make_captions(ann), qa))
    return samples


def task_counts(samples) -> dict[str, int]:
    counts = {k: 0 for k in TASK_KINDS}
    for s in samples:
        for r in s.qa:
            counts[r.kind] += 1
    return counts


def save_dataset(samples: list[Sample], out_dir, seed: int | None = None) -> Path:
    """Write ``clips/<id>.svt``, ``records.jsonl`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        cid = s.annotation.clip_id
        container.write_tensor(out / "clips" / f"{cid}.svt", s.video)
        record = {
            "clip_id": cid,
            "annotation": s.annotation.to_json(),
            "captions": {"short": s.captions.short, "long": s.captions.long},
            "qa": [asdict(r) for r in s.qa],
        }
        lines.append(json.dumps(record, sort_keys=True))
    (out / "records.jsonl").write_text("\n".join(lines) + "\n")
    manifest = {"clips": len(samples), "seed": seed, "task_counts": task_counts(samples)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir) -> list[Sample]:
    root = Path(data_dir)
    samples = []
    for line in (root / "records.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        ann = ClipAnnotation.from_json(rec["annotation"])
        video = container.read_tensor(root / "clips" / f"{rec['clip_id']}.svt")
        caps = CaptionRecord(rec["clip_id"], rec["captions"]["short"], rec["captions"]["long"])
        samples.append(Sample(video, ann, caps, [QARecord(**q) for q in rec["qa"]]))
    return samples
