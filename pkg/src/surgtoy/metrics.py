"""Evaluation metrics: temporal IoU, answer matching, BLEU and ROUGE-L, reports."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import FormatError
from .synthgen import GENERAL_TASKS

_PUNCT = re.compile(r"[^\w\s]")
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")
_UNIT = re.compile(r"(-?\d+(?:\.\d+)?)\s*([a-z]*)")
UNIT_SECONDS = {"": 1.0, "s": 1.0, "sec": 1.0, "secs": 1.0, "second": 1.0, "seconds": 1.0,
                "min": 60.0, "mins": 60.0, "minute": 60.0, "minutes": 60.0}
TIME_SPOT_IOU = 0.5
ROUGE_BETA = 1.2


def temporal_iou(pred, gt) -> float:
    """IoU of two closed intervals ``(start, end)``; identical points score 1."""
    (ps, pe), (gs, ge) = pred, gt
    if ps > pe or gs > ge:
        raise ValueError(f"inverted interval: {pred} / {gt}")
    if ps == gs and pe == ge:
        return 1.0
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = max(pe, ge) - min(ps, gs)
    return inter / union if union > 0 else 0.0


def normalize_text(text: str) -> str:
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def parse_seconds(text: str) -> float | None:
    """First number in ``text`` converted to seconds using the following unit word."""
    m = _UNIT.search(text.lower())
    if m is None:
        return None
    unit = m.group(2)
    if unit not in UNIT_SECONDS:
        return None
    return float(m.group(1)) * UNIT_SECONDS[unit]


def parse_interval(text: str) -> tuple[float, float] | None:
    nums = _NUMBER.findall(text)
    if len(nums) < 2:
        return None
    start, end = float(nums[0]), float(nums[1])
    return (start, end) if start <= end else None


def answer_match(pred: str, gt: str, kind: str) -> bool:
    if not gt.strip():
        raise FormatError("empty ground-truth answer")
    if kind == "duration":
        want = parse_seconds(gt)
        if want is None:
            raise FormatError(f"unparseable duration answer {gt!r}")
        got = parse_seconds(pred)
        return got is not None and abs(got - want) < 1e-9
    if kind == "time_spot":
        want = parse_interval(gt)
        if want is None:
            raise FormatError(f"unparseable time-spot answer {gt!r}")
        got = parse_interval(pred)
        return got is not None and temporal_iou(got, want) >= TIME_SPOT_IOU
    return normalize_text(pred) == normalize_text(gt)


def duration_iou(pred: str, gt: str) -> float:
    """Durations as intervals anchored at zero: ``[0, pred]`` against ``[0, gt]``."""
    want = parse_seconds(gt)
    if want is None:
        raise FormatError(f"unparseable duration answer {gt!r}")
    got = parse_seconds(pred)
    if got is None or got < 0:
        return 0.0
    return temporal_iou((0.0, got), (0.0, want))


# --- caption overlap -------------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(preds: list[str], refs: list[list[str]], max_n: int = 4) -> list[float]:
    """Corpus BLEU@1..max_n with clipped counts and the closest-length brevity penalty.

    No smoothing: any zero n-gram precision makes BLEU at that order and above 0.
    """
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for pred, rs in zip(preds, refs):
        hyp = normalize_text(pred).split()
        toks = [normalize_text(r).split() for r in rs]
        hyp_len += len(hyp)
        ref_len += min((len(r) for r in toks), key=lambda n: (abs(n - len(hyp)), n))
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            best = Counter()
            for r in toks:
                best |= _ngrams(r, n)
            match[n - 1] += sum((counts & best).values())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        if match[n] == 0 or total[n] == 0:
            scores += [0.0] * (max_n - n)
            break
        log_sum += math.log(match[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, refs: list[str], beta: float = ROUGE_BETA) -> float:
    """Sentence ROUGE-L F-measure, best over references."""
    hyp = normalize_text(pred).split()
    best = 0.0
    for ref in refs:
        r = normalize_text(ref).split()
        lcs = lcs_length(hyp, r)
        if lcs == 0:
            continue
        prec, rec = lcs / len(hyp), lcs / len(r)
        best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
    return best


def caption_scores(preds: list[str], refs: list[list[str]]) -> dict[str, float]:
    if len(preds) != len(refs) or not preds:
        raise ValueError("need matching, non-empty prediction and reference lists")
    b = bleu(preds, refs)
    out = {f"bleu{n + 1}": b[n] for n in range(4)}
    out["rouge_l"] = sum(rouge_l(p, r) for p, r in zip(preds, refs)) / len(preds)
    return out


# --- reports ---------------------------------------------------------------------

REPORT_FIELDS = ("phase", "triplet", "location", "relation", "movement", "average",
                 "duration_iou", "time_spot", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "routing")


@dataclass
class MetricsReport:
    values: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, per_task: dict[str, list[float]], captions: dict[str, float] | None = None,
              routing: list[bool] | None = None, meta: dict | None = None) -> "MetricsReport":
        """``per_task`` maps each kind to per-item scores (1/0 or IoU for duration)."""
        values: dict[str, float | None] = {}
        counts: dict[str, int] = {}
        for kind in GENERAL_TASKS + ("time_spot",):
            items = per_task.get(kind, [])
            counts[kind] = len(items)
            values[kind] = sum(items) / len(items) if items else None
        general = [values[k] for k in GENERAL_TASKS]
        values["average"] = sum(general) / len(general) if all(v is not None for v in general) else None
        dur = per_task.get("duration", [])
        counts["duration_iou"] = len(dur)
        values["duration_iou"] = sum(dur) / len(dur) if dur else None
        for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"):
            values[key] = (captions or {}).get(key)
        if routing:
            counts["routing"] = len(routing)
            values["routing"] = sum(routing) / len(routing)
        else:
            values["routing"] = None
        return cls(values, counts, dict(meta or {}))

    def lines(self) -> list[str]:
        head = json.dumps({"report": "metrics", **self.meta}, sort_keys=True)
        out = [head]
        for name in REPORT_FIELDS:
            v = self.values.get(name)
            rec = {"metric": name, "value": None if v is None else round(v, 10),
                   "percent": None if v is None else round(100 * v, 2), "n": self.counts.get(name)}
            out.append(json.dumps(rec))
        return out

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MetricsReport":
        lines = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not lines or lines[0].get("report") != "metrics":
            raise FormatError("not a metrics report")
        meta = {k: v for k, v in lines[0].items() if k != "report"}
        values, counts = {}, {}
        for rec in lines[1:]:
            values[rec["metric"]] = rec["value"]
            if rec["n"] is not None:
                counts[rec["metric"]] = rec["n"]
        return cls(values, counts, meta)
