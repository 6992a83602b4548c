"""Two-stage training and evaluation, one checkpoint per stage.

Layout under the output directory::

    data/train, data/eval          generated datasets
    ckpt/<stage>.sck               one checkpoint per stage
    reports/metrics.jsonl          MetricsReport
    reports/predictions.jsonl      per-item predictions
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import align as al
from . import container, ensemble as en, lexicon, metrics, numerics as nx, synthgen as sg
from .config import RunConfig
from .errors import MissingCheckpoint
from .mvrecon import EncoderConfig, MVReconConfig, encoder_checkpoint, load_encoder, pretrain_mvrecon
from .temporal import STRATEGIES

log = logging.getLogger(__name__)

STAGES = ("data", "pretrain", "align", "lm", "captions", "tune", "route", "eval")


# --- config translation -----------------------------------------------------------

def dataset_config(cfg: RunConfig, clips: int) -> sg.DatasetConfig:
    d = cfg.data
    return sg.DatasetConfig(clips=clips, frames=d.frames, height=d.height, width=d.width, channels=d.channels,
                            instrument_counts=tuple(d.instrument_counts), event_quantum=d.event_quantum,
                            max_tube_frames=d.max_tube_frames, tube_size=cfg.masking.tube_size,
                            qa_per_clip=len(sg.TASK_KINDS), proportions={k: 1.0 for k in d.tasks})


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(volume_t=e.volume_t, patch=e.patch, channels=cfg.data.channels, width=e.width,
                         depth=e.depth, heads=e.heads)


def mvrecon_config(cfg: RunConfig) -> MVReconConfig:
    m = cfg.masking
    return MVReconConfig(encoder=encoder_config(cfg), scales=tuple(m.scales), tube_size=m.tube_size, r=m.r,
                         background_keep_prob=m.background_keep_prob, lr=cfg.pretrain.lr,
                         steps=cfg.pretrain.steps, seed=cfg.seed, precision=cfg.precision)


def align_config(cfg: RunConfig) -> al.AlignConfig:
    a = cfg.align
    return al.AlignConfig(tau_init=a.tau_init, use_vtm=a.use_vtm, use_mlm=a.use_mlm, lr=a.lr,
                          weight_decay=a.weight_decay, batch_size=a.batch_size, steps=a.steps,
                          seed=cfg.seed, precision=cfg.precision)


def ensemble_config(cfg: RunConfig) -> en.EnsembleConfig:
    e = cfg.ensemble
    return en.EnsembleConfig(enc_width=cfg.encoder.width, lm_width=e.lm_width, lm_depth=e.lm_depth,
                             lm_heads=e.lm_heads, qformer_width=e.qformer_width, memory_tokens=e.memory_tokens,
                             shared_qformer=e.shared_qformer, lora_rank=e.lora_rank, lora_alpha=e.lora_alpha)


def tune_config(cfg: RunConfig) -> en.TuneConfig:
    t = cfg.tune
    return en.TuneConfig(lm_steps=t.lm_steps, lm_lr=t.lm_lr, caption_steps=t.caption_steps,
                         caption_lr=t.caption_lr, caption_weight_decay=t.caption_weight_decay,
                         task_steps=t.task_steps, task_lr=t.task_lr, router_steps=t.router_steps,
                         router_lr=t.router_lr, batch_size=t.batch_size, strategy=cfg.ensemble.strategy,
                         clip_seconds=cfg.ensemble.clip_seconds, seed=cfg.seed)


# --- run state --------------------------------------------------------------------

@dataclass
class Run:
    cfg: RunConfig
    out: Path

    @property
    def dtype(self):
        return nx.resolve_dtype(self.cfg.precision)

    def ckpt_path(self, stage: str) -> Path:
        return self.out / "ckpt" / f"{stage}.sck"

    def data_dir(self, split: str) -> Path:
        return self.out / "data" / split

    def load(self, stage: str) -> container.Checkpoint:
        path = self.ckpt_path(stage)
        if not path.exists():
            raise MissingCheckpoint(stage, path)
        return container.Checkpoint.load(path)

    def save(self, ckpt: container.Checkpoint):
        path = self.ckpt_path(ckpt.stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(path)
        log.info("wrote %s", path)

    def dataset(self, split: str) -> list[sg.Sample]:
        root = self.data_dir(split)
        if not (root / "records.jsonl").exists():
            raise MissingCheckpoint("data", root)
        return sg.load_dataset(root)

    def encoder(self):
        return load_encoder(self.load("align"), encoder_config(self.cfg), self.dtype)

    def ensemble(self, stage: str) -> en.SurgicalEnsemble:
        return en.load_ensemble(self.load(stage), self.dtype)

    def latents(self, samples, encoder) -> list[torch.Tensor]:
        t = self.cfg.ensemble.clip_seconds
        return [en.segment_latents(encoder, s.video, t, s.annotation.fps) for s in samples]


def _seed_all(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def stage_seed(seed: int, stage: str) -> int:
    return seed * 101 + STAGES.index(stage)


# --- stages -------------------------------------------------------------------------

def run_data(run: Run):
    cfg = run.cfg
    for split, clips, base in (("train", cfg.data.clips, 2 * cfg.seed), ("eval", cfg.data.eval_clips, 2 * cfg.seed + 1)):
        samples = sg.generate_dataset(dataset_config(cfg, clips), base)
        sg.save_dataset(samples, run.data_dir(split), seed=base)


def run_pretrain(run: Run):
    samples = run.dataset("train")
    _seed_all(stage_seed(run.cfg.seed, "pretrain"))
    mcfg = mvrecon_config(run.cfg)
    model, losses = pretrain_mvrecon([s.video for s in samples], [s.annotation for s in samples], mcfg)
    run.save(encoder_checkpoint(model, mcfg, losses))


def run_align(run: Run):
    samples = run.dataset("train")
    encoder = load_encoder(run.load("pretrain"), encoder_config(run.cfg), run.dtype)
    _seed_all(stage_seed(run.cfg.seed, "align"))
    captions = [lexicon.encode(s.captions.short) for s in samples]
    videos = [torch.as_tensor(s.video, dtype=run.dtype) for s in samples]
    encoder, heads, losses = al.align_train(videos, captions, encoder, align_config(run.cfg))
    run.save(al.align_checkpoint(encoder, heads, align_config(run.cfg), losses))


def run_lm(run: Run):
    samples = run.dataset("train")
    _seed_all(stage_seed(run.cfg.seed, "lm"))
    ens = en.SurgicalEnsemble(ensemble_config(run.cfg)).to(run.dtype)
    losses = en.pretrain_lm(ens, lm_corpus(run.cfg, samples), tune_config(run.cfg))
    _save_ensemble(run, ens, "lm", losses)


def lm_corpus(cfg: RunConfig, samples) -> list:
    """Short captions as plain text, plus captions and QA answers in prompt layout with empty visual slots."""
    t, strategy = cfg.ensemble.clip_seconds, cfg.ensemble.strategy
    clip_count = cfg.data.frames // int(t)
    cap_q = lexicon.encode(en.CAPTION_QUERY)
    m = cfg.ensemble.memory_tokens
    corpus: list = [s.captions.short for s in samples]
    for s in samples:
        corpus.append(en.prompt_ids(strategy, clip_count, t, cap_q, lexicon.encode(s.captions.long), m))
        for r in s.qa:
            corpus.append(en.prompt_ids(strategy, clip_count, t, lexicon.encode(r.question),
                                        lexicon.encode(r.answer), m))
    return corpus


def caption_items(samples, latents) -> list[en.Item]:
    q = lexicon.encode(en.CAPTION_QUERY)
    return [en.Item(z, q, lexicon.encode(s.captions.long), "caption", s.annotation.clip_id)
            for s, z in zip(samples, latents)]


def qa_items(samples, latents) -> list[en.Item]:
    return [en.Item(z, lexicon.encode(r.question), lexicon.encode(r.answer), r.kind, r.clip_id)
            for s, z in zip(samples, latents) for r in s.qa]


def run_captions(run: Run):
    samples = run.dataset("train")
    latents = run.latents(samples, run.encoder())
    ens = run.ensemble("lm")
    _seed_all(stage_seed(run.cfg.seed, "captions"))
    losses = en.tune_captions(ens, caption_items(samples, latents), tune_config(run.cfg))
    _save_ensemble(run, ens, "captions", losses)


def run_tune(run: Run):
    samples = run.dataset("train")
    latents = run.latents(samples, run.encoder())
    ens = run.ensemble("captions")
    en.seed_task_memories(ens)
    tcfg = tune_config(run.cfg)
    items = qa_items(samples, latents)
    logs = {}
    for kind in run.cfg.data.tasks:
        g = en.task_id(kind)
        _seed_all(stage_seed(run.cfg.seed, "tune") * 16 + g)
        subset = [it for it in items if it.kind == kind]
        if not subset:
            log.warning("no training items for %s; adapter left at initialization", kind)
            continue
        logs[f"log.loss.task{g}"] = np.asarray(en.tune_task(ens, g, subset, tcfg), dtype=np.float64)
    _save_ensemble(run, ens, "tune", None, logs)


def run_route(run: Run):
    samples = run.dataset("train")
    ens = run.ensemble("tune")
    _seed_all(stage_seed(run.cfg.seed, "route"))
    t, strategy = run.cfg.ensemble.clip_seconds, run.cfg.ensemble.strategy
    clip_count = run.cfg.data.frames // int(t)
    records = [r for s in samples for r in s.qa]
    layouts = [en.text_layout(strategy, clip_count, t, lexicon.encode(r.question)) for r in records]
    labels = [en.task_id(r.kind) for r in records]
    losses = en.train_router(ens, layouts, labels, tune_config(run.cfg))
    _save_ensemble(run, ens, "route", losses)


def _save_ensemble(run: Run, ens, stage: str, losses=None, logs=None):
    ckpt = en.ensemble_checkpoint(ens, stage, {"seed": run.cfg.seed, "strategy": run.cfg.ensemble.strategy})
    if losses is not None:
        ckpt.arrays["log.loss"] = np.asarray(losses, dtype=np.float64)
    ckpt.arrays.update(logs or {})
    run.save(ckpt)


def evaluate(run: Run) -> metrics.MetricsReport:
    cfg = run.cfg
    samples = run.dataset("eval")
    latents = run.latents(samples, run.encoder())
    ens = run.ensemble("route").eval()
    t, strategy, cap = cfg.ensemble.clip_seconds, cfg.ensemble.strategy, cfg.eval.max_new_tokens
    per_task: dict[str, list[float]] = {}
    routed: list[bool] = []
    preds = []
    with torch.no_grad():
        for s, z in zip(samples, latents):
            for r in s.qa:
                g, answer = ens.respond(z, r.question, strategy, t, cap)
                routed.append(g == en.task_id(r.kind))
                if r.kind == "duration":
                    score = metrics.duration_iou(answer, r.answer)
                else:
                    score = float(metrics.answer_match(answer, r.answer, r.kind))
                per_task.setdefault(r.kind, []).append(score)
                preds.append({"clip_id": r.clip_id, "kind": r.kind, "question": r.question, "answer": r.answer,
                              "prediction": answer, "task": g, "score": score})
        cap_preds, cap_refs = [], []
        q = lexicon.encode(en.CAPTION_QUERY)
        for s, z in zip(samples, latents):
            seq = ens.build(strategy, "caption", q, z, t)
            cap_preds.append(lexicon.decode(ens.generate(seq, None, 64)))
            cap_refs.append([s.captions.long])
            preds.append({"clip_id": s.annotation.clip_id, "kind": "caption", "answer": s.captions.long,
                          "prediction": cap_preds[-1]})
    captions = metrics.caption_scores(cap_preds, cap_refs)
    report = metrics.MetricsReport.build(per_task, captions, routed,
                                         meta={"seed": cfg.seed, "strategy": strategy,
                                               "shared_qformer": cfg.ensemble.shared_qformer})
    reports = run.out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "metrics.jsonl").write_text(report.dumps())
    (reports / "predictions.jsonl").write_text("".join(json.dumps(p) + "\n" for p in preds))
    return report


RUNNERS = {"data": run_data, "pretrain": run_pretrain, "align": run_align, "lm": run_lm,
           "captions": run_captions, "tune": run_tune, "route": run_route, "eval": evaluate}


def _done(run: Run, stage: str) -> bool:
    if stage == "data":
        return (run.data_dir("train") / "records.jsonl").exists() and (run.data_dir("eval") / "records.jsonl").exists()
    if stage == "eval":
        return (run.out / "reports" / "metrics.jsonl").exists()
    return run.ckpt_path(stage).exists()


def run_pipeline(cfg: RunConfig, out, start: str = "data", stop: str = "eval",
                 resume: bool = False) -> metrics.MetricsReport | None:
    """Run stages ``start..stop`` in order; earlier stages must already have checkpoints.

    With ``resume`` a stage whose output already exists is skipped.
    """
    if start == "all":
        start = "data"
    for name in (start, stop):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
    run = Run(cfg, Path(out))
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.yaml").write_text(cfg.dumps())
    lo, hi = STAGES.index(start), STAGES.index(stop)
    # report the nearest missing prerequisite, the one the first requested stage reads
    for stage in reversed(STAGES[:lo]):
        if not _done(run, stage):
            raise MissingCheckpoint(stage, run.ckpt_path(stage) if stage != "data" else run.data_dir("train"))
    report = None
    for stage in STAGES[lo:hi + 1]:
        if resume and _done(run, stage):
            log.info("stage %s already complete; skipping", stage)
            if stage == "eval":
                report = metrics.MetricsReport.loads((run.out / "reports" / "metrics.jsonl").read_text())
            continue
        log.info("stage %s", stage)
        result = RUNNERS[stage](run)
        if stage == "eval":
            report = result
    return report


def ablate_embedding(cfg: RunConfig, out, seeds=(0,), strategies=STRATEGIES) -> dict:
    """Train stage 2 once per layout on shared stage-1 checkpoints; one report per (seed, layout)."""
    out = Path(out)
    summary = {"strategies": list(strategies), "seeds": list(seeds), "runs": []}
    for seed in seeds:
        base = cfg.replace(seed=seed)
        shared = out / f"seed{seed}" / "shared"
        run_pipeline(base, shared, "data", "align", resume=True)
        for strategy in strategies:
            sub = out / f"seed{seed}" / strategy
            scfg = base.replace(ensemble={"strategy": strategy})
            _link_stage1(shared, sub)
            report = run_pipeline(scfg, sub, "lm", "eval")
            summary["runs"].append({"seed": seed, "strategy": strategy, **{
                k: report.values.get(k) for k in ("time_spot", "duration_iou", "average", "routing")}})
    for strategy in strategies:
        vals = [r["time_spot"] for r in summary["runs"] if r["strategy"] == strategy and r["time_spot"] is not None]
        summary.setdefault("mean_time_spot", {})[strategy] = sum(vals) / len(vals) if vals else None
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _link_stage1(shared: Path, target: Path):
    """Copy the shared data and stage-1 checkpoints into a per-strategy run directory."""
    import shutil
    (target / "ckpt").mkdir(parents=True, exist_ok=True)
    if not (target / "data").exists():
        shutil.copytree(shared / "data", target / "data")
    for stage in ("pretrain", "align"):
        shutil.copyfile(shared / "ckpt" / f"{stage}.sck", target / "ckpt" / f"{stage}.sck")
