"""Acceptance criteria 1-10, one check each.

Every check prints a single ``[PASS]``/``[FAIL]`` line. Run with pytest, or
directly (``python tests/test_acceptance.py [N ...]``) to print the lines only.
Criterion 9 is a reported comparison and never fails the suite.
"""
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from surgtoy import align as al
from surgtoy import config, container, ensemble as en, lexicon, metrics, mvrecon as mv, numerics as nx
from surgtoy import pipeline, synthgen as sg, temporal as tp, tubemask as tm

ROOT = Path(__file__).resolve().parents[1]
F64 = torch.float64
LINES = []


def report(n, passed, detail, soft=False):
    tag = "PASS" if passed else "FAIL"
    line = f"[{tag}] criterion {n}: {detail}" + (" (reported, not gated)" if soft else "")
    print(line)
    LINES.append(line)
    try:
        from conftest import ACCEPTANCE_LINES
        ACCEPTANCE_LINES.append(line)
    except ImportError:
        pass
    return passed


def binomial_interval(n, p, mass=0.99):
    """Exact equal-tailed interval of Binomial(n, p) from the log pmf."""
    k = np.arange(n + 1)
    logpmf = (np.array([math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) for i in k])
              + k * math.log(p) + (n - k) * math.log1p(-p))
    cdf = np.cumsum(np.exp(logpmf - logpmf.max()))
    cdf /= cdf[-1]
    tail = (1 - mass) / 2
    return int(np.searchsorted(cdf, tail)), int(np.searchsorted(cdf, 1 - tail))


# --- 1 -------------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    clips = [sg.generate_clip(s, sg.ClipConfig(frames=64, n_instruments=1 + s % 2))[1] for s in range(100)]
    violations = plans = fallbacks = 0
    hints = instruments = fb_hints = fb_tubes = 0
    for i in range(10000):
        ann = clips[i % len(clips)]
        k = tm.DEFAULT_SCALES[i % 4]
        plan = tm.make_mask_plan((64, 32, 32, 1), ann, tm.TubeSpec(k), r=0.1, seed=i)
        plans += 1
        if plan.fallback:
            fallbacks += 1
            fb_hints += int(plan.hint.sum())
            fb_tubes += plan.hint.size
            continue
        violations += int((plan.hint > plan.instrument).sum())
        hints += int(plan.hint.sum())
        instruments += int(plan.instrument.sum())
    lo, hi = binomial_interval(instruments, 0.1)
    inside = lo <= hints <= hi
    if fallbacks:
        flo, fhi = binomial_interval(fb_tubes, 0.1)
        inside = inside and flo <= fb_hints <= fhi
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and inside and elapsed < 60
    return report(1, ok, f"{plans} plans, {violations} Hhint>M violations, hints {hints} of {instruments} "
                         f"instrument tubes in 99% interval [{lo}, {hi}]: {inside}, "
                         f"{fallbacks} fallback plans, {elapsed:.1f}s")


# --- 2 -------------------------------------------------------------------------------

def criterion_2():
    torch.manual_seed(0)
    enc_cfg = mv.EncoderConfig()
    encoder = mv.VideoEncoder(enc_cfg).to(F64)
    rng = np.random.default_rng(0)
    changed = 0
    for trial in range(100):
        video, ann = sg.generate_clip(trial, sg.ClipConfig(frames=32))
        k = tm.DEFAULT_SCALES[trial % 4]
        plan = tm.make_mask_plan(video.shape, ann, tm.TubeSpec(k), 0.5, seed=trial)
        part = tm.partition_volumes(video.shape, plan.hint, tm.TubeSpec(k), enc_cfg.volume)
        if part.degenerate_visible:
            plan.hint.flat[0] = 1
            part = tm.partition_volumes(video.shape, plan.hint, tm.TubeSpec(k), enc_cfg.volume)
        vid = torch.from_numpy(video.astype(np.float64))
        base = mv.encode_visible(encoder, part, vid)
        # perturb every pixel of every masked volume
        vol_mask = np.zeros(part.m, dtype=bool)
        vol_mask[part.masked] = True
        nt, ny, nx_ = part.grid
        pix = vol_mask.reshape(nt, ny, nx_).repeat(2, 0).repeat(8, 1).repeat(8, 2)[..., None]
        noisy = np.where(pix, rng.random(video.shape), video)
        assert np.array_equal(noisy[~pix.repeat(1, -1)], video[~pix.repeat(1, -1)])
        after = mv.encode_visible(encoder, part, torch.from_numpy(noisy))
        changed += not torch.equal(base, after)
    return report(2, changed == 0, f"{changed} of 100 perturbations changed the visible latents")


# --- 3 -------------------------------------------------------------------------------

def _rand(shape, seed):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=F64)


def _mini_mae(seed):
    torch.manual_seed(seed)
    enc = mv.EncoderConfig(volume_t=2, patch=4, channels=1, width=4, depth=2, heads=1)
    model = mv.MVRecon(mv.MVReconConfig(encoder=enc, decoder_width=4, decoder_depth=2)).to(F64)
    video = torch.from_numpy(np.random.default_rng(seed).random((4, 8, 8, 1)))
    hint = np.array([[[1]], [[0]]], dtype=np.uint8)
    part = tm.partition_volumes(video.shape, hint, tm.TubeSpec(2, 8, 8), enc.volume)
    return model, video, part


# Parameters with an exactly zero gradient (shift-invariant biases) see pure roundoff,
# about eps * |loss| / step; a 1e-3 step with the 4-point stencil keeps that under the 1e-8 floor.
PARAM_STEP = 1e-3


def gradient_cases():
    """name -> callable(seed) returning the checker's relative error."""
    fd, fdp = nx.finite_diff_check, nx.finite_diff_check_params

    def matmul(s):
        a, b, w = _rand((4, 5), s), _rand((5, 3), s + 1), _rand((4, 3), s + 2)
        return max(fd(lambda x: (nx.matmul(x, b) * w).sum(), a), fd(lambda x: (nx.matmul(a, x) * w).sum(), b))

    def softmax(s):
        x, w = _rand((3, 6), s), _rand((3, 6), s + 1)
        return fd(lambda v: (nx.softmax(v) * w).sum(), x)

    def layer_norm(s):
        x, g, b, w = _rand((3, 5), s), _rand((5,), s + 1), _rand((5,), s + 2), _rand((3, 5), s + 3)
        return max(fd(lambda v: (nx.layer_norm(v, g, b) * w).sum(), x),
                   fd(lambda v: (nx.layer_norm(x, v, b) * w).sum(), g))

    def cross_attention(s):
        q, k, v, w = _rand((3, 4), s), _rand((5, 4), s + 1), _rand((5, 4), s + 2), _rand((3, 4), s + 3)
        return max(fd(lambda x: (nx.cross_attention(x, k, v, 2) * w).sum(), q),
                   fd(lambda x: (nx.cross_attention(q, x, v, 2) * w).sum(), k),
                   fd(lambda x: (nx.cross_attention(q, k, x, 2) * w).sum(), v))

    def gelu(s):
        x, w = _rand((8,), s), _rand((8,), s + 1)
        return fd(lambda v: (nx.gelu(v) * w).sum(), x)

    def lora(s):
        wgt, x, b, out = _rand((6, 5), s), _rand((3, 5), s + 1), _rand((6, 8), s + 2), _rand((3, 6), s + 3)
        return fd(lambda a: (en.lora_apply(wgt, en.LoRADelta("d", a, b), x) * out).sum(), _rand((8, 5), s + 4))

    def recon(s):
        model, video, part = _mini_mae(s)
        return fdp(lambda: mv.reconstruct(model, video, part)[1], list(model.parameters()), stencil=4, step=PARAM_STEP)

    def vtc(s):
        fv, ft = _rand((4, 5), s), _rand((4, 5), s + 1)
        tau = torch.tensor(0.3, dtype=F64)
        return max(fd(lambda x: al.vtc_loss(al.AlignedBatch(al.normalize(x), al.normalize(ft), tau)), fv),
                   fd(lambda x: al.vtc_loss(al.AlignedBatch(al.normalize(fv), al.normalize(ft), x)), tau[None]))

    def vtm(s):
        torch.manual_seed(s)
        head = torch.nn.Sequential(torch.nn.Linear(8, 6), torch.nn.Tanh(), torch.nn.Linear(6, 1)).to(F64)
        fv, ft = _rand((4, 4), s), _rand((4, 4), s + 1)
        return max(fd(lambda x: al.vtm_loss(al.AlignedBatch(al.normalize(x), al.normalize(ft), 1.0), head), fv),
                   fdp(lambda: al.vtm_loss(al.AlignedBatch(al.normalize(fv), al.normalize(ft), 1.0), head),
                       list(head.parameters()), stencil=4, step=PARAM_STEP))

    def mlm(s):
        torch.manual_seed(s)
        heads = al.AlignHeads(4, al.AlignConfig(text_width=4, text_depth=1, embed_width=4, match_hidden=4,
                                               vocab_size=24)).to(F64)
        caps = [[5, 6, 7, 8], [9, 10, 11]]
        masks = [np.array([1, 0, 1, 0], bool), np.array([0, 1, 0], bool)]
        f_v = _rand((2, 4), s)
        return max(fdp(lambda: al.mlm_loss(caps, heads, f_v, masks=masks), list(heads.text.parameters())
                       + list(heads.prefix.parameters()) + list(heads.mlm_head.parameters()), stencil=4, step=PARAM_STEP),
                   fd(lambda x: al.mlm_loss(caps, heads, x, masks=masks), f_v, stencil=4, step=PARAM_STEP))

    return {"matmul": matmul, "softmax": softmax, "layer_norm": layer_norm, "cross_attention": cross_attention,
            "gelu": gelu, "lora_apply": lora, "recon_loss": recon, "vtc_loss": vtc, "vtm_loss": vtm,
            "mlm_loss": mlm}


def criterion_3(seeds=20):
    t0 = time.perf_counter()
    worst = {}
    for name, case in gradient_cases().items():
        worst[name] = max(case(s) for s in range(seeds))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    ok = not bad and elapsed < 300
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return report(3, ok, f"worst relative error over {seeds} seeds: {summary}; {elapsed:.0f}s")


# --- 4 -------------------------------------------------------------------------------

def criterion_4():
    t0 = time.perf_counter()
    out = [sg.generate_clip(s, sg.ClipConfig(frames=8, max_tube_frames=4)) for s in range(4)]
    cfg = mv.MVReconConfig(scales=(2, 4), steps=500, lr=1e-3, seed=0)
    _, losses = mv.pretrain_mvrecon([v for v, _ in out], [a for _, a in out], cfg)
    elapsed = time.perf_counter() - t0
    below = [i for i, v in enumerate(losses) if v < 0.1 * losses[0]]
    first = below[0] if below else None
    ok = first is not None and elapsed < 300
    return report(4, ok, f"step-0 loss {losses[0]:.4f}, min {min(losses):.4f} "
                         f"({min(losses) / losses[0]:.1%}), first step below 10%: {first}, {elapsed:.0f}s")


# --- 5 -------------------------------------------------------------------------------

def criterion_5():
    f = torch.ones(4, 3, dtype=F64) / math.sqrt(3)
    uniform = float(al.vtc_loss(al.AlignedBatch(f, f, torch.tensor(0.07, dtype=F64))))
    gap = abs(uniform - math.log(4))
    out = [sg.generate_clip(s, sg.ClipConfig(frames=8, max_tube_frames=4)) for s in range(8)]
    videos = [torch.from_numpy(v) for v, _ in out]
    caps = [lexicon.encode(sg.make_captions(a).short) for _, a in out]
    torch.manual_seed(0)
    encoder = mv.VideoEncoder(mv.EncoderConfig())
    cfg = al.AlignConfig(steps=200, batch_size=8, lr=1e-3, seed=0)
    encoder, heads, _ = al.align_train(videos, caps, encoder, cfg)
    with torch.no_grad():
        v2t, t2v = al.retrieval_accuracy(al.embed_pair(videos, caps, encoder, heads))
    ok = gap <= 1e-6 and v2t == 1.0 and t2v == 1.0
    return report(5, ok, f"|uniform loss - ln 4| = {gap:.1e}; train retrieval v->t {v2t:.0%}, t->v {t2v:.0%}")


# --- 6 -------------------------------------------------------------------------------

def criterion_6():
    problems = []
    query = "when does the hook dissect the fat?"
    for n in range(1, 33):
        for t in (1, 2, 4, 8):
            segs = tp.segment_video(n * t, t)
            for s in segs:
                s.visual = torch.zeros(2, 3)
            inter = tp.assemble("interleave", segs, query)
            if len(inter.blocks) != 2 * n + 1:
                problems.append(f"N={n}: {len(inter.blocks)} blocks")
            for i in range(n):
                want = f"This is a video clip spanning from {i * t} to {(i + 1) * t} seconds"
                d, v = inter.blocks[2 * i], inter.blocks[2 * i + 1]
                if d.kind != "descriptor" or d.text != want or v.kind != "visual" or v.segment != i:
                    problems.append(f"N={n} t={t} pair {i}")
            direct = tp.assemble("direct", segs, query)
            front = tp.assemble("front", segs, query)
            if direct.kinds() != ["visual"] * n + ["query"]:
                problems.append(f"direct N={n}")
            if front.kinds() != ["descriptor"] + ["visual"] * n + ["query"] or \
                    front.blocks[0].text != f"This is a video with {n * t} seconds":
                problems.append(f"front N={n}")
            if inter.blocks[-1].kind != "query" or direct.blocks[-1].tokens != tuple(lexicon.encode(query)):
                problems.append(f"query N={n}")
    return report(6, not problems, f"N in [1, 32] x t in (1, 2, 4, 8): {len(problems)} mismatches"
                                   + (f" e.g. {problems[:3]}" if problems else ""))


# --- 7 -------------------------------------------------------------------------------

def criterion_7():
    torch.manual_seed(0)
    cfg = en.EnsembleConfig(enc_width=8, lm_max_len=128, qformer_width=16, memory_tokens=2)
    ens = en.SurgicalEnsemble(cfg)
    with torch.no_grad():
        nx.uniform_fan_in_(ens.qformer.out.weight)
    anns = [sg.generate_clip(s, sg.ClipConfig(frames=32))[1] for s in range(8)]
    items = []
    for i, a in enumerate(anns):
        qa = sg.make_qa(a, "location", seed=i)
        z = torch.randn(2, 4, 8, generator=torch.Generator().manual_seed(i))
        items.append(en.Item(z, lexicon.encode(qa.question), lexicon.encode(qa.answer), "location"))
    seqs = [ens.build("interleave", 3, it.question, it.z, 4.0) for it in items]
    zero_ok = all(ens.generate(s, g) == ens.generate(s, None) for s in seqs[:3] for g in range(1, 8))

    before = container.Checkpoint.from_bytes(en.ensemble_checkpoint(ens, "tune").to_bytes()).arrays
    en.tune_task(ens, 3, items, en.TuneConfig(batch_size=8), steps=50)
    after = en.ensemble_arrays(ens)
    changed = sorted(k for k in before if before[k].tobytes() != after[k].tobytes())
    allowed = all(k.startswith("task3.") or k.startswith("router.") for k in changed)
    confined = bool(changed) and allowed

    worst_gap, worst_tail = 0.0, 0.0
    for i, layer in enumerate(ens.lm.lora_layers().values()):
        d = layer.delta(3)
        d64 = en.LoRADelta("d", d.A.detach().double(), d.B.detach().double(), d.rank, d.alpha)
        w = layer.base.weight.detach().double()
        x = torch.randn(5, w.shape[1], generator=torch.Generator().manual_seed(i), dtype=F64)
        dense = x @ (w + d64.materialize()).t()
        worst_gap = max(worst_gap, float((dense - en.lora_apply(w, d64, x)).abs().max()))
        s = torch.linalg.svdvals(d64.materialize())
        worst_tail = max(worst_tail, float(s[d.rank:].max()) if s.numel() > d.rank else 0.0)
    ok = zero_ok and confined and worst_gap <= 1e-10 and worst_tail < 1e-10
    return report(7, ok, f"zero-delta generation bitwise equal: {zero_ok}; {len(changed)} arrays changed, "
                         f"all task3/router: {allowed}; materialized vs factored max gap {worst_gap:.1e}; "
                         f"largest singular value past rank 8: {worst_tail:.1e}")


# --- 8 -------------------------------------------------------------------------------

def criterion_8():
    fixtures = (metrics.temporal_iou((10, 20), (15, 25)) == 5 / 15 and metrics.temporal_iou((3, 9), (3, 9)) == 1.0
                and metrics.temporal_iou((0, 5), (6, 9)) == 0.0)
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        a = sorted(int(v) for v in rng.integers(0, 801, size=2))
        b = sorted(int(v) for v in rng.integers(0, 801, size=2))
        if a == b:
            want = 1.0
        else:
            # unit cells of width 1/8 s; endpoints lie on that grid
            ca, cb = set(range(a[0], a[1])), set(range(b[0], b[1]))
            want = len(ca & cb) / len(ca | cb) if ca | cb else 0.0
        got = metrics.temporal_iou((a[0] / 8, a[1] / 8), (b[0] / 8, b[1] / 8))
        worst = max(worst, abs(got - want))
    ok = fixtures and worst <= 1e-9
    return report(8, ok, f"fixtures exact: {fixtures}; max |IoU - discretized oracle| over 1000 pairs {worst:.1e}")


# --- 9 -------------------------------------------------------------------------------

def criterion_9(seeds=(0, 1, 2), out=None):
    t0 = time.perf_counter()
    cfg = config.load_config(ROOT / "configs" / "ablation.yaml")
    with tempfile.TemporaryDirectory() as tmp:
        summary = pipeline.ablate_embedding(cfg, Path(out or tmp), seeds, ("direct", "interleave"))
    per_seed = {}
    for run in summary["runs"]:
        per_seed.setdefault(run["seed"], {})[run["strategy"]] = run["time_spot"]
    means = summary["mean_time_spot"]
    holds = means["interleave"] >= means["direct"]
    detail = "; ".join(f"seed {s}: direct {v['direct']:.3f}, interleave {v['interleave']:.3f}"
                       for s, v in sorted(per_seed.items()))
    report(9, holds, f"time-spot accuracy {detail}; mean direct {means['direct']:.3f} vs interleave "
                     f"{means['interleave']:.3f} ({time.perf_counter() - t0:.0f}s)", soft=True)
    return True


# --- 10 ------------------------------------------------------------------------------

def criterion_10():
    cfg = config.load_config(ROOT / "configs" / "smoke.yaml", seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        blobs = []
        for name in ("first", "second"):
            pipeline.run_pipeline(cfg, Path(tmp) / name, "all", "eval")
            blobs.append((Path(tmp) / name / "reports" / "metrics.jsonl").read_bytes())
    same = blobs[0] == blobs[1]
    return report(10, same, f"two full runs at seed 1: metrics reports byte-identical: {same} "
                            f"({len(blobs[0])} bytes)")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    assert CRITERIA[n](), LINES[-1]


if __name__ == "__main__":
    torch.set_num_threads(1)
    wanted = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    results = [CRITERIA[n]() for n in wanted]
    sys.exit(0 if all(results) else 1)
