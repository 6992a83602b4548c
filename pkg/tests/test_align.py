import math

import numpy as np
import pytest
import torch

from surgtoy import align as al
from surgtoy import lexicon, mvrecon as mv, numerics as nx
from surgtoy import synthgen as sg
from surgtoy.errors import DegenerateInput, ShapeError

F64 = torch.float64
ENC = mv.EncoderConfig(width=8, depth=1)
SMALL = al.AlignConfig(text_width=8, text_depth=1, embed_width=8, match_hidden=8, precision="float64")


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=F64)


def heads(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return al.AlignHeads(ENC.width, cfg).to(F64)


def clips(n, frames=8):
    out = [sg.generate_clip(s, sg.ClipConfig(frames=frames, max_tube_frames=4)) for s in range(n)]
    videos = [v for v, _ in out]
    caps = [lexicon.encode(sg.make_captions(a).short) for _, a in out]
    return videos, caps


def test_projected_rows_are_unit_norm_and_duplicates_match():
    torch.manual_seed(0)
    enc = mv.VideoEncoder(ENC).to(F64)
    h = heads()
    videos, caps = clips(3)
    batch = al.embed_pair(videos + [videos[1]], caps + [caps[1]], enc, h)
    for f in (batch.f_v, batch.f_t):
        assert torch.allclose(f.norm(dim=1), torch.ones(4, dtype=F64), atol=1e-6)
    assert torch.equal(batch.f_v[3], batch.f_v[1]) and torch.equal(batch.f_t[3], batch.f_t[1])


def test_similarity_matches_two_loop_oracle():
    b = al.AlignedBatch(al.normalize(rand(4, 6, seed=1)), al.normalize(rand(4, 6, seed=2)), torch.tensor(0.1))
    sim = b.similarity()
    for i in range(4):
        for j in range(4):
            dot = sum(float(b.f_v[i, d]) * float(b.f_t[j, d]) for d in range(6))
            assert float(sim[i, j]) == pytest.approx(dot, abs=1e-12)


def test_normalize_rejects_zero_rows():
    with pytest.raises(DegenerateInput):
        al.normalize(torch.zeros(2, 3))


def test_embed_pair_needs_two():
    with pytest.raises(ShapeError):
        al.embed_pair([np.zeros((8, 32, 32, 1))], [[1]], None, None)


def test_vtc_uniform_is_log_k():
    f = torch.ones(4, 3, dtype=F64) / math.sqrt(3)
    loss = al.vtc_loss(al.AlignedBatch(f, f, torch.tensor(0.07, dtype=F64)))
    assert abs(float(loss) - math.log(4)) <= 1e-6


def test_vtc_orthonormal_closed_form():
    f = torch.eye(2, dtype=F64)
    loss = al.vtc_loss(al.AlignedBatch(f, f, torch.tensor(1.0, dtype=F64)))
    # each row: -log(e / (e + 1)) = log(1 + e^-1)
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert float(loss) == pytest.approx(0.31326, abs=1e-5)


def test_vtc_rejects_bad_inputs():
    f = torch.eye(2, dtype=F64)
    with pytest.raises(ValueError):
        al.vtc_loss(al.AlignedBatch(f, f, torch.tensor(0.0)))
    with pytest.raises(ShapeError):
        al.vtc_loss(al.AlignedBatch(f[:1], f[:1], torch.tensor(1.0)))


@pytest.mark.parametrize("seed", range(5))
def test_vtc_gradient(seed):
    fv, ft = rand(4, 5, seed=seed), rand(4, 5, seed=seed + 50)
    tau = torch.tensor(0.5, dtype=F64)
    err = nx.finite_diff_check(lambda x: al.vtc_loss(al.AlignedBatch(al.normalize(x), al.normalize(ft), tau)), fv)
    assert err <= 1e-4


def test_vtc_invariant_to_joint_permutation():
    fv, ft = al.normalize(rand(5, 4, seed=3)), al.normalize(rand(5, 4, seed=4))
    tau = torch.tensor(0.2, dtype=F64)
    perm = torch.randperm(5, generator=torch.Generator().manual_seed(1))
    a = al.vtc_loss(al.AlignedBatch(fv, ft, tau))
    b = al.vtc_loss(al.AlignedBatch(fv[perm], ft[perm], tau))
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_vtm_zero_logits_is_ln2_and_saturation():
    b = al.AlignedBatch(al.normalize(rand(3, 4, seed=5)), al.normalize(rand(3, 4, seed=6)), torch.tensor(1.0))
    zero = lambda pairs: torch.zeros(pairs.shape[0], 1, dtype=pairs.dtype)
    assert float(al.vtm_loss(b, zero)) == pytest.approx(math.log(2), abs=1e-15)
    logits = torch.tensor([10.0, 10.0, -10.0, -10.0], dtype=F64)
    labels = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=F64)
    assert float(al.binary_cross_entropy(logits, labels)) < 1e-4


def test_hardest_negative_exhaustive_scan():
    for seed in range(10):
        sim = rand(6, 6, seed=seed)
        neg_t, neg_v = al.hardest_negatives(sim)
        for i in range(6):
            best_t = max((j for j in range(6) if j != i), key=lambda j: float(sim[i, j]))
            best_v = max((j for j in range(6) if j != i), key=lambda j: float(sim[j, i]))
            assert int(neg_t[i]) == best_t and int(neg_v[i]) == best_v


def test_match_logits_layout():
    b = al.AlignedBatch(al.normalize(rand(3, 4, seed=7)), al.normalize(rand(3, 4, seed=8)), torch.tensor(1.0))
    logits, labels = al.match_logits(b, lambda pairs: pairs[:, :1])
    assert logits.shape == (9,) and labels.tolist() == [1.0] * 3 + [0.0] * 6


def test_mlm_skip_when_nothing_masked(caplog):
    h = heads()
    caps = [[5, 6]]
    with caplog.at_level("INFO", logger="surgtoy.align"):
        loss = al.mlm_loss(caps, h, masks=[np.zeros(2, dtype=bool)])
    assert float(loss) == 0.0
    assert any("skipping" in r.message for r in caplog.records)


@pytest.mark.parametrize("vocab", [200, lexicon.VOCAB_SIZE])
def test_mlm_uniform_head_is_log_vocab(vocab):
    h = heads(al.AlignConfig(text_width=8, text_depth=1, embed_width=8, match_hidden=8, vocab_size=vocab))
    with torch.no_grad():
        h.mlm_head.weight.zero_()
        h.mlm_head.bias.zero_()
    caps = [[5, 6, 7, 8], [9, 10, 11]]
    loss = al.mlm_loss(caps, h, masks=[np.array([1, 0, 1, 0], bool), np.array([0, 1, 0], bool)])
    assert float(loss.detach()) == pytest.approx(math.log(vocab), abs=1e-12)


def test_mlm_gradient():
    h = heads()
    caps = [[5, 6, 7, 8], [9, 10, 11, 12]]
    masks = [np.array([1, 0, 1, 0], bool), np.array([0, 1, 0, 0], bool)]
    f_v = al.normalize(rand(2, 8, seed=9))
    err = nx.finite_diff_check_params(lambda: al.mlm_loss(caps, h, f_v, masks=masks),
                                      [h.mlm_head.weight, h.prefix.weight], stencil=4, step=1e-4)
    assert err <= 1e-4
    assert nx.finite_diff_check(lambda x: al.mlm_loss(caps, h, x, masks=masks), f_v, stencil=4, step=1e-4) <= 1e-4


def test_frozen_training_has_constant_loss():
    videos, caps = clips(4)
    torch.manual_seed(0)
    enc = mv.VideoEncoder(ENC)
    cfg = al.AlignConfig(text_width=8, text_depth=1, embed_width=8, match_hidden=8, steps=4, freeze=True,
                         batch_size=4)
    _, _, losses = al.align_train(videos, caps, enc, cfg)
    assert len(set(losses)) == 1


def test_align_training_is_deterministic():
    videos, caps = clips(4)
    cfg = al.AlignConfig(text_width=8, text_depth=1, embed_width=8, match_hidden=8, steps=3, batch_size=2)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        enc, h, losses = al.align_train(videos, caps, mv.VideoEncoder(ENC), cfg)
        runs.append(al.align_checkpoint(enc, h, cfg, losses).to_bytes())
    assert runs[0] == runs[1]
