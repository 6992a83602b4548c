import numpy as np
import pytest
import torch

from surgtoy import container, mvrecon as mv, numerics as nx
from surgtoy import synthgen as sg
from surgtoy import tubemask as tm
from surgtoy.errors import NoTarget, ShapeError

F64 = torch.float64
TINY = mv.EncoderConfig(width=8, depth=2, heads=1)


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return mv.MVRecon(mv.MVReconConfig(encoder=TINY, **kw)).to(F64)


def partition(hint, k=2, shape=(4, 16, 16, 1)):
    return tm.partition_volumes(shape, np.asarray(hint, dtype=np.uint8), tm.TubeSpec(k), TINY.volume)


def video(seed=0, shape=(4, 16, 16, 1)):
    return torch.from_numpy(np.random.default_rng(seed).random(shape))


def test_encoder_blind_to_masked_volumes():
    model = tiny_model()
    part = partition([[[1]], [[0]]])
    vid = video()
    base = mv.encode_visible(model.encoder, part, vid)
    vols = tm.extract_volumes(vid, part.volume)
    rng = np.random.default_rng(1)
    for _ in range(20):
        noisy = vols.clone()
        noisy[torch.from_numpy(part.masked)] = torch.from_numpy(rng.random((part.masked.size, vols.shape[1])))
        # rebuild the clip from the perturbed rows
        clip = noisy.reshape(2, 2, 2, 2, 8, 8, 1).permute(0, 3, 1, 4, 2, 5, 6).reshape(vid.shape)
        assert torch.equal(tm.extract_volumes(clip, part.volume)[torch.from_numpy(part.visible)],
                           vols[torch.from_numpy(part.visible)])
        assert torch.equal(mv.encode_visible(model.encoder, part, clip), base)


def test_single_visible_volume_gives_one_latent():
    model = tiny_model()
    part = tm.VolumePartition(TINY.volume, (2, 2, 2), np.array([5]), np.array([0, 1, 2, 3, 4, 6, 7]))
    assert mv.encode_visible(model.encoder, part, video()).shape == (1, TINY.width)


def test_visible_order_permutation():
    model = tiny_model()
    vid = video()
    vols = tm.extract_volumes(vid, TINY.volume)
    coords = torch.from_numpy(mv.grid_coords((2, 2, 2)))
    out = model.encoder(vols, coords)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(3))
    shuffled = model.encoder(vols[perm], coords[perm])
    assert torch.allclose(shuffled[torch.argsort(perm)], out, atol=1e-12)


def test_degenerate_visible_uses_placeholder():
    model = tiny_model()
    part = partition([[[0]], [[0]]])
    assert part.degenerate_visible
    z = mv.encode_visible(model.encoder, part, video())
    assert z.shape == (1, TINY.width)
    pred = mv.decode_masked(model.decoder, z, part)
    assert pred.shape == (8, TINY.volume_size)


def test_no_target_raises():
    model = tiny_model()
    with pytest.raises(NoTarget):
        mv.reconstruct(model, video(), partition([[[1]], [[1]]]))


def test_decoder_output_shape_and_zero_head():
    model = tiny_model()
    part = partition([[[1]], [[0]]])
    vid = video()
    with torch.no_grad():
        model.decoder.head.weight.zero_()
        model.decoder.head.bias.zero_()
    pred, loss = mv.reconstruct(model, vid, part)
    assert pred.numel() == part.masked.size * TINY.volume_size
    assert torch.equal(pred, torch.zeros_like(pred))
    target = mv.masked_targets(vid, part)
    assert float(loss.detach()) == pytest.approx(float((target ** 2).mean()), abs=1e-15)


def test_recon_loss_fixtures_and_two_loop_oracle():
    t = torch.rand(3, 5, dtype=F64)
    assert float(mv.recon_loss(t, t)) == 0.0
    assert float(mv.recon_loss(torch.zeros(3, 5, dtype=F64), torch.ones(3, 5, dtype=F64))) == 1.0
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(4, 6, generator=g, dtype=F64), torch.rand(4, 6, generator=g, dtype=F64)
    want = sum((float(a[i, j]) - float(b[i, j])) ** 2 for i in range(4) for j in range(6)) / 24
    assert float(mv.recon_loss(a, b)) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ShapeError):
        mv.recon_loss(a, b[:3])


def test_recon_loss_permutation_invariant():
    a, b = torch.rand(6, 4, dtype=F64), torch.rand(6, 4, dtype=F64)
    perm = torch.randperm(6)
    assert float(mv.recon_loss(a[perm], b[perm])) == pytest.approx(float(mv.recon_loss(a, b)), abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    model = tiny_model(seed)
    part = partition([[[1]], [[0]]])
    vid = video(seed)
    err = nx.finite_diff_check_params(lambda: mv.reconstruct(model, vid, part)[1],
                                      list(model.decoder.parameters()) + list(model.encoder.embed.parameters()),
                                      stencil=4, step=1e-4)
    assert err <= 1e-4


def test_zero_learning_rate_keeps_loss_constant():
    vids, anns = zip(*(sg.generate_clip(s, sg.ClipConfig(frames=8, max_tube_frames=4)) for s in range(2)))
    # r=0 masks everything, so every step sees the same plan and only the weights could move the loss
    cfg = mv.MVReconConfig(encoder=TINY, scales=(2,), r=0.0, lr=0.0, steps=5)
    model, losses = mv.pretrain_mvrecon(vids, anns, cfg)
    assert len(set(losses)) == 1
    torch.manual_seed(cfg.seed)
    fresh = mv.MVRecon(cfg)
    for a, b in zip(model.parameters(), fresh.parameters()):
        assert torch.equal(a, b)


def test_pretrain_is_deterministic():
    vids, anns = zip(*(sg.generate_clip(s, sg.ClipConfig(frames=8, max_tube_frames=4)) for s in range(2)))
    cfg = mv.MVReconConfig(encoder=TINY, scales=(2, 4), steps=3, lr=1e-3)
    a = mv.encoder_checkpoint(*mv.pretrain_mvrecon(vids, anns, cfg)[:1], cfg).to_bytes()
    b = mv.encoder_checkpoint(*mv.pretrain_mvrecon(vids, anns, cfg)[:1], cfg).to_bytes()
    assert a == b


def test_encoder_checkpoint_round_trip():
    vids, anns = zip(*(sg.generate_clip(s, sg.ClipConfig(frames=8, max_tube_frames=4)) for s in range(2)))
    cfg = mv.MVReconConfig(encoder=TINY, scales=(2,), steps=2)
    model, losses = mv.pretrain_mvrecon(vids, anns, cfg)
    ckpt = container.Checkpoint.from_bytes(mv.encoder_checkpoint(model, cfg, losses).to_bytes())
    enc = mv.load_encoder(ckpt, TINY)
    clip = torch.from_numpy(vids[0])
    assert torch.equal(enc.encode_clip(clip), model.encoder.encode_clip(clip))
    assert ckpt.arrays["log.loss"].tolist() == losses
