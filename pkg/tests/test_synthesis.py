import pytest
import torch

from helpers import fd_gradient_errors, module_tensors
from vfit.deform import deform_aggregate
from vfit.synthesis import SynBlock, build_pyramid, downsample, fuse_multiscale, synthesize_scale, upsample2


def _set_last(head, bias, weight_scale=0.0):
    last = head[-1]
    with torch.no_grad():
        last.weight.mul_(weight_scale)
        last.bias.copy_(torch.as_tensor(bias, dtype=last.bias.dtype))


def _identity_block(C, T, K=25, mask_bias=None):
    blk = SynBlock(C, T, K).double()
    onehot = torch.zeros(K)
    onehot[K // 2] = 1
    _set_last(blk.weight_head, onehot)
    _set_last(blk.mask_head, torch.zeros(T) if mask_bias is None else mask_bias)
    return blk


def test_kernel_shapes_and_zero_offsets():
    blk = SynBlock(8, 4, 25)
    k = blk.predict_kernels(torch.randn(4, 8, 12, 10))
    assert k.weight.shape == (4, 25, 12, 10)
    assert torch.count_nonzero(k.alpha) == 0 and torch.count_nonzero(k.beta) == 0


def test_masks_sum_to_one():
    torch.manual_seed(0)
    blk = SynBlock(6, 4)
    for _ in range(20):
        m = blk.predict_masks(torch.randn(2, 6, 4, 9, 7) * 3)
        assert m.shape == (2, 4, 9, 7)
        assert (m.sum(1) - 1).abs().max() < 1e-6


def test_identical_logits_give_uniform_masks():
    blk = _identity_block(4, 4, mask_bias=torch.full((4,), 0.7))
    m = blk.predict_masks(torch.randn(1, 4, 4, 5, 5, dtype=torch.float64))
    assert torch.allclose(m, torch.full_like(m, 0.25), rtol=0, atol=1e-15)


def test_raised_logit_saturates():
    blk = _identity_block(4, 3, mask_bias=torch.tensor([0.0, 50.0, 0.0]))
    m = blk.predict_masks(torch.randn(1, 4, 3, 5, 5, dtype=torch.float64))
    assert (m[:, 1] > 1 - 1e-8).all()


def test_identity_kernels_uniform_masks_give_mean():
    torch.manual_seed(1)
    blk = _identity_block(4, 4)
    frames = torch.rand(2, 4, 3, 8, 8, dtype=torch.float64)
    out = synthesize_scale(torch.randn(2, 4, 4, 8, 8, dtype=torch.float64), frames, blk)
    assert out.shape == (2, 3, 8, 8)
    torch.testing.assert_close(out, frames.mean(1), rtol=0, atol=1e-14)


def test_selection_mask_returns_chosen_frame():
    torch.manual_seed(2)
    blk = _identity_block(4, 4, mask_bias=torch.tensor([0.0, 0.0, 1000.0, 0.0]))
    frames = torch.rand(1, 4, 3, 6, 6, dtype=torch.float64)
    out = synthesize_scale(torch.randn(1, 4, 4, 6, 6, dtype=torch.float64), frames, blk)
    assert torch.equal(out, frames[:, 2])


def test_misaligned_inputs():
    blk = SynBlock(4, 4)
    with pytest.raises(ValueError):
        blk(torch.randn(1, 4, 4, 8, 8), torch.rand(1, 4, 3, 4, 4))


@pytest.mark.parametrize("seed", range(10))
def test_convex_kernels_stay_within_frame_bounds(seed):
    gen = torch.Generator().manual_seed(seed)
    T, K, H, W = 4, 25, 7, 7
    lo, hi = 0.2, 0.6
    frames = lo + (hi - lo) * torch.rand(T, 3, H, W, generator=gen, dtype=torch.float64)
    w = torch.randn(T, K, H, W, generator=gen, dtype=torch.float64).softmax(1)
    a, b = (torch.randn(T, K, H, W, generator=gen, dtype=torch.float64) * 3 for _ in range(2))
    agg = deform_aggregate(frames, w, a, b)
    masks = torch.randn(T, 1, H, W, generator=gen, dtype=torch.float64).softmax(0)
    out = (masks * agg).sum(0)
    assert out.min() >= lo - 1e-12 and out.max() <= hi + 1e-12


def test_fuse_zero_coarse():
    o0 = torch.rand(1, 3, 16, 16)
    chain = fuse_multiscale([o0, torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4)])
    assert torch.equal(chain[0], o0)


def test_fuse_constant_propagates():
    c = 0.37
    chain = fuse_multiscale([torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 8, 8), torch.full((1, 3, 4, 4), c)])
    assert torch.equal(chain[0], torch.full((1, 3, 16, 16), c))
    assert [t.shape[-1] for t in chain] == [16, 8, 4]


def test_fuse_single_scale():
    o0 = torch.rand(1, 3, 8, 8)
    chain = fuse_multiscale([o0, None, None])
    assert len(chain) == 1 and torch.equal(chain[0], o0)


def test_fuse_is_sum_of_upsampled_terms():
    torch.manual_seed(3)
    o0, o1, o2 = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4)
    expect = upsample2(upsample2(o2) + o1) + o0
    assert torch.equal(fuse_multiscale([o0, o1, o2])[0], expect)


def test_fuse_mismatch():
    with pytest.raises(ValueError):
        fuse_multiscale([torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 6, 6), None])


def test_pyramid_levels():
    x = torch.rand(2, 4, 3, 16, 12)
    p = build_pyramid(x)
    assert p[0] is x
    assert p[1].shape[-2:] == (8, 6) and p[2].shape[-2:] == (4, 3)
    const = torch.full((1, 3, 8, 8), 0.25)
    assert torch.allclose(downsample(const, 4), torch.full((1, 3, 2, 2), 0.25))


def test_synthesis_gradients():
    torch.manual_seed(4)
    C, T, K, H, W = 2, 2, 9, 5, 5
    blk = SynBlock(C, T, K).double()
    # offsets near 0.3 keep the probe away from integer sampling positions
    for head in (blk.alpha_head, blk.beta_head):
        with torch.no_grad():
            head[-1].weight.normal_(0, 0.01)
            head[-1].bias.fill_(0.3)
    feat = torch.randn(1, C, T, H, W, dtype=torch.float64, requires_grad=True)
    frames = torch.rand(1, T, 3, H, W, dtype=torch.float64, requires_grad=True)
    errs = fd_gradient_errors(lambda: blk(feat, frames), module_tensors(blk, feat=feat, frames=frames),
                              max_entries=30)
    assert all(e < 1e-4 for e in errs.values()), errs
