import numpy as np
import pytest
from hypothesis import given, strategies as st

from attnfold.errors import DimensionError, MustPadFirstError, UnpaddableError
from attnfold.hw import KernelGranularity, NpuConfig
from attnfold.tensors import TensorDesc
from attnfold.transforms import (
    DMA_PAD,
    PRODUCER_PAD,
    PadPlan,
    apply_depad,
    apply_pad,
    block_transpose,
    finish_block_transpose,
    intra_block_transpose,
    plan_padding,
    plan_transpose,
    transposed_matmul,
)

GRAN = KernelGranularity()
CFG = NpuConfig()


def naive_transpose(x):
    r, c = len(x), len(x[0])
    return np.array([[x[i][j] for i in range(r)] for j in range(c)])


def per_tile(blocked, block):
    out = blocked.copy()
    for i in range(0, out.shape[0], block):
        for j in range(0, out.shape[1], block):
            out[i:i + block, j:j + block] = intra_block_transpose(out[i:i + block, j:j + block], block)
    return out


# ---- transpose planning


def test_plan_transpose_2byte_folded():
    p = plan_transpose(TensorDesc("K", (64, 64), "K"), CFG, GRAN, folded=True)
    assert p.block == 8 and p.consumer_kernel == "TransposedMatMul"
    assert not p.needs_separate_kernel and not p.element_dma_legal
    assert p.l1_staging_bytes == 0


def test_plan_transpose_4byte_still_blocks_when_folded():
    p = plan_transpose(TensorDesc("K", (64, 64), "K"), NpuConfig(elem_bytes=4), GRAN, folded=True)
    assert p.element_dma_legal and p.block == 8 and p.consumer_kernel == "TransposedMatMul"


def test_plan_transpose_unfolded_needs_kernel():
    p = plan_transpose(TensorDesc("K", (64, 64), "K"), CFG, GRAN, folded=False)
    assert p.needs_separate_kernel and p.consumer_kernel == "Transpose"


def test_plan_transpose_errors():
    with pytest.raises(MustPadFirstError):
        plan_transpose(TensorDesc("K", (60, 64), "K"), CFG, GRAN, folded=True)
    with pytest.raises(DimensionError):
        plan_transpose(TensorDesc("K", (64,), "K"), CFG, GRAN, folded=True)


# ---- block transpose data path


def test_single_block_is_identity():
    x = np.arange(64.0).reshape(8, 8)
    assert np.array_equal(block_transpose(x, 8), x)


def test_16x8_composition():
    x = np.arange(128.0).reshape(16, 8)
    b = block_transpose(x, 8)
    assert b.shape == (8, 16)
    assert np.array_equal(b[:, :8], x[:8]) and np.array_equal(b[:, 8:], x[8:])
    assert np.array_equal(per_tile(b, 8), naive_transpose(x))


def test_block_transpose_twice_restores():
    x = np.random.default_rng(0).standard_normal((24, 40))
    assert np.array_equal(block_transpose(block_transpose(x, 8), 8), x)


def test_intra_block_examples():
    eye = np.eye(8)
    assert np.array_equal(intra_block_transpose(eye), eye)
    t = np.add.outer(np.arange(8) * 8, np.arange(8))
    out = intra_block_transpose(t, 8)
    assert all(out[i, j] == j * 8 + i for i in range(8) for j in range(8))
    with pytest.raises(DimensionError):
        intra_block_transpose(np.zeros((8, 4)))


def test_random_24x16_composition():
    x = np.random.default_rng(1).standard_normal((24, 16))
    b = block_transpose(x, 8)
    assert np.array_equal(per_tile(b, 8), naive_transpose(x))
    assert np.array_equal(finish_block_transpose(b, 8), x.T)


def test_block_transpose_requires_multiple():
    with pytest.raises(DimensionError):
        block_transpose(np.zeros((12, 8)), 8)


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([2, 4, 8]), st.integers(0, 2**31))
def test_block_transpose_matmul_property(rb, cb, block, seed):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((rb * block, cb * block))
    q = rng.standard_normal((3, cb * block))
    assert np.array_equal(finish_block_transpose(block_transpose(k, block), block), k.T)
    np.testing.assert_allclose(transposed_matmul(q, block_transpose(k, block), block), q @ k.T, rtol=0, atol=1e-12)


# ---- padding


def test_vit_pad():
    p = plan_padding(TensorDesc("Q", (197, 64), "Q"), GRAN, CFG, False)
    assert p.padded_dims == (200, 64) and p.pads == (3, 0)
    assert p.mechanism == DMA_PAD and p.num_padded_dims == 1 and p.depad == (197, 64)


def test_aligned_is_zero_pad():
    p = plan_padding(TensorDesc("Q", (128, 64), "Q"), GRAN, CFG, False)
    assert p.pads == (0, 0) and p.mechanism == DMA_PAD and p.num_padded_dims == 0


def test_four_ragged_dims():
    t = TensorDesc("X", (3, 5, 7, 9), "Intermediate")
    g = (8, 8, 8, 8)
    with pytest.raises(UnpaddableError):
        plan_padding(t, GRAN, CFG, False, granules=g)
    assert plan_padding(t, GRAN, CFG, True, granules=g).mechanism == PRODUCER_PAD


def test_mask_pads_with_fill():
    p = plan_padding(TensorDesc("M", (5, 5), "Mask"), GRAN, CFG, False)
    out = apply_pad(np.zeros((5, 5)), p)
    assert out.shape == (8, 8)
    assert np.all(out[5:, :] == -1e9) and np.all(out[:, 5:] == -1e9) and np.all(out[:5, :5] == 0)


def test_pad_zeros():
    p = plan_padding(TensorDesc("Q", (3, 3), "Q"), GRAN, CFG, False)
    assert np.array_equal(apply_pad(np.zeros((3, 3)), p), np.zeros((8, 8)))


def test_depad_pad_round_trip():
    x = np.random.default_rng(2).standard_normal((5, 7))
    p = plan_padding(TensorDesc("V", (5, 7), "V"), GRAN, CFG, False)
    assert np.array_equal(apply_depad(apply_pad(x, p), p), x)
    with pytest.raises(DimensionError):
        apply_pad(np.zeros((4, 7)), p)


def test_pad_plan_round_trip():
    p = plan_padding(TensorDesc("M", (197, 197), "Mask"), GRAN, CFG, False)
    assert PadPlan.from_dict(p.to_dict()) == p


@given(st.lists(st.integers(1, 40), min_size=1, max_size=3), st.integers(0, 2**31))
def test_pad_then_depad_identity(dims, seed):
    x = np.random.default_rng(seed).standard_normal(dims)
    p = plan_padding(TensorDesc("T", tuple(dims), "Intermediate"), GRAN, CFG, False, granules=(8,) * len(dims))
    y = apply_pad(x, p)
    assert all(d % 8 == 0 for d in y.shape)
    assert np.array_equal(apply_depad(y, p), x)
