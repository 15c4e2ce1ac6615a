import pytest
import torch

from fblnet.core import ModelConfig, shape_plan
from fblnet.decoder import SKIPS, Decoder, DecoderBlock, decoder_block
from fblnet.errors import ShapeError


def _encoder_feats(plan, batch=2):
    keys = ("C1", "C2", "C3", "C4", "C5", "T1", "T2", "T3", "T4")
    return {key: torch.rand((batch,) + plan[key]) for key in keys}


def test_first_skip_block_default_shapes():
    plan = shape_plan(ModelConfig())
    block = DecoderBlock(256, 128, skip_channels=256).eval()
    with torch.no_grad():
        out = block(
            torch.rand(1, 256, 14, 14),
            torch.rand(1, 256, 14, 14),
            torch.rand(1, 256, 14, 14),
        )
    assert tuple(out.shape[1:]) == plan.d1 == (128, 28, 28)


def test_last_block_has_no_skip(desk_plan):
    block = DecoderBlock(desk_plan.d3[0], desk_plan.d4[0])
    out = decoder_block(torch.rand((2,) + desk_plan.d3), None, None, block)
    assert tuple(out.shape[1:]) == desk_plan.d4


def test_zero_input_gives_bounded_output():
    block = DecoderBlock(64, 32, skip_channels=64).eval()
    zeros = torch.zeros(1, 64, 4, 4)
    with torch.no_grad():
        out = block(zeros, zeros, zeros)
    assert torch.isfinite(out).all()
    assert out.abs().max() < 10


def test_decode_shapes(desk_cfg, desk_plan):
    decoder = Decoder(desk_cfg, desk_plan)
    F = torch.rand((2,) + desk_plan.K_fusion_shape)
    A, decoded = decoder(F, _encoder_feats(desk_plan))
    assert set(decoded) == {"d0", "d1", "d2", "d3", "d4"}
    for key, value in decoded.items():
        assert tuple(value.shape[1:]) == desk_plan[key]
    assert tuple(A.shape[1:]) == desk_plan.A_shape
    assert torch.all((A > 0) & (A < 1))


def test_feedback_node_matches_knowledge_shape(desk_cfg, desk_plan):
    decoder = Decoder(desk_cfg, desk_plan)
    decoded = decoder.decode(
        torch.rand((2,) + desk_plan.K_fusion_shape), _encoder_feats(desk_plan)
    )
    assert tuple(decoded["d2"].shape[1:]) == desk_plan.K_shape


def test_zero_head_predicts_one_half(desk_cfg, desk_plan):
    decoder = Decoder(desk_cfg, desk_plan)
    with torch.no_grad():
        decoder.head.weight.zero_()
        decoder.head.bias.zero_()
    A = decoder.predict_map(torch.rand((2,) + desk_plan.d4))
    torch.testing.assert_close(A, torch.full((2,) + desk_plan.A_shape, 0.5))


def test_skip_wiring():
    assert SKIPS == {"d1": ("C4", "T3"), "d2": ("C3", "T2"), "d3": ("C2", "T1")}


def test_skip_errors():
    block = DecoderBlock(64, 32, skip_channels=64)
    d_prev = torch.rand(1, 64, 4, 4)
    with pytest.raises(ShapeError):
        block(d_prev, torch.rand(1, 64, 4, 4), None)
    with pytest.raises(ShapeError):
        block(d_prev, torch.rand(1, 64, 4, 4), torch.rand(1, 32, 4, 4))
    with pytest.raises(ShapeError):
        block(d_prev, torch.rand(1, 64, 8, 8), torch.rand(1, 64, 8, 8))


def test_decode_rejects_wrong_fused_shape(desk_cfg, desk_plan):
    decoder = Decoder(desk_cfg, desk_plan)
    with pytest.raises(ShapeError):
        decoder.decode(torch.rand(2, 64, 8, 8), _encoder_feats(desk_plan))
