import pytest
import torch

from attrseg.config import EncoderConfig, TextEncoderConfig
from attrseg.encoders import (ClipImageEncoder, SamImageEncoder, TapLevel, TextEmbeddings, TextEncoder,
                              encode_image_clip, encode_image_sam, encode_text)
from attrseg.prompts import AttributeKind

from conftest import make_bank


def test_default_clip_shapes():
    enc = ClipImageEncoder(EncoderConfig())
    maps = encode_image_clip(torch.rand(2, 64, 64, 3), enc)
    assert [m.level for m in maps] == [TapLevel.TAP1, TapLevel.TAP2, TapLevel.TAP_LAST]
    assert all(m.tensor.shape == (2, 8, 8, 96) for m in maps)


def test_sam_taps_are_last_three_and_grid_follows_size():
    enc = SamImageEncoder(EncoderConfig(image_size=96, depth=12, tap_indices=(4, 8, 12)))
    assert enc.config.tap_indices == (10, 11, 12)
    maps = encode_image_sam(torch.rand(96, 96, 3), enc)
    assert all(m.tensor.shape == (12, 12, 96) for m in maps)


def test_taps_differ_and_are_deterministic():
    cfg = EncoderConfig(image_size=16, patch_size=4, depth=3, heads=2, dim=8, tap_indices=(1, 2, 3))
    a, b = ClipImageEncoder(cfg), ClipImageEncoder(cfg)
    x = torch.rand(16, 16, 3)
    ma, mb = a(x), b(x)
    for u, v in zip(ma, mb):
        assert torch.equal(u.tensor, v.tensor)
    assert not torch.allclose(ma[0].tensor, ma[2].tensor)


def test_encoder_parameter_names_follow_branches():
    cfg = EncoderConfig(image_size=16, patch_size=4, depth=3, heads=2, dim=8, tap_indices=(1, 2, 3))
    clip = {n for n, _ in ClipImageEncoder(cfg).named_parameters()}
    sam = {n for n, _ in SamImageEncoder(cfg).named_parameters()}
    assert {"blocks.0.attn.q.weight", "blocks.0.attn.k.weight", "blocks.0.attn.v.weight",
            "blocks.0.attn.out.weight"} <= clip
    assert {"blocks.0.attn.qkv.weight", "blocks.0.attn.proj.weight"} <= sam


def test_bad_image_shape():
    enc = ClipImageEncoder(EncoderConfig(image_size=16, patch_size=4, depth=3, heads=2, dim=8, tap_indices=(1, 2, 3)))
    with pytest.raises(ValueError, match="shape"):
        enc(torch.rand(1, 3, 16, 16))


@pytest.mark.parametrize("kwargs", [dict(image_size=60), dict(tap_indices=(4, 4, 12)), dict(tap_indices=(2, 4, 11)),
                                    dict(dim=10, heads=4)])
def test_encoder_config_invalid(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_text_encoder_padding_and_batch_independence():
    enc = TextEncoder(TextEncoderConfig(vocab_size=64, width=8, depth=1, heads=2), 6)
    texts = ["a red disk", "a much longer description of a blue tile with stripes"]
    both = enc(texts)
    alone = enc(texts[:1])
    assert both.shape == (2, 6)
    torch.testing.assert_close(both[0], alone[0], rtol=0, atol=1e-6)


def test_encode_text_order_and_hash():
    names = ["disk", "tile", "hoop"]
    bank = make_bank(names)
    enc = TextEncoder(TextEncoderConfig(vocab_size=64, width=8, depth=1, heads=2), 6)
    emb = encode_text(enc, bank, names, AttributeKind.COMPREHENSIVE)
    rev = encode_text(enc, bank, names[::-1], AttributeKind.COMPREHENSIVE)
    torch.testing.assert_close(rev.matrix, emb.matrix.flip(0), rtol=0, atol=1e-6)
    assert emb.bank_hash == bank.bank_hash and emb.class_order == names


def test_text_embeddings_validation():
    with pytest.raises(ValueError):
        TextEmbeddings(torch.zeros(2, 4), ["a"], "h")
    with pytest.raises(ValueError):
        TextEmbeddings(torch.zeros(2, 4), ["a", "a"], "h")
