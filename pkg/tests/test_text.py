import numpy as np
import pytest
import torch

from helpers import fd_gradcheck
from promptseg3d.errors import ShapeError, StateError, ValidationError
from promptseg3d.text import (OOV_ID, PAD_ID, ClinicalBackboneAdapter, TextEncoder, TextPrompt, Vocabulary,
                              encode_text, tokenize)


def test_case_and_punctuation_folding():
    assert tokenize(TextPrompt("Segment the sphere.")) == tokenize(TextPrompt("segment the sphere"))


def test_oov_position():
    ids = tokenize(TextPrompt("segment the xyzzy"))
    assert ids[2] == OOV_ID and ids[0] != OOV_ID


def test_exact_length_has_no_padding():
    ids = tokenize(TextPrompt("segment the spherical lesion"), max_tokens=4)
    assert len(ids) == 4 and PAD_ID not in ids


def test_truncation_and_padding():
    ids = tokenize(TextPrompt("segment the spherical lesion"), max_tokens=6)
    assert ids[4:] == [PAD_ID, PAD_ID]
    assert len(tokenize(TextPrompt("a " * 30), max_tokens=6)) == 6


def test_empty_prompt():
    with pytest.raises(ValidationError):
        TextPrompt("   ")
    with pytest.raises(ValidationError):
        tokenize(TextPrompt("!!!"))


def test_vocabulary_file_roundtrip(tmp_path):
    vocab = Vocabulary.default()
    vocab.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[PAD_ID] == "<pad>" and lines[OOV_ID] == "<oov>"
    assert lines.index("spherical") == vocab.id("spherical")
    assert Vocabulary.load(tmp_path / "vocab.txt") == vocab


def test_deterministic_in_eval_and_constant_width():
    torch.manual_seed(0)
    enc = TextEncoder(d_t=64)
    a = encode_text("segment the spherical lesion", enc)
    b = encode_text("segment the spherical lesion", enc)
    c = encode_text("segment the cuboid lesion in the peripheral region", enc)
    assert np.array_equal(a.vector, b.vector)
    assert a.vector.shape == c.vector.shape == (64,)
    assert a.encoder_id == enc.encoder_id


def test_padding_invariance():
    torch.manual_seed(0)
    enc = TextEncoder(d_t=16).eval()
    prompt = TextPrompt("segment the spherical lesion")
    with torch.no_grad():
        short = enc(torch.tensor([tokenize(prompt, enc.vocab, 4)]))
        long = enc(torch.tensor([tokenize(prompt, enc.vocab, 16)]))
    assert torch.allclose(short.pooled, long.pooled, atol=1e-6, rtol=0)
    assert torch.allclose(short.tokens, long.tokens[:, :4], atol=1e-6, rtol=0)
    assert not long.mask[0, 4:].any()


def test_zero_parameters_give_zero_vector():
    enc = TextEncoder(d_t=8)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert np.array_equal(encode_text("segment the spherical lesion", enc).vector, np.zeros(8))


def test_gradient_matches_finite_differences():
    torch.manual_seed(3)
    enc = TextEncoder(d_t=8, d_model=8, heads=2, max_tokens=4).double()
    ids = enc.token_ids(["segment the spherical lesion"])
    w = torch.randn(8, dtype=torch.float64)

    def loss():
        return (enc(ids).pooled[0] * w).sum() ** 2

    err, grads = fd_gradcheck(loss, list(enc.parameters()), n_entries=6)
    assert err <= 1e-3
    assert np.abs(grads).max() > 0


def test_uninitialized_encoder():
    with pytest.raises(StateError):
        encode_text("segment the sphere", None)
    with pytest.raises(StateError):
        encode_text("segment the sphere", ClinicalBackboneAdapter(None, 8))


def test_external_backbone_adapter():
    def fake_backbone(text):
        return np.full(8, float(len(text)))

    adapter = ClinicalBackboneAdapter(fake_backbone, 8, "fake")
    emb = encode_text("abc", adapter)
    assert emb.encoder_id == "fake" and np.array_equal(emb.vector, np.full(8, 3.0))
    feats = adapter.encode(["abc", "abcd"])
    assert feats.tokens.shape == (2, 1, 8) and feats.mask.all()
    with pytest.raises(ShapeError):
        ClinicalBackboneAdapter(lambda t: np.zeros(3), 8).encode(["abc"])
