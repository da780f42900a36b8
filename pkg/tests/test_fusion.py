import pytest
import torch

import gradcases
from bias_asd.fusion import (
    BIASModel,
    Fusion,
    apply_modality_mask,
    keep_mask,
    modality_slices,
    total_loss,
)
from bias_asd.nn_blocks import weighted_cross_entropy


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return BIASModel(gradcases._tiny_cfg()).eval()


def _inputs(seed, n=2, t=4, size=16):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, t, 3, size, size, generator=g), torch.rand(n, t, 3, size, size, generator=g),
            torch.randn(n, t, 4, 13, generator=g))


def test_modality_layout_is_audio_face_body():
    s = modality_slices(128)
    assert (s["audio"], s["face"], s["body"]) == (slice(0, 128), slice(128, 256), slice(256, 384))


def test_keep_mask():
    assert keep_mask(()) is None
    m = keep_mask(("body",), 4)
    assert m.tolist() == [True] * 8 + [False] * 4
    with pytest.raises(ValueError):
        keep_mask(("video",))


def test_fusion_concatenates_and_gates():
    torch.manual_seed(1)
    fusion = Fusion(8, 2)
    a, f, b = torch.randn(2, 5, 8), torch.randn(2, 5, 8), torch.randn(2, 5, 8)
    seq = fusion(a, f, b)
    assert seq.values.shape == (2, 5, 24)
    assert seq.fusion_gate.shape == (2, 24)
    torch.testing.assert_close(seq.raw, torch.cat([a, f, b], -1))
    torch.testing.assert_close(seq.values, seq.raw * seq.fusion_gate[:, None])


def test_fusion_rejects_mismatched_lengths():
    fusion = Fusion(8, 2)
    with pytest.raises(ValueError):
        fusion(torch.randn(1, 5, 8), torch.randn(1, 4, 8), torch.randn(1, 5, 8))


def test_model_output_shapes(tiny_model):
    face, body, mfcc = _inputs(2)
    with torch.no_grad():
        out = tiny_model(face, body, mfcc)
    assert out.logits.shape == (2, 4, 2)
    assert set(out.aux_logits) == {"audio", "face", "body"}
    assert out.fused.values.shape == (2, 4, 24)
    assert out.scores.shape == (2, 4)
    assert ((out.scores >= 0) & (out.scores <= 1)).all()


def test_single_clip_input_is_batched(tiny_model):
    face, body, mfcc = _inputs(3, n=1)
    with torch.no_grad():
        a = tiny_model(face, body, mfcc).logits
        b = tiny_model(face[0], body[0], mfcc[0]).logits
    assert torch.equal(a, b)


@pytest.mark.parametrize("zeroed", ["audio", "face", "body"])
def test_zeroed_modality_is_bitwise_irrelevant(tiny_model, zeroed):
    face, body, mfcc = _inputs(4)
    g = torch.Generator().manual_seed(5)
    replaced = {"face": face, "body": body, "audio": mfcc}
    replaced[zeroed] = torch.randn(replaced[zeroed].shape, generator=g) * 10
    with torch.no_grad():
        ref = tiny_model(face, body, mfcc, zero=(zeroed,), aux=False)
        alt = tiny_model(replaced["face"], replaced["body"], replaced["audio"], zero=(zeroed,), aux=False)
    assert torch.equal(ref.logits, alt.logits)
    assert (ref.fused.fusion_gate[:, modality_slices(8)[zeroed]] == 0).all()


def test_apply_modality_mask_zeroes_slice(tiny_model):
    face, body, mfcc = _inputs(6)
    with torch.no_grad():
        seq = tiny_model(face, body, mfcc).fused
    masked = apply_modality_mask(seq, ("face",))
    assert (masked.values[..., 8:16] == 0).all()
    torch.testing.assert_close(masked.values[..., :8], seq.values[..., :8])
    assert apply_modality_mask(seq, ()) is seq


def test_total_loss_combines_fused_and_auxiliary_terms():
    g = torch.Generator().manual_seed(7)
    logits = torch.randn(2, 3, 2, generator=g)
    aux = {m: torch.randn(2, 3, 2, generator=g) for m in ("audio", "face", "body")}
    labels = torch.tensor([[0, 1, 1], [1, 0, 1]])
    expected = weighted_cross_entropy(logits, labels) + 0.4 * sum(
        weighted_cross_entropy(aux[m], labels) for m in aux)
    torch.testing.assert_close(total_loss(logits, aux, labels), expected)
    torch.testing.assert_close(total_loss(logits, aux, labels, aux_weights=(0, 0, 0)),
                               weighted_cross_entropy(logits, labels))
