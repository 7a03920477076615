import pytest
import torch

from vct.detokenizer import CNNDetokenizer, ConceptDetokenizer, TransformerDetokenizer, build_detokenizer
from vct.model import VCT

from structural import order_invariance_error


@pytest.mark.parametrize("seed", range(5))
def test_concept_order_invariance(seed):
    assert order_invariance_error(seed) < 1e-5


def test_identical_rows_equal_single_token():
    torch.manual_seed(0)
    det = ConceptDetokenizer(16, 32, 2, 4)
    c = torch.randn(2, 1, 32)
    assert (det(c.expand(-1, 5, -1)) - det(c)).abs().max() < 1e-5


def test_decode_image_order_invariant_and_deterministic():
    torch.manual_seed(0)
    model = VCT(image_size=16, patch=8, num_concepts=5, dim=16, enc_depth=1, dec_depth=1, heads=2)
    c = torch.randn(2, 5, 16)
    perm = torch.randperm(5)
    a, b = model.decode_image(c), model.decode_image(c)
    assert torch.equal(a, b)
    assert (model.decode_image(c[:, perm]) - a).abs().max() < 1e-5


def test_concept_pos_embedding_breaks_order_invariance():
    torch.manual_seed(0)
    model = VCT(image_size=16, patch=8, num_concepts=5, dim=16, enc_depth=1, dec_depth=1, heads=2,
                concept_pos_embedding=True)
    with torch.no_grad():
        model.concept_pos.normal_(0, 1.0)
    c = torch.randn(2, 5, 16)
    assert (model.decode_image(c[:, [1, 0, 2, 3, 4]]) - model.decode_image(c)).abs().max() > 1e-4


@pytest.mark.parametrize("kind,cls", [("concept", ConceptDetokenizer), ("transformer", TransformerDetokenizer),
                                      ("cnn", CNNDetokenizer)])
def test_ablation_detokenizers_shapes(kind, cls):
    det = build_detokenizer(kind, 16, 32, 2, 4)
    assert isinstance(det, cls)
    assert det(torch.randn(3, 6, 32)).shape == (3, 16, 32)


def test_cnn_detokenizer_rejects_odd_grid():
    with pytest.raises(ValueError):
        CNNDetokenizer(9, 32)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ConceptDetokenizer(16, 32, 1, 4)(torch.zeros(1, 3, 31))
