import math

import numpy as np
import pytest
import torch

from vct.gradcheck import tiny_model
from vct.losses import (concept_disentangling_loss, draw_swaps, reconstruction_loss, swap_batch, swap_tokens,
                        total_loss)
from vct.model import VCT

import oracles

B = 4


def oracle_instance(seed=0):
    """D = 8, M = 3, N = 4, B = 4 in float64."""
    model = tiny_model(seed)
    x = torch.rand(B, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    partners, slots = draw_swaps(B, 3, np.random.default_rng(seed))
    return model, x, partners, slots


def reference_loss(model, x, partners, slots):
    weights = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    return oracles.disentangling_loss(x.numpy(), weights, partners.numpy(), slots.numpy(),
                                      patch=8, depth=2, heads=2)


def test_reconstruction_loss_examples():
    x = torch.rand(2, 3, 8, 8)
    assert reconstruction_loss(x, x).item() == 0.0
    assert reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4)).item() == 1.0
    a, b = np.random.default_rng(0).random((2, 2, 3, 8, 8))
    ref = np.mean((a - b) ** 2)
    assert abs(reconstruction_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - ref) / ref < 1e-6
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_swap_tokens_contract():
    g = torch.Generator().manual_seed(0)
    ci, cj = torch.randn(5, 4, generator=g), torch.randn(5, 4, generator=g)
    assert torch.equal(swap_tokens(ci, ci, 2), ci)
    out = swap_tokens(ci, cj, 2)
    assert torch.equal(out[2], cj[2])
    keep = [0, 1, 3, 4]
    assert torch.equal(out[keep], ci[keep])
    assert torch.equal(swap_tokens(out, ci, 2), ci)
    with pytest.raises(IndexError):
        swap_tokens(ci, cj, 5)


def test_swap_batch_matches_swap_tokens():
    c = torch.randn(4, 5, 3)
    partners, slots = draw_swaps(4, 5, np.random.default_rng(1))
    out = swap_batch(c, partners, slots)
    for i in range(4):
        assert torch.equal(out[i], swap_tokens(c[i], c[partners[i]], int(slots[i])))


def test_draw_swaps_derangement():
    partners, slots = draw_swaps(6, 20, np.random.default_rng(0))
    assert partners.tolist() == [1, 2, 3, 4, 5, 0]
    assert slots.min() >= 0 and slots.max() < 20
    with pytest.raises(ValueError):
        draw_swaps(1, 20, np.random.default_rng(0))


def test_disentangling_loss_matches_straight_line_reference():
    model, x, partners, slots = oracle_instance()
    loss, acc = concept_disentangling_loss(model, model.encode(x), None, swaps=(partners, slots))
    ref, ref_acc = reference_loss(model, x, partners, slots)
    # the instance must not sit at the uniform value, otherwise the check is vacuous
    assert abs(ref - math.log(3)) > 1e-4
    assert abs(loss.item() - ref) / abs(ref) < 1e-5
    assert abs((loss.item() - math.log(3)) - (ref - math.log(3))) < 1e-5 * abs(ref - math.log(3))
    assert acc == ref_acc


def test_degenerate_swap_is_exactly_log_m():
    for m in (3, 20):
        torch.manual_seed(0)
        model = VCT(image_size=16, patch=8, num_concepts=m, dim=16, enc_depth=1, dec_depth=1, heads=2)
        x = torch.rand(4, 3, 16, 16)
        loss, _ = concept_disentangling_loss(model, model.encode(x), np.random.default_rng(0), same_partner=True)
        assert loss.item() == pytest.approx(math.log(m), abs=1e-6)
    assert abs(math.log(20) - 2.9957) < 1e-4


def test_identity_roundtrip_oracle_loss_vanishes_with_gap():
    """If decode+re-encode is the identity, only row l changes and the loss -> 0 as the gap grows."""

    class Identity(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.tokenizer = lambda z, p=None: z
            self.tokenizer.prototypes = None

        def decode_image(self, c):
            return c

        def image_tokens(self, x):
            return x

    model = Identity()
    losses = []
    for scale in (1.0, 5.0, 50.0):
        c = torch.zeros(4, 5, 3, dtype=torch.float64)
        c[:, :, 0] = scale * torch.arange(4, dtype=torch.float64)[:, None]
        loss, acc = concept_disentangling_loss(model, c, np.random.default_rng(0))
        losses.append(loss.item())
        assert acc == 1.0
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-6


def test_loss_invariant_to_prototype_permutation():
    model, x, partners, slots = oracle_instance(1)
    loss, _ = concept_disentangling_loss(model, model.encode(x), None, swaps=(partners, slots))
    perm = torch.tensor([2, 0, 1])
    inverse = torch.argsort(perm)
    with torch.no_grad():
        model.tokenizer.prototypes.copy_(model.tokenizer.prototypes[perm])
    # slot l before the permutation lives at inverse[l] afterwards
    permuted, _ = concept_disentangling_loss(model, model.encode(x), None, swaps=(partners, inverse[slots]))
    assert abs(loss.item() - permuted.item()) < 1e-10


def test_gradient_scoping_with_detach():
    model, x, _, _ = oracle_instance(2)
    report = total_loss(model, x, np.random.default_rng(0), rec_weight=0.0)
    report.total.backward()
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if name.startswith("tokenizer."):
            continue
        assert torch.all(g == 0), name
    assert model.tokenizer.prototypes.grad.abs().sum() > 0


def test_prototypes_can_be_excluded():
    model, x, _, _ = oracle_instance(2)
    loss, _ = concept_disentangling_loss(model, model.encode(x).detach(), np.random.default_rng(0),
                                         grad_prototypes=False)
    loss.backward()
    assert model.tokenizer.prototypes.grad is None or torch.all(model.tokenizer.prototypes.grad == 0)
    assert model.tokenizer.layers[0].cpt_ff.fc1.weight.grad.abs().sum() > 0


def test_without_detach_gradients_flow_everywhere():
    model, x, _, _ = oracle_instance(3)
    report = total_loss(model, x, np.random.default_rng(0), detach=False, rec_weight=0.0)
    report.total.backward()
    for prefix in ("codec.", "tokenizer.", "detokenizer."):
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for n, p in model.named_parameters() if n.startswith(prefix)), prefix


def test_total_loss_composition():
    model, x, _, _ = oracle_instance(4)
    r = total_loss(model, x, np.random.default_rng(0), lambda_dis=1.0)
    assert r.total.item() == pytest.approx(r.rec.item() + r.dis.item(), rel=1e-12)
    r0 = total_loss(model, x, np.random.default_rng(0), lambda_dis=0.0)
    assert r0.total.item() == r0.rec.item()
    assert 0.0 <= r0.swap_accuracy <= 1.0
    assert r0.dis.item() > 0


def test_fresh_model_swap_accuracy_near_chance():
    torch.manual_seed(0)
    model = VCT(image_size=16, patch=8, num_concepts=10, dim=16, enc_depth=1, dec_depth=1, heads=2)
    accs = []
    for k in range(20):
        x = torch.rand(32, 3, 16, 16, generator=torch.Generator().manual_seed(k))
        with torch.no_grad():
            accs.append(concept_disentangling_loss(model, model.encode(x), np.random.default_rng(k))[1])
    assert abs(np.mean(accs) - 0.1) < 0.1


def test_batch_of_one_rejected():
    model, x, _, _ = oracle_instance()
    with pytest.raises(ValueError):
        concept_disentangling_loss(model, model.encode(x[:1]), np.random.default_rng(0))
