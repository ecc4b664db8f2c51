import math
import warnings

import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from pmt.core import DomainId
from pmt.protobank import (BatchUpdate, PrototypeBank, alignment_score, compute_update_value, cosine_similarity,
                           global_prototype, global_prototypes, prototype_loss, separation_score, update_prototype)

D = torch.float64


def bank_from(protos, counts):
    return PrototypeBank(torch.tensor(protos, dtype=D), torch.tensor(counts, dtype=torch.long))


def random_bank(gen, domains, classes, dim, p_active=0.7):
    counts = (torch.rand(domains, classes, generator=gen) < p_active).long() * torch.randint(1, 9, (domains, classes), generator=gen)
    protos = torch.randn(domains, classes, dim, generator=gen, dtype=D) * (counts > 0)[..., None]
    return PrototypeBank(protos, counts)


def test_cosine_examples():
    u = torch.tensor([1.0, 2.0, 3.0], dtype=D)
    assert float(cosine_similarity(u, u)) == pytest.approx(1.0)
    assert float(cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0
    assert float(cosine_similarity(u, torch.tensor([4.0, 5.0, 6.0], dtype=D))) == pytest.approx(0.974631846, abs=1e-9)


def test_cosine_with_zero_vector_is_zero():
    assert float(cosine_similarity(torch.zeros(3), torch.ones(3))) == 0.0


def test_update_value_examples():
    v = torch.tensor([0.3, -1.0])
    u = compute_update_value([v], DomainId(0), 1)
    assert torch.equal(u.value, v) and u.occurrences == 1
    u = compute_update_value([torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])], DomainId(2), 0)
    assert u.value.tolist() == [0.5, 0.5] and u.occurrences == 2


def test_update_value_matches_summation():
    vs = torch.randn(7, 5, dtype=D, generator=torch.Generator().manual_seed(3))
    u = compute_update_value(vs, DomainId(0), 0)
    brute = [math.fsum(float(vs[i, t]) for i in range(7)) / 7 for t in range(5)]
    assert torch.allclose(u.value, torch.tensor(brute, dtype=D), atol=1e-12, rtol=0)


def test_update_value_empty_rejected():
    with pytest.raises(ValueError):
        compute_update_value([], DomainId(0), 0)


def test_first_and_second_update():
    bank = PrototypeBank.zeros(2, 1, 2, dtype=D)
    a, b = torch.tensor([1.0, 3.0], dtype=D), torch.tensor([3.0, -1.0], dtype=D)
    bank = update_prototype(bank, BatchUpdate(DomainId(1), 0, a, 4))
    assert torch.equal(bank.protos[1, 0], a) and int(bank.counts[1, 0]) == 1
    bank = update_prototype(bank, BatchUpdate(DomainId(1), 0, b, 1))
    assert torch.equal(bank.protos[1, 0], (a + b) / 2)
    # counts are update events, not sample occurrences
    assert int(bank.counts[1, 0]) == 2


def test_update_is_functional():
    bank = PrototypeBank.zeros(2, 2, 3)
    update_prototype(bank, BatchUpdate(DomainId(0), 1, torch.ones(3), 1))
    assert bank.num_active() == 0


def test_running_mean_of_nine():
    gen = torch.Generator().manual_seed(0)
    vs = torch.randn(9, 4, dtype=D, generator=gen)
    bank = PrototypeBank.zeros(3, 2, 4, dtype=D)
    for v in vs:
        bank = update_prototype(bank, BatchUpdate(DomainId(2), 1, v, 1))
    assert torch.allclose(bank.protos[2, 1], vs.mean(0), atol=1e-9, rtol=0)
    bank.check()


def test_history_is_constant_for_gradients():
    q0 = torch.tensor([1.0, 2.0], requires_grad=True)
    bank = update_prototype(PrototypeBank.zeros(2, 1, 2), BatchUpdate(DomainId(0), 0, q0, 1))
    q1 = torch.tensor([0.5, 0.0], requires_grad=True)
    bank = update_prototype(bank, BatchUpdate(DomainId(0), 0, q1, 1))
    bank.protos[0, 0].sum().backward()
    assert q0.grad is None or not q0.grad.any()
    assert q1.grad.tolist() == [0.5, 0.5]


def test_alignment_examples():
    v = [0.3, -0.2, 0.9]
    assert float(alignment_score(bank_from([[v], [v], [v]], [[1], [2], [5]]))) == pytest.approx(2.0, abs=1e-12)
    half = [[[1.0, 0.0]], [[0.5, math.sqrt(3) / 2]]]
    assert float(alignment_score(bank_from(half, [[1], [1]]))) == pytest.approx(1.0, abs=1e-12)
    assert float(alignment_score(PrototypeBank.zeros(3, 2, 4))) == 0.0


def test_alignment_skips_inactive():
    bank = bank_from([[[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 0.0]]], [[1], [1], [0]])
    # two ordered pairs of cos 1, divided by C*K = 3
    assert float(alignment_score(bank)) == pytest.approx(2 / 3)


def test_global_prototype_examples():
    a, b = [1.0, 0.0], [0.0, 4.0]
    one = bank_from([[a], [b], [[9.0, 9.0]]], [[2], [0], [7]])
    assert global_prototype(one, 0).tolist() == a
    two = bank_from([[a], [b], [[9.0, 9.0]]], [[1], [3], [7]])
    assert global_prototype(two, 0).tolist() == [0.25, 3.0]


def test_global_prototype_undefined():
    bank = bank_from([[[1.0]], [[0.0]], [[2.0]]], [[0], [0], [3]])
    with pytest.raises(ValueError):
        global_prototype(bank, 0)


def test_global_prototypes_random():
    gen = torch.Generator().manual_seed(5)
    bank = random_bank(gen, 4, 3, 6, p_active=1.0)
    ref = oracles.global_protos(bank.protos.tolist(), bank.counts.tolist())
    assert torch.allclose(global_prototypes(bank), torch.tensor(ref, dtype=D), atol=1e-12, rtol=0)


def test_separation_examples():
    assert float(separation_score(bank_from([[[1.0, 2.0]], [[3.0, 1.0]], [[0.0, 1.0]]], [[1], [2], [1]]))) == 0.0
    ortho = bank_from([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]], [[1, 1], [0, 0]])
    assert float(separation_score(ortho)) == 0.0


def test_single_class_loss_is_negative_alignment():
    bank = bank_from([[[1.0, 2.0]], [[3.0, 1.0]], [[0.0, 1.0]]], [[1], [2], [1]])
    loss = prototype_loss(bank)
    assert not loss.separation_active
    assert float(loss.value) == pytest.approx(-float(alignment_score(bank)))


def test_inactive_loss_warns():
    with pytest.warns(RuntimeWarning):
        loss = prototype_loss(PrototypeBank.zeros(3, 3, 4))
    assert loss.inactive and float(loss.value) == 0.0


def test_ablation_flags_select_terms():
    bank = random_bank(torch.Generator().manual_seed(1), 3, 3, 5, p_active=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert float(prototype_loss(bank, use_alignment=False).value) == pytest.approx(float(separation_score(bank)))
        assert float(prototype_loss(bank, use_separation=False).value) == pytest.approx(-float(alignment_score(bank)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_scores_match_loop_oracle_and_bounds(n, k, d, seed):
    bank = random_bank(torch.Generator().manual_seed(seed), n + 1, k, d)
    protos, counts = bank.protos.tolist(), bank.counts.tolist()
    align, sep = float(alignment_score(bank)), float(separation_score(bank))
    assert align == pytest.approx(oracles.alignment(protos, counts), abs=1e-12)
    assert sep == pytest.approx(oracles.separation(protos, counts), abs=1e-12)
    assert -2 - 1e-12 <= align <= 2 + 1e-12
    assert abs(sep) <= k * (k - 1) + 1e-12
    if k == 1:
        assert sep == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 2 ** 31 - 1))
def test_scale_robustness(c, seed):
    gen = torch.Generator().manual_seed(seed)
    emb = torch.randn(3, 2, 4, dtype=D, generator=gen)

    def scores(scale):
        bank = PrototypeBank.zeros(3, 2, 4, dtype=D)
        for j in range(3):
            for k in range(2):
                bank = update_prototype(bank, compute_update_value(scale * emb[j, k:k + 1], DomainId(j), k))
        return float(alignment_score(bank)), float(separation_score(bank))

    assert scores(c) == pytest.approx(scores(1.0), abs=1e-9)


def test_state_dict_round_trip():
    bank = random_bank(torch.Generator().manual_seed(2), 3, 3, 4)
    sd = bank.state_dict()
    assert set(sd) == {"protobank.protos", "protobank.counts"}
    back = PrototypeBank.from_state_dict(sd)
    assert torch.equal(back.protos, bank.protos) and torch.equal(back.counts, bank.counts)
