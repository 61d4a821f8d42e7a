import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import objectness_score_loops
from owvis.sto import (
    ObjectnessHead,
    QueryPartition,
    baseline_scorer,
    contrastive_loss,
    dump_diagnostics,
    objectness_score,
    select_pseudo_unknowns,
)


def random_boxes(rng, q, m):
    boxes = np.empty((q, m, 4))
    for i in range(q):
        for t in range(m):
            kind = rng.integers(5)
            if kind == 0:
                boxes[i, t] = 0
            elif kind == 1:  # smaller than a cell
                boxes[i, t] = [*rng.uniform(0, 1, 2), *rng.uniform(0, 0.05, 2)]
            elif kind == 2:  # partly outside the frame
                boxes[i, t] = [*rng.uniform(-0.2, 1.2, 2), *rng.uniform(0.1, 0.9, 2)]
            else:
                boxes[i, t] = [*rng.uniform(0, 1, 2), *rng.uniform(0, 1, 2)]
    return boxes


def test_objectness_head_shape_and_range():
    head = ObjectnessHead(64)
    o = head(torch.randn(2, 64, 4, 4), (4, 4))
    assert o.shape == (2, 4, 4)
    assert ((o >= 0) & (o <= 1)).all()
    with pytest.raises(ValueError):
        head(torch.randn(2, 64, 8, 8), (4, 4))


def test_objectness_head_zero_weights():
    head = ObjectnessHead(8)
    torch.nn.init.zeros_(head.conv.weight)
    torch.nn.init.zeros_(head.conv.bias)
    assert torch.equal(head(torch.randn(3, 8, 2, 5)), torch.full((3, 2, 5), 0.5))


def test_score_hand_cases():
    o = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert float(objectness_score(o, torch.tensor([[[0.5, 0.5, 1.0, 1.0]]]))[0]) == 2.5
    const = torch.full((3, 4, 4), 0.7, dtype=torch.float64)
    boxes = torch.tensor([[[0.3, 0.6, 0.4, 0.2]] * 3, [[0.5, 0.5, 0.01, 0.01]] * 3], dtype=torch.float64)
    torch.testing.assert_close(objectness_score(const, boxes), torch.full((2,), 2.1, dtype=torch.float64))
    assert objectness_score(torch.zeros(2, 4, 4), torch.rand(5, 2, 4)).abs().max() == 0


def test_score_oracle_50_cases():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m, h, w, q = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 8)
        o = rng.uniform(0, 1, (m, h, w))
        boxes = random_boxes(rng, q, m)
        got = objectness_score(torch.tensor(o), torch.tensor(boxes)).numpy()
        want = objectness_score_loops(o.tolist(), boxes.tolist())
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)


def test_score_gradient_only_through_map():
    o = torch.rand(2, 4, 4, requires_grad=True)
    boxes = torch.rand(3, 2, 4, requires_grad=True)
    objectness_score(o, boxes).sum().backward()
    assert o.grad is not None and o.grad.abs().sum() > 0
    assert boxes.grad is None


def test_baseline_matches_score_of_channel_mean():
    feats = torch.rand(2, 16, 4, 4)
    boxes = torch.rand(5, 2, 4)
    torch.testing.assert_close(baseline_scorer(feats, boxes), objectness_score(feats.mean(1), boxes))
    assert baseline_scorer(torch.zeros(2, 16, 4, 4), boxes).abs().max() == 0
    full = torch.tensor([[[0.5, 0.5, 1.0, 1.0]] * 2])
    torch.testing.assert_close(baseline_scorer(torch.full((2, 8, 3, 3), 0.25), full), torch.tensor([0.5]))


def test_partition_hand_case():
    scores = [0.9, 0.1, 0.7, 0.5, 0.3]
    p = select_pseudo_unknowns(scores, [2], 2)
    assert p.pseudo_unknown == (0, 3)
    assert p.background == (4, 1)
    assert select_pseudo_unknowns(scores, [2], 0).pseudo_unknown == ()
    assert select_pseudo_unknowns(scores, [2], 4).background == ()


def test_partition_clamps_with_warning(caplog):
    p = select_pseudo_unknowns([0.1, 0.2, 0.3], [0], 5)
    assert p.pseudo_unknown == (2, 1) and p.background == ()
    assert "clamping" in caplog.text


def test_partition_ties_go_to_lower_index():
    p = select_pseudo_unknowns([0.5] * 6, [1], 2)
    assert p.pseudo_unknown == (0, 2)
    assert p.background == (3, 4, 5)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_partition_property(data):
    q = data.draw(st.integers(1, 40))
    k = data.draw(st.integers(0, q))
    p_u = data.draw(st.integers(0, q - k))
    scores = data.draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]) | st.floats(0, 3), min_size=q, max_size=q))
    matched = data.draw(st.permutations(range(q)))[:k]
    part = select_pseudo_unknowns(scores, matched, p_u)
    sets = [set(part.matched_known), set(part.pseudo_unknown), set(part.background)]
    assert [len(s) for s in sets] == [k, p_u, q - k - p_u]
    assert set.union(*sets) == set(range(q))
    assert sum(len(s) for s in sets) == q
    assert select_pseudo_unknowns(scores, matched, p_u) == part


def test_contrastive_values():
    part = QueryPartition((0,), (1,), (2, 3, 4))
    s = torch.tensor([0.5, 0.5, 0.2, 0.1, 0.0], dtype=torch.float64)
    assert float(contrastive_loss(s, part)) == pytest.approx(math.exp(-0.7), abs=1e-12)
    assert float(contrastive_loss(torch.tensor([1.0, 1.0, 2.0], dtype=torch.float64), QueryPartition((0,), (1,), (2,)))) == 1.0
    two = contrastive_loss(torch.tensor([2.5, 0.5], dtype=torch.float64), QueryPartition((0,), (), (1,)))
    assert abs(float(two) - 0.135335) < 1e-6


def test_contrastive_cap_and_normalized_variant():
    s = torch.tensor([0.0] + [5.0] * 10, dtype=torch.float64)
    part = QueryPartition((0,), (), tuple(range(1, 11)))
    assert float(contrastive_loss(s, part)) == pytest.approx(math.exp(30))
    assert float(contrastive_loss(s, part, normalize=True)) == pytest.approx(math.exp(5))


def test_contrastive_monotonicity():
    part = QueryPartition((0,), (1,), (2, 3))
    base = torch.tensor([0.4, 0.3, 0.2, 0.6], dtype=torch.float64)
    ref = float(contrastive_loss(base, part))
    for i in range(4):
        up = base.clone()
        up[i] += 0.1
        v = float(contrastive_loss(up, part))
        assert (v < ref) if i in (0, 1) else (v > ref)


def test_contrastive_gradient_finite_differences():
    rng = np.random.default_rng(3)
    o = torch.tensor(rng.uniform(0, 1, (2, 4, 4)), requires_grad=True)
    boxes = torch.tensor(random_boxes(rng, 6, 2))
    part = QueryPartition((0, 1), (2,), (3, 4, 5))
    loss = contrastive_loss(objectness_score(o, boxes), part)
    (g,) = torch.autograd.grad(loss, o)
    eps = 1e-6
    for idx in np.ndindex(*o.shape):
        with torch.no_grad():
            x = o.detach().clone()
            x[idx] += eps
            up = float(contrastive_loss(objectness_score(x, boxes), part))
            x[idx] -= 2 * eps
            down = float(contrastive_loss(objectness_score(x, boxes), part))
        fd = (up - down) / (2 * eps)
        an = float(g[idx])
        if abs(an) <= 1e-12 * float(g.abs().max()):
            assert abs(fd) < 1e-8
        else:
            assert abs(fd - an) / abs(an) < 1e-4


def test_dump_diagnostics(tmp_path):
    part = QueryPartition((0,), (1,), (2,))
    dump_diagnostics(tmp_path / "d.npz", torch.rand(2, 4, 4), torch.rand(3), part)
    z = np.load(tmp_path / "d.npz")
    assert z["o_map"].shape == (2, 4, 4)
    assert list(z["background"]) == [2]
