import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradient_check, mmd_brute, refined_from_words, tiny
from xtm import backbone
from xtm.backbone import DTYPE
from xtm.errors import ConfigError, EmptySupport
from xtm.mmd import (
    KernelConfig,
    RawSupport,
    WeightedSample,
    build_raw_distribution,
    build_refined_distribution,
    make_sample,
    median_bandwidth,
    median_of_pairs,
    mmd_loss,
    mmd_squared,
    prepare_targets,
    raw_support,
    raw_weights,
)
from xtm.refiner import RefinedTopic, TopicVotes


def unit(*v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_raw_weights_normalize_over_both_languages():
    beta1 = torch.tensor([[0.3], [0.2], [0.5]], dtype=DTYPE)
    beta2 = torch.tensor([[0.2], [0.1], [0.7]], dtype=DTYPE)
    sup = RawSupport(0, (0, 1), (0, 1), (), np.zeros((4, 2)))
    assert torch.allclose(raw_weights(beta1, beta2, sup), torch.tensor([0.375, 0.25, 0.25, 0.125], dtype=DTYPE))


def test_raw_weights_identity_when_already_normalized():
    beta1 = torch.tensor([[0.4], [0.1]], dtype=DTYPE)
    beta2 = torch.tensor([[0.3], [0.2]], dtype=DTYPE)
    sup = RawSupport(0, (0, 1), (0, 1), (), np.zeros((4, 2)))
    assert torch.allclose(raw_weights(beta1, beta2, sup), torch.tensor([0.4, 0.1, 0.3, 0.2], dtype=DTYPE))


def test_raw_support_drops_unembedded_words():
    tt = tiny(top_n=2)
    top1 = backbone.top_words(tt.model, tt.corpus.vocab1, "l1", 0, 2)
    del tt.table.word_vecs[top1[1]]
    sup = raw_support(tt.model, 0, 2, tt.corpus.vocab1, tt.corpus.vocab2, tt.table)
    assert len(sup.labels) == 3 and ("l1", top1[1]) not in sup.labels
    dist = build_raw_distribution(tt.model, 0, 2, tt.corpus.vocab1, tt.corpus.vocab2, tt.table)
    b1, b2 = tt.model.beta("l1"), tt.model.beta("l2")
    raw = torch.cat([b1[list(sup.idx1), 0], b2[list(sup.idx2), 0]])
    assert torch.allclose(dist.weights, raw / raw.sum())
    tt.table.word_vecs.clear()
    with pytest.raises(EmptySupport):
        raw_support(tt.model, 0, 2, tt.corpus.vocab1, tt.corpus.vocab2, tt.table)


def _refined(c1, c2):
    votes = TopicVotes(0, c1, c2, {w: 1 for w in c1}, {w: 1 for w in c2}, 5)
    return RefinedTopic(0, votes, tuple(c1), tuple(c2))


def test_refined_distribution_weights():
    tt = tiny()
    table = tt.table
    for w in ("song", "album", "音乐"):
        table.word_vecs[w] = unit(1, 2, 3, 4, 5)
    d = build_refined_distribution(_refined({"song": 5, "album": 3}, {"音乐": 5}), table)
    assert d.labels == (("l1", "song"), ("l1", "album"), ("l2", "音乐"))
    assert torch.allclose(d.weights, torch.tensor([5 / 13, 3 / 13, 5 / 13], dtype=DTYPE))
    assert build_refined_distribution(_refined({"song": 7}, {}), table).weights.tolist() == [1.0]
    uniform = build_refined_distribution(_refined({"song": 2, "album": 2}, {"音乐": 2}), table)
    assert torch.allclose(uniform.weights, torch.full((3,), 1 / 3, dtype=DTYPE))


def test_median_of_pairs():
    assert median_of_pairs([0.1, 0.4, 0.9]) == (0.4, False)
    assert median_of_pairs([0.5]) == (0.5, False)
    assert median_of_pairs([0.0, 0.0]) == (1e-6, True)
    assert median_of_pairs([]) == (1e-6, True)


def test_median_bandwidth_identical_points():
    x = unit(1, 0)
    p = make_sample([("l1", "a"), ("l1", "b")], [x, x], [1, 1])
    s2, degenerate = median_bandwidth(p, p)
    assert degenerate and s2 == 1e-6


def test_median_bandwidth_two_points():
    p = make_sample([("l1", "a")], [unit(1, 0)], [1])
    q = make_sample([("l2", "b")], [unit(0, 1)], [1])
    assert median_bandwidth(p, q) == (1.0, False)


def test_mmd_closed_form():
    p = make_sample([("l1", "x")], [unit(1, 0)], [1])
    q = make_sample([("l2", "y")], [unit(0, 1)], [1])
    assert abs(float(mmd_squared(p, q, [1.0])) - (2 - 2 * math.exp(-0.5))) < 1e-12


def test_mmd_identity():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(5, 4))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    p = make_sample([("l1", str(i)) for i in range(5)], pts, rng.random(5))
    assert float(mmd_squared(p, p, KernelConfig())) < 1e-12


@given(st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_mmd_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m, d = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 6))
    xp, xq = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    xp /= np.linalg.norm(xp, axis=1, keepdims=True)
    xq /= np.linalg.norm(xq, axis=1, keepdims=True)
    p = make_sample([("l1", f"p{i}") for i in range(n)], xp, rng.random(n) + 0.01)
    q = make_sample([("l2", f"q{i}") for i in range(m)], xq, rng.random(m) + 0.01)
    s2 = float(rng.uniform(0.1, 3))
    brute = mmd_brute(xp.tolist(), p.weights.tolist(), xq.tolist(), q.weights.tolist(), s2)
    assert abs(float(mmd_squared(p, q, [s2])) - brute) < 1e-9
    assert torch.equal(mmd_squared(p, q, [s2]), mmd_squared(q, p, [s2]))


def test_multi_kernel_averages():
    p = make_sample([("l1", "x")], [unit(1, 0)], [1])
    q = make_sample([("l2", "y")], [unit(1, 1)], [1])
    a, b = float(mmd_squared(p, q, [0.5])), float(mmd_squared(p, q, [2.0]))
    assert abs(float(mmd_squared(p, q, KernelConfig.parse("multi:0.5,2"))) - (a + b) / 2) < 1e-15


def test_kernel_config_parse():
    assert KernelConfig.parse("median").mode == "median"
    assert KernelConfig.parse("fixed:0.25").values == (0.25,)
    assert KernelConfig.parse("multi:0.1,1,10").values == (0.1, 1.0, 10.0)
    for bad in ("gauss", "fixed:", "fixed:-1", "multi:a,b"):
        with pytest.raises(ConfigError):
            KernelConfig.parse(bad)


def test_weighted_sample_validation():
    with pytest.raises(ValueError):
        WeightedSample((("l1", "a"),), np.zeros((1, 2)), torch.tensor([0.5], dtype=DTYPE))
    with pytest.raises(ValueError):
        WeightedSample((), np.zeros((0, 2)), torch.zeros(0, dtype=DTYPE))


def _set_topic(model, lang, k, probs):
    """Make topic ``k`` put (nearly) all mass on the first len(probs) words, proportional to ``probs``."""
    with torch.no_grad():
        logits = model.logits(lang)
        logits[:, k] = -60.0
        logits[:len(probs), k] = torch.log(torch.tensor(probs, dtype=DTYPE))


def test_loss_zero_when_refined_equals_raw():
    tt = tiny(top_n=3)
    m, v1, v2 = tt.model, tt.corpus.vocab1, tt.corpus.vocab2
    for k in range(3):
        _set_topic(m, "l1", k, [3.0, 2.0, 1.0])
        _set_topic(m, "l2", k, [3.0, 2.0, 1.0])
    top1, top2 = list(v1.tokens[:3]), list(v2.tokens[:3])
    refined = {k: _refined(dict(zip(top1, (3, 2, 1))), dict(zip(top2, (3, 2, 1)))) for k in range(3)}
    refined = {k: RefinedTopic(k, r.votes, r.selected_l1, r.selected_l2) for k, r in refined.items()}
    targets = prepare_targets(m, refined, KernelConfig(), 3, v1, v2, tt.table)
    m.zero_grad()
    loss = mmd_loss(m, targets, 3, v1, v2, tt.table)
    loss.backward()
    assert loss.item() < 1e-12
    assert float(m.beta1_logits.grad.abs().max()) < 1e-10


def test_loss_averages_over_topics():
    tt = tiny(k=2, top_n=3)
    m, v1, v2 = tt.model, tt.corpus.vocab1, tt.corpus.vocab2
    refined = refined_from_words({0: (["a1", "a2", "a3"], ["b4", "b5"]), 1: (["a7", "a8"], ["b1", "b9", "b2"])})
    targets = prepare_targets(m, refined, KernelConfig(), 3, v1, v2, tt.table)
    per = [mmd_squared(build_raw_distribution(m, k, 3, v1, v2, tt.table), targets[k].refined,
                       targets[k].bandwidths).item() for k in range(2)]
    assert abs(mmd_loss(m, targets, 3, v1, v2, tt.table).item() - sum(per) / 2) < 1e-14
    # a topic without refinement contributes zero but still counts in the denominator
    only0 = {0: targets[0]}
    assert abs(mmd_loss(m, only0, 3, v1, v2, tt.table).item() - per[0] / 2) < 1e-14


def test_loss_gradient_k2_six_words():
    tt = tiny(seed=5, k=2, top_n=3)
    m, v1, v2 = tt.model, tt.corpus.vocab1, tt.corpus.vocab2
    refined = refined_from_words({0: (["a1", "a2", "a3", "a4"], ["b4", "b5"]),
                                  1: (["a7", "a8"], ["b1", "b9", "b2", "b3"])})
    targets = prepare_targets(m, refined, KernelConfig(), 3, v1, v2, tt.table)
    assert all(len(raw_support(m, k, 3, v1, v2, tt.table).labels) == 6 for k in range(2))
    assert gradient_check(lambda: mmd_loss(m, targets, 3, v1, v2, tt.table), m) < 1e-5


def test_bandwidths_frozen_at_refinement():
    tt = tiny(top_n=3)
    m, v1, v2 = tt.model, tt.corpus.vocab1, tt.corpus.vocab2
    refined = refined_from_words({0: (["a1", "a2"], ["b1"])})
    targets = prepare_targets(m, refined, KernelConfig(), 3, v1, v2, tt.table)
    before = targets[0].bandwidths
    with torch.no_grad():
        m.beta1_logits.add_(torch.randn(m.beta1_logits.shape, dtype=DTYPE))
    assert targets[0].bandwidths == before
    assert set(targets) == {0}
