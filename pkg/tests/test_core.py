import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    enumerate_distribution,
    extend_with_target,
    random_model,
    target_sequence_distribution,
    total_variation,
)
from stardraft.analytics import expected_accept_length
from stardraft.core import (
    START,
    DecodeSession,
    DraftTree,
    ModelError,
    SeededRng,
    TreeNode,
    acceptance_beta,
    autoregressive_decode,
    build_draft_tree,
    derive_draft,
    load_model,
    make_model,
    save_model,
    session_rng,
    speculative_decode,
    verify_path,
    verify_tree,
)
from stardraft.core.tree import ROOT


def onehot_model(vocab_size, token, order=0):
    row = [0.0] * vocab_size
    row[token] = 1.0
    return make_model({"vocab_size": vocab_size, "order": order, "rows": [], "default": row})


def order0(probs, eos=None):
    return make_model({"vocab_size": len(probs), "order": 0, "eos": eos, "rows": [{"context": [], "probs": probs}]})


class _FixedRng:
    """Replays a hand-chosen list of uniforms through SeededRng's primitives."""

    def __init__(self, uniforms):
        self.uniforms = list(uniforms)

    def random(self):
        return self.uniforms.pop(0)

    bernoulli = SeededRng.bernoulli
    categorical = SeededRng.categorical


# -- next_dist ---------------------------------------------------------------


def test_next_dist_order0_ignores_prefix():
    m = make_model({"vocab_size": 4, "order": 0, "rows": [{"context": [], "probs": [0.25] * 4}]})
    for prefix in ([], [1], [3, 2, 1]):
        assert m.next_dist(prefix).tolist() == [0.25] * 4


def test_next_dist_order1_direct_lookup():
    rows = [{"context": [c], "probs": np.eye(3)[c].tolist()} for c in range(3)]
    m = make_model({"vocab_size": 3, "order": 1, "rows": rows})
    assert m.next_dist([2]).tolist() == [0.0, 0.0, 1.0]


def test_next_dist_order2_uses_last_two_tokens():
    rows = [{"context": [1, 3], "probs": [0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.4]}]
    m = make_model({"vocab_size": 8, "order": 2, "rows": rows})
    # window of [7, 1, 3] is (1, 3)
    assert m.next_dist([7, 1, 3]).tolist() == rows[0]["probs"]
    assert m.context([5]) == (START, 5)
    assert m.next_dist([5]).tolist() == [0.125] * 8  # unlisted context -> uniform default


def test_model_validation():
    with pytest.raises(ModelError):
        make_model({"vocab_size": 1, "order": 0, "rows": []})
    with pytest.raises(ModelError):
        make_model({"vocab_size": 2, "order": 0, "rows": [{"context": [], "probs": [0.6, 0.6]}]})
    with pytest.raises(ModelError):
        make_model({"vocab_size": 2, "order": 1, "rows": [{"context": [5], "probs": [0.5, 0.5]}]})
    with pytest.raises(ModelError):
        make_model({"vocab_size": 2, "order": 0})


def test_generator_model_is_deterministic_and_normalized(tmp_path):
    spec = {"vocab_size": 16, "order": 2, "eos": 0, "generator": {"seed": 11}}
    a, b = make_model(spec), make_model(spec)
    for prefix in ([], [3], [4, 5], [1, 2, 3]):
        assert np.array_equal(a.next_dist(prefix), b.next_dist(prefix))
        assert abs(a.next_dist(prefix).sum() - 1.0) <= 1e-12
    path = tmp_path / "m.json"
    save_model(a, path)
    c = load_model(path)
    assert c.fingerprint() == a.fingerprint()
    assert np.array_equal(c.next_dist([9, 9]), a.next_dist([9, 9]))
    assert json.loads(path.read_text())["generator"] == {"seed": 11}


def test_fingerprint_distinguishes_models():
    t = make_model({"vocab_size": 8, "order": 1, "generator": {"seed": 1}})
    assert t.fingerprint() != derive_draft(t, 0.2).fingerprint()
    assert derive_draft(t, 0.2).fingerprint() == derive_draft(t, 0.2).fingerprint()


# -- acceptance_beta -----------------------------------------------------------


def test_acceptance_beta_examples():
    assert acceptance_beta([0.5, 0.5], [0.5, 0.5]) == 1.0
    assert acceptance_beta([1, 0], [0, 1]) == 0.0
    assert acceptance_beta([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        acceptance_beta([0.5, 0.5], [1.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_acceptance_beta_is_one_minus_tv(n, seed):
    gen = np.random.default_rng(seed)
    p = gen.dirichlet(np.ones(n))
    q = gen.dirichlet(np.ones(n))
    assert abs(acceptance_beta(p, q) - (1 - 0.5 * np.abs(p - q).sum())) <= 1e-12


# -- make_model / derive_draft ---------------------------------------------------


def test_derive_draft_examples():
    p = order0([0.7, 0.3])
    assert derive_draft(p, 0.0).next_dist([]).tolist() == [0.7, 0.3]
    assert derive_draft(p, 1.0).next_dist([]).tolist() == [0.5, 0.5]
    q = derive_draft(p, 0.4).next_dist([])
    assert q == pytest.approx([0.62, 0.38], abs=1e-15)
    assert acceptance_beta(p.next_dist([]), q) == pytest.approx(0.92, abs=1e-15)
    with pytest.raises(ModelError):
        derive_draft(p, 1.5)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.9, 1.0])
def test_derive_draft_beta_floor(eps):
    t = make_model({"vocab_size": 6, "order": 1, "generator": {"seed": 5}})
    q = derive_draft(t, eps)
    for prefix in ([], [0], [1], [5]):
        beta = acceptance_beta(t.next_dist(prefix), q.next_dist(prefix))
        assert beta >= 1 - eps * (1 - 1 / 6) - 1e-12


# -- build_draft_tree ----------------------------------------------------------------


def test_chain_tree_follows_argmax_of_onehot_draft():
    rows = [{"context": [c], "probs": np.eye(4)[(c + 1) % 4].tolist()} for c in range(4)]
    draft = make_model({"vocab_size": 4, "order": 1, "rows": rows})
    tree = build_draft_tree(draft, [0], 3, 1, SeededRng(0))
    assert [n.token for n in tree.nodes] == [1, 2, 3]
    assert [n.parent for n in tree.nodes] == [ROOT, 0, 1]
    assert tree.root_token == 0


def test_full_fanout_single_level():
    draft = order0([0.1, 0.4, 0.2, 0.3])
    tree = build_draft_tree(draft, [], 1, 4, SeededRng(0))
    assert sorted(n.token for n in tree.nodes) == [0, 1, 2, 3]
    assert [n.token for n in tree.nodes] == [1, 3, 2, 0]  # probability-descending


def test_uniform_tree_tie_break_by_id():
    draft = order0([1 / 3] * 3)
    tree = build_draft_tree(draft, [], 2, 2, SeededRng(0))
    assert [(n.token, n.parent, n.level) for n in tree.nodes] == [
        (0, ROOT, 1),
        (1, ROOT, 1),
        (0, 0, 2),
        (1, 0, 2),
        (0, 1, 2),
        (1, 1, 2),
    ]
    assert tree.token_paths() == [[0, 0], [0, 1], [1, 0], [1, 1]]


def test_tree_invariants_rejected():
    with pytest.raises(ValueError):
        DraftTree(2, 1, (TreeNode(0, ROOT, 2),))
    with pytest.raises(ValueError):
        DraftTree(2, 1, (TreeNode(0, ROOT, 1), TreeNode(1, ROOT, 1)))


# -- verify_path / verify_tree ----------------------------------------------------------


def test_verify_identical_models_accepts_everything():
    t = make_model({"vocab_size": 5, "order": 1, "generator": {"seed": 2}})
    rng = SeededRng(3)
    for _ in range(50):
        tree = build_draft_tree(t, [1], 3, 2, rng)
        out = verify_tree(t, t, [1], tree, rng)
        assert out.accept_length == 3 and out.correction is None and out.bonus is not None


def test_verify_disjoint_onehots_rejects_and_corrects():
    target, draft = onehot_model(4, 2), onehot_model(4, 1)
    out = verify_path(target, draft, [], [1, 1, 1], SeededRng(0))
    assert out.accept_length == 0 and out.correction == 2 and out.continuation == (2,)


def test_verify_single_token_marginal_is_target():
    p, q = order0([0.7, 0.3]), order0([0.4, 0.6])

    def one_round(rng):
        tree = build_draft_tree(q, [], 1, 1, rng)
        return verify_tree(p, q, [], tree, rng).continuation[0]

    dist = enumerate_distribution(one_round)
    assert dist[0] == pytest.approx(0.7, abs=1e-15)
    assert dist[1] == pytest.approx(0.3, abs=1e-15)


def test_verify_tree_hand_trace():
    # q = [.5,.3,.2], p = [.2,.6,.2]; ratio(0) = 0.4, ratio(1) = 1.
    # Tree k=2,d=2 -> paths [0,0],[0,1],[1,0],[1,1]; r = 1 - u.
    p, q = order0([0.2, 0.6, 0.2]), order0([0.5, 0.3, 0.2])
    tree = build_draft_tree(q, [], 2, 2, SeededRng(0))
    assert tree.token_paths() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    uniforms = [
        0.5, 0.0,  # path 0: r=.5 > .4 reject; residual [0,1,0] -> correction 1
        0.9, 0.3, 0.1,  # path 1: r=.1 accept, r=.7 accept, bonus u=.1 -> token 0
        0.7, 0.9, 0.5,  # path 2: both accepted, bonus -> token 1, tie keeps path 1
        0.2, 0.2, 0.95,  # path 3: both accepted, bonus -> token 2
    ]
    out = verify_tree(p, q, [], tree, _FixedRng(uniforms))
    assert out.path_index == 1
    assert out.accept_length == 2
    assert out.accepted_tokens == (0, 1)
    assert out.bonus == 0 and out.continuation == (0, 1, 0)


def test_verify_tree_k1_equals_verify_path():
    t = make_model({"vocab_size": 5, "order": 1, "generator": {"seed": 8}})
    q = derive_draft(t, 0.5)
    for seed in range(20):
        tree = build_draft_tree(q, [2], 3, 1, SeededRng(seed))
        a = verify_tree(t, q, [2], tree, SeededRng(100 + seed))
        b = verify_path(t, q, [2], tree.token_paths()[0], SeededRng(100 + seed))
        assert a == b


def test_zero_mass_draft_token_is_rejected():
    p, q = order0([0.5, 0.5, 0.0]), order0([0.5, 0.5, 0.0])
    out = verify_path(p, q, [], [2], SeededRng(0))
    assert out.accept_length == 0


@pytest.mark.parametrize("case", range(12))
def test_chain_mode_lossless_exact(case):
    vocab = 2 + case % 3
    order = case % 2
    d = 1 + case % 3
    target = random_model(case, vocab, order, sparsity=0.3 if case % 4 == 3 else 0.0)
    draft = random_model(1000 + case, vocab, order, sparsity=0.3 if case % 4 == 2 else 0.0)
    prefix = [case % vocab]

    def one_round(rng):
        tree = build_draft_tree(draft, prefix, d, 1, rng)
        return verify_tree(target, draft, prefix, tree, rng).continuation

    emitted = enumerate_distribution(one_round)
    assert sum(emitted.values()) == pytest.approx(1.0, abs=1e-12)
    completed = extend_with_target(target, prefix, emitted, d + 1)
    direct = target_sequence_distribution(target, prefix, d + 1)
    assert total_variation(completed, direct) <= 1e-10


# -- decoders ------------------------------------------------------------------------------


def test_draft_equals_target_accepts_d_every_round():
    t = make_model({"vocab_size": 6, "order": 1, "generator": {"seed": 4}})
    res = speculative_decode(t, t, [0], 3, 1, 40, SeededRng(9))
    assert res.accept_lengths == [3] * 10  # 4 tokens per round, ceil(40 / 4) rounds
    assert len(res.generated) == 40


def test_zero_acceptance_floor_one_token_per_round():
    target, draft = onehot_model(3, 0), onehot_model(3, 2)
    res = speculative_decode(target, draft, [1], 1, 1, 7, SeededRng(0))
    assert res.generated == [0] * 7
    assert res.accept_lengths == [0] * 7


def test_decode_stops_at_eos():
    t = make_model({"vocab_size": 4, "order": 0, "eos": 3, "rows": [], "default": [0.0, 0.0, 0.0, 1.0]})
    res = speculative_decode(t, t, [1], 3, 1, 50, SeededRng(0))
    assert res.generated == [3]


def test_monte_carlo_accept_length_matches_closed_form():
    p = np.array([0.4, 0.3, 0.2, 0.1])
    target = order0(p.tolist())
    draft = derive_draft(target, 0.5)
    beta = acceptance_beta(target.next_dist([]), draft.next_dist([]))
    d = 3
    session = DecodeSession(target, draft, [], d, 1, 10**9, SeededRng(21))
    lengths = np.array([session.step().accept_length for _ in range(100_000)])
    se = lengths.std(ddof=1) / math.sqrt(len(lengths))
    assert abs(lengths.mean() - expected_accept_length(beta, d)) <= 3 * se


def test_determinism_same_seed_same_bytes():
    t = make_model({"vocab_size": 8, "order": 2, "eos": 0, "generator": {"seed": 3}})
    q = derive_draft(t, 0.3)
    runs = [speculative_decode(t, q, [1, 2], 4, 2, 100, SeededRng(77)).tokens for _ in range(3)]
    assert bytes(runs[0]) == bytes(runs[1]) == bytes(runs[2])


def test_monotone_acceptance_in_epsilon():
    t = make_model({"vocab_size": 6, "order": 1, "generator": {"seed": 13}})
    means = []
    for eps in (0.0, 0.2, 0.5, 0.8, 1.0):
        q = derive_draft(t, eps)
        lengths = []
        for seed in range(40):
            lengths += speculative_decode(t, q, [0], 4, 1, 60, SeededRng(seed)).accept_lengths
        lengths = np.array(lengths)
        means.append((lengths.mean(), lengths.std(ddof=1) / math.sqrt(len(lengths))))
    for (m_small, se_a), (m_big, se_b) in zip(means, means[1:]):
        assert m_small >= m_big - 3 * math.hypot(se_a, se_b)


def test_greedy_is_seed_independent():
    t = make_model({"vocab_size": 8, "order": 1, "generator": {"seed": 6}})
    q = derive_draft(t, 0.6)
    ar = autoregressive_decode(t, [3], 30, SeededRng(0), greedy=True).tokens
    for seed in range(5):
        assert autoregressive_decode(t, [3], 30, SeededRng(seed), greedy=True).tokens == ar
        for k in (1, 2):
            assert speculative_decode(t, q, [3], 3, k, 30, SeededRng(seed), greedy=True).tokens == ar


def test_autoregressive_onehot_target_is_unique():
    t = onehot_model(5, 4)
    assert autoregressive_decode(t, [], 6, SeededRng(1)).generated == [4] * 6


def test_autoregressive_unigram_frequencies():
    probs = np.array([0.5, 0.3, 0.2])
    t = order0(probs.tolist())
    n = 100_000
    out = np.array(autoregressive_decode(t, [], n, SeededRng(5)).generated)
    for tok, pr in enumerate(probs):
        freq = np.mean(out == tok)
        assert abs(freq - pr) <= 3 * math.sqrt(pr * (1 - pr) / n)


def test_session_rngs_are_distinct_and_reproducible():
    a = [session_rng(1, 1, "draft").random() for _ in range(2)]
    assert a[0] == session_rng(1, 1, "draft").random()
    assert session_rng(1, 1, "draft").random() != session_rng(1, 1, "target").random()
    assert session_rng(1, 1, "draft").random() != session_rng(1, 2, "draft").random()
