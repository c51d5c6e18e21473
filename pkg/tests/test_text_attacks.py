import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graybox import synth
from graybox import text_attacks as ta


def dp_levenshtein(a, b):
    # independent oracle: the textbook O(nm) table
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_word_split_at_position_three():
    class Pick:
        def choice(self, options):
            return 3 if isinstance(options, list) else 0
    assert ta.apply_augmentation("hello world", "word-split", Pick()) == "hel lo world"


def test_fun_fonts_uses_the_committed_table():
    out = ta.apply_augmentation("a", "fun-fonts-substitute", np.random.default_rng(0))
    assert out == ta.FUN_FONTS["a"]
    assert len(out) == 1 and out != "a"
    assert len(ta.EMOJI) == 16


def test_each_kind_is_a_minimal_edit():
    rng = np.random.default_rng(0)
    texts = [synth.render_text(i % synth.N_TEXT, i) for i in range(50)]
    n = 0
    for i in range(1000):
        s = texts[i % len(texts)]
        kind = ta.KINDS[i % len(ta.KINDS)]
        out = ta.apply_augmentation(s, kind, rng)
        assert out is not ta.INAPPLICABLE
        d = dp_levenshtein(s, out)
        if kind == "typo-insert" and len(out) == len(s):
            assert d in (1, 2)  # adjacent swap
        else:
            assert d == 1, (kind, s, out)
        assert out != s
        n += 1
    assert n == 1000


def test_inapplicable_kinds_and_unknown_kind():
    rng = np.random.default_rng(0)
    assert ta.apply_augmentation("   ", "random-letter-replace", rng) is ta.INAPPLICABLE
    assert ta.apply_augmentation("a", "word-split", rng) is ta.INAPPLICABLE
    assert ta.apply_augmentation("", "emoji-insert", rng) in ta.EMOJI
    with pytest.raises(ValueError):
        ta.apply_augmentation("abc", "leetspeak", rng)


def test_normalized_distance_examples():
    assert ta.normalized_edit_distance("abc", "abc") == 0.0
    assert ta.normalized_edit_distance("kitten", "sitting") == 0.5
    assert ta.normalized_edit_distance("ab", "") == 1.0


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=12), st.text(max_size=12))
def test_normalized_distance_matches_dp_oracle(a, b):
    assert ta.normalized_edit_distance(a, b) == dp_levenshtein(a, b) / max(1, len(a))


def test_zero_budget_returns_the_original():
    cfg = ta.TextAttackConfig(tau=0.0)
    out = ta.beam_search(lambda xs: np.ones(len(xs)), "look at this apple", cfg,
                         np.random.default_rng(0))
    assert out.text == "look at this apple"
    # only the original is ever scored
    assert out.queries == 1 and not out.flipped


def intact_fraction(original):
    def score(texts):
        return np.array([sum(a == b for a, b in zip(original, t)) / len(original)
                         if len(t) == len(original) else 1.0 for t in texts])
    return score


def test_beam_search_matches_exhaustive_search_on_a_toy_scorer():
    original = "abcdefgh"
    score = intact_fraction(original)
    # exhaustive: every string within two substitutions of the original
    alphabet = "xyz"
    best = 1.0
    for i, j in itertools.combinations_with_replacement(range(len(original)), 2):
        for c1, c2 in itertools.product(alphabet, alphabet):
            s = list(original)
            s[i], s[j] = c1, c2
            best = min(best, score(["".join(s)])[0])
    assert best == 0.75
    cfg = ta.TextAttackConfig(tau=0.25, beam_width=2, branch=2, max_iterations=2,
                              kinds=ta.SUBSTITUTION_KINDS)
    for seed in range(5):
        out = ta.beam_search(score, original, cfg, np.random.default_rng(seed))
        assert out.score == pytest.approx(best)
        assert ta.normalized_edit_distance(original, out.text) <= 0.25


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.05, 0.07, 0.15]))
def test_guided_output_within_budget_and_query_bound(seed, tau):
    s = synth.render_text(seed % synth.N_TEXT, seed)
    rng = np.random.default_rng(seed)
    score_rng = np.random.default_rng(seed + 1)
    cfg = ta.TextAttackConfig(tau=tau, beam_width=3, branch=4, max_iterations=6)
    out = ta.beam_search(lambda xs: score_rng.uniform(0.6, 1.0, len(xs)), s, cfg, rng)
    assert ta.normalized_edit_distance(s, out.text) <= tau
    # the original, then at most beam * branch fresh strings per iteration
    # (two passes when all are discarded)
    assert out.queries <= 1 + 2 * cfg.beam_width * cfg.branch * cfg.max_iterations


def test_search_stops_once_the_ranker_flips():
    calls = []

    def score(xs):
        calls.append(list(xs))
        return np.array([0.1 if x != original else 0.9 for x in xs])

    original = "every morning there is a tiger"
    out = ta.beam_search(score, original, ta.TextAttackConfig(), np.random.default_rng(0))
    assert out.flipped and len(calls) == 2 and out.text != original


def test_an_already_flipped_meme_keeps_its_text():
    out = ta.beam_search(lambda xs: np.full(len(xs), 0.2), "every morning there is a tiger",
                         ta.TextAttackConfig(), np.random.default_rng(0))
    assert out.flipped and out.text == "every morning there is a tiger" and out.queries == 1


def test_text_config_validation():
    with pytest.raises(ValueError):
        ta.TextAttackConfig(tau=-0.1)
    with pytest.raises(ValueError):
        ta.TextAttackConfig(beam_width=0)
    with pytest.raises(ValueError):
        ta.TextAttackConfig(kinds=("nope",))


def test_light_random_stays_within_budget_and_is_deterministic():
    for i in range(300):
        s = synth.render_text(i % synth.N_TEXT, i)
        out = ta.random_augment(s, "light", 3, str(i))
        assert ta.normalized_edit_distance(s, out) <= ta.LIGHT_TAU
        assert out == ta.random_augment(s, "light", 3, str(i))


def test_medium_random_averages_near_its_budget():
    d = [ta.normalized_edit_distance(s, ta.random_augment(s, "medium", 0, str(i)))
         for i, s in enumerate(synth.render_text(i % 8, i) for i in range(300))]
    assert max(d) <= ta.MEDIUM_TAU
    assert np.mean(d) > 0.15


def test_heavy_random_is_unrestricted():
    d = [ta.normalized_edit_distance(s, ta.random_augment(s, "heavy", 0, str(i)))
         for i, s in enumerate(synth.render_text(i % 8, i) for i in range(1000))]
    assert np.mean(d) > 0.5


def test_unknown_random_level():
    with pytest.raises(ValueError):
        ta.random_augment("abc", "extreme", 0)


def test_guided_attack_with_trained_models(small_models, small_dataset):
    target = small_models["grid-late"]
    meme = small_dataset.split("test")[2]
    r = ta.guided_attack(target, target, meme, ta.TextAttackConfig(max_iterations=5))
    assert r.distance <= ta.LIGHT_TAU
    assert r.original == meme.text
    assert r == ta.guided_attack(target, target, meme, ta.TextAttackConfig(max_iterations=5))
    if r.success:
        assert r.clean_prediction.label == meme.label != r.adversarial_prediction.label
    sur = ta.guided_attack(small_models["region-mid"], target, meme, ta.TextAttackConfig(max_iterations=5))
    assert sur.distance <= ta.LIGHT_TAU


def test_scorer_matches_model_probabilities(small_models, small_dataset):
    model = small_models["region-early"]
    meme = small_dataset.split("test")[4]
    texts = [meme.text, meme.text.upper(), "", meme.text + " 🙂"]
    got = ta.correct_class_scorer(model, meme.image, meme.label)(texts)
    probs = np.array([model.classify(meme.image, t).probability for t in texts])
    want = probs if meme.label == 1 else 1 - probs
    np.testing.assert_allclose(got, want, atol=1e-12)
