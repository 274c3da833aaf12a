import functools
import json

import numpy as np
import pytest

from linequant import dataset
from linequant.dataset import Alphabet, EOS_ID, GlyphAtlas, render_line
from linequant.errors import DataError
from linequant.evaluation import cer, edit_distance, evaluate_model
from linequant.model import (
    AdapterConfig,
    DecoderConfig,
    EncoderConfig,
    StemConfig,
    build_model,
)


def oracle_edit_distance(a: str, b: str) -> int:
    """Independent memoized-recursion oracle."""

    @functools.cache
    def rec(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            rec(i - 1, j) + 1,
            rec(i, j - 1) + 1,
            rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return rec(len(a), len(b))


class TestEditDistance:
    def test_identity(self):
        assert edit_distance("abc", "abc") == 0

    def test_pure_deletion(self):
        assert edit_distance("abc", "") == 3
        assert edit_distance("", "abc") == 3

    def test_kitten_sitting(self):
        assert edit_distance("kitten", "sitting") == 3
        assert oracle_edit_distance("kitten", "sitting") == 3

    def test_matches_dp_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        chars = "abcde"
        for _ in range(100):
            a = "".join(rng.choice(list(chars), size=rng.integers(0, 13)))
            b = "".join(rng.choice(list(chars), size=rng.integers(0, 13)))
            assert edit_distance(a, b) == oracle_edit_distance(a, b), (a, b)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = "".join(rng.choice(list("xyz"), size=rng.integers(0, 9)))
            b = "".join(rng.choice(list("xyz"), size=rng.integers(0, 9)))
            assert edit_distance(a, b) == edit_distance(b, a)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b, c = (
                "".join(rng.choice(list("pq"), size=rng.integers(0, 8)))
                for _ in range(3)
            )
            assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


class TestCer:
    def test_perfect_hypotheses(self):
        report = cer([("abc", "abc"), ("de", "de")])
        assert report.cer == 0.0
        assert report.total_edits == 0

    def test_hand_counted_quarter(self):
        report = cer([("ab", "ab"), ("cd", "ce")])
        assert report.cer == 0.25
        assert report.total_edits == 1 and report.total_ref_chars == 4

    def test_single_substitution_third(self):
        report = cer([("abc", "abd")])
        assert report.cer == pytest.approx(1 / 3)

    def test_micro_average_not_macro(self):
        # macro mean of per-line ratios would be (1/1 + 0/9)/2 = 0.5;
        # micro is 1/10
        report = cer([("a", "b"), ("bbbbbbbbb", "bbbbbbbbb")])
        assert report.cer == pytest.approx(0.1)

    def test_empty_reference_rejected(self):
        with pytest.raises(DataError):
            cer([("", "x")])

    def test_totals_equal_line_sums(self):
        pairs = [("abc", "axc"), ("hello", "hxllo"), ("z", "")]
        report = cer(pairs)
        assert report.total_edits == sum(r.edits for r in report.lines)
        assert report.total_ref_chars == sum(len(r.ref) for r in report.lines)

    def test_json_round_trip(self):
        report = cer([("ab", "ax")], ids=["line0"])
        data = json.loads(report.to_json())
        assert data["cer"] == 0.5
        assert data["lines"][0]["id"] == "line0"


def micro_recognizer(alphabet: Alphabet, seed=0):
    enc = EncoderConfig(layers=1, heads=2, dim=16, stem=StemConfig((2, 3, 4, 6)))
    dec = DecoderConfig(layers=1, heads=2, dim=12, alphabet_size=alphabet.vocab_size,
                        max_len=16)
    return build_model(enc, AdapterConfig(16, 12), dec, seed=seed)


class TestEvaluateModel:
    def test_eos_only_model_scores_cer_one(self):
        alpha = Alphabet("abcd")
        mp = micro_recognizer(alpha)
        mp.tensors["dec.out.w"].data[...] = 0.0
        mp.tensors["dec.out.b"].data[...] = 0.0
        mp.tensors["dec.out.b"].data[EOS_ID] = 10.0
        atlas = GlyphAtlas.synthetic("abcd", seed=1)
        samples = [
            dataset.LineSample(f"s{i}", render_line(t, atlas), t, "val")
            for i, t in enumerate(["ab", "cd", "abcd"])
        ]
        report = evaluate_model(mp, samples, alpha, max_len=8)
        assert report.cer == 1.0
        assert all(r.hyp == "" for r in report.lines)

    def test_fresh_model_scores_high_cer(self):
        alpha = Alphabet("abcd")
        mp = micro_recognizer(alpha, seed=3)
        atlas = GlyphAtlas.synthetic("abcd", seed=1)
        samples = [
            dataset.LineSample(f"s{i}", render_line(t, atlas), t, "val")
            for i, t in enumerate(["abcd", "dcba", "aabb", "ccdd"])
        ]
        report = evaluate_model(mp, samples, alpha, max_len=8)
        assert report.cer >= 0.9

    def test_deterministic_for_fixed_checkpoint(self):
        alpha = Alphabet("ab")
        mp = micro_recognizer(alpha, seed=5)
        atlas = GlyphAtlas.synthetic("ab", seed=2)
        samples = [dataset.LineSample("s", render_line("ab", atlas), "ab", "val")]
        a = evaluate_model(mp, samples, alpha, max_len=6)
        b = evaluate_model(mp, samples, alpha, max_len=6)
        assert a.cer == b.cer
        assert [r.hyp for r in a.lines] == [r.hyp for r in b.lines]

    def test_empty_split_rejected(self):
        alpha = Alphabet("ab")
        with pytest.raises(DataError):
            evaluate_model(micro_recognizer(alpha), [], alpha)
