import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from clear_scvd.corpus import (
    MASK,
    PAD,
    UNK,
    CorpusError,
    LabeledExample,
    Vocabulary,
    build_vocabulary,
    corpus_hash,
    encode,
    generate_synthetic_corpus,
    load_corpus,
    prepare,
    render_synthetic_contract,
    save_corpus,
    split,
    tokenize,
)


class TestTokenize:
    def test_declaration(self):
        assert tokenize("uint256 a = 1;") == ["uint256", "a", "=", "<NUM>", ";"]

    def test_empty(self):
        assert tokenize("") == []

    def test_comment_only(self):
        assert tokenize("/* only a comment */") == []
        assert tokenize("// line\n") == []

    def test_literal_collapsing(self):
        assert tokenize('x = "hi" + 0xff + 1e18;') == ["x", "=", "<STR>", "+", "<NUM>", "+", "<NUM>", ";"]

    def test_multichar_operators(self):
        assert tokenize("a -= b; c == d; e => f") == ["a", "-=", "b", ";", "c", "==", "d", ";", "e", "=>", "f"]

    def test_member_access(self):
        assert tokenize("msg.sender.call.value(x)()") == [
            "msg", ".", "sender", ".", "call", ".", "value", "(", "x", ")", "(", ")",
        ]

    @given(st.text(max_size=200))
    def test_never_fails_and_drops_whitespace(self, text):
        toks = tokenize(text)
        assert all(tok and not tok.isspace() for tok in toks)


class TestVocabulary:
    def test_ordering(self):
        vocab = build_vocabulary([["a", "b", "a"]], min_frequency=1)
        assert vocab.as_dict() == {"<PAD>": PAD, "<UNK>": UNK, "<MASK>": MASK, "a": 3, "b": 4}

    def test_min_frequency(self):
        vocab = build_vocabulary([["a", "b", "a"]], min_frequency=2)
        assert len(vocab) == 4 and "a" in vocab and "b" not in vocab

    def test_reserved_only(self):
        assert len(build_vocabulary([[]], min_frequency=1)) == 3

    def test_empty_corpus_rejected(self):
        with pytest.raises(CorpusError):
            build_vocabulary([])

    def test_ties_broken_lexicographically(self):
        vocab = build_vocabulary([["z", "y", "x", "y"]], min_frequency=1)
        assert vocab.tokens[3:] == ("y", "x", "z")

    def test_save_load_round_trip(self, tmp_path):
        vocab = build_vocabulary([tokenize("contract A { uint x = 1; }")], min_frequency=1)
        vocab.save(tmp_path / "v.txt")
        loaded = Vocabulary.load(tmp_path / "v.txt")
        assert loaded == vocab and loaded.hash == vocab.hash

    @given(st.lists(st.lists(st.sampled_from("abcdefg"), max_size=12), min_size=1, max_size=8), st.integers(1, 3))
    def test_counts_respect_threshold(self, corpus, min_frequency):
        vocab = build_vocabulary(corpus, min_frequency)
        counts = Counter(t for seq in corpus for t in seq)
        assert set(vocab.tokens[3:]) == {t for t, c in counts.items() if c >= min_frequency}
        kept = vocab.tokens[3:]
        assert all(counts[a] >= counts[b] for a, b in zip(kept, kept[1:]))


class TestEncode:
    def test_unknown_maps_to_unk(self):
        vocab = build_vocabulary([["a"]], min_frequency=1)
        assert encode(["a", "z"], vocab, 8).token_ids == (3, 1)

    def test_truncation(self):
        vocab = build_vocabulary([["a"]], min_frequency=1)
        enc = encode(["a"] * 10, vocab, 4)
        assert len(enc.token_ids) == 4 and enc.original_length == 10

    def test_empty_becomes_unk(self):
        vocab = build_vocabulary([["a"]], min_frequency=1)
        enc = encode([], vocab, 8)
        assert enc.token_ids == (UNK,) and enc.original_length == 0

    @given(st.lists(st.sampled_from(["a", "b", "c", "zz"]), max_size=40), st.integers(1, 30))
    def test_length_bounds(self, tokens, max_len):
        vocab = build_vocabulary([["a", "b"]], min_frequency=1)
        enc = encode(tokens, vocab, max_len)
        assert 1 <= len(enc.token_ids) <= max_len
        assert all(0 <= i < len(vocab) for i in enc.token_ids)


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestLoadCorpus:
    def test_well_formed(self, tmp_path):
        lines = [json.dumps({"id": f"c{i}", "source": "contract A {}", "labels": {"RE": i % 2}}) for i in range(3)]
        assert len(load_corpus(_write_lines(tmp_path / "c.jsonl", lines))) == 3

    def test_missing_labels(self, tmp_path):
        lines = [
            json.dumps({"id": "a", "source": "", "labels": {"RE": 0}}),
            json.dumps({"id": "b", "source": ""}),
        ]
        with pytest.raises(CorpusError, match="missing field labels at line 2"):
            load_corpus(_write_lines(tmp_path / "c.jsonl", lines))

    def test_duplicate_id(self, tmp_path):
        rec = json.dumps({"id": "a", "source": "", "labels": {"RE": 0}})
        with pytest.raises(CorpusError, match="duplicate id"):
            load_corpus(_write_lines(tmp_path / "c.jsonl", [rec, rec]))

    def test_unknown_label_key(self, tmp_path):
        rec = json.dumps({"id": "a", "source": "", "labels": {"XX": 0}})
        with pytest.raises(CorpusError, match="unknown label key"):
            load_corpus(_write_lines(tmp_path / "c.jsonl", [rec]))

    def test_non_binary_label(self, tmp_path):
        rec = json.dumps({"id": "a", "source": "", "labels": {"RE": 2}})
        with pytest.raises(CorpusError):
            load_corpus(_write_lines(tmp_path / "c.jsonl", [rec]))

    def test_save_load_round_trip(self, tmp_path):
        examples = generate_synthetic_corpus(12, 0.5, seed=1)
        save_corpus(examples, tmp_path / "c.jsonl")
        assert load_corpus(tmp_path / "c.jsonl") == examples


class TestSplit:
    def test_counts(self):
        parts = split(list(range(10)), 0.8, seed=0)
        assert len(parts.train) == 8 and len(parts.test) == 2

    def test_deterministic(self):
        a, b = split(list(range(50)), 0.8, seed=4), split(list(range(50)), 0.8, seed=4)
        assert a.train == b.train and a.test == b.test

    def test_paper_scale_counts(self):
        parts = split(list(range(40000)), 0.8, seed=0)
        assert (len(parts.train), len(parts.test)) == (32000, 8000)

    @given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 2**31))
    @settings(max_examples=50)
    def test_partition(self, n, ratio, seed):
        parts = split(list(range(n)), ratio, seed)
        assert sorted(parts.train + parts.test) == list(range(n))
        assert len(parts.train) >= 1 and len(parts.test) >= 1

    def test_vocabulary_fitted_on_train_only(self):
        examples = [
            LabeledExample("a", "alpha beta", {"RE": 1}),
            LabeledExample("b", "alpha gamma", {"RE": 0}),
            LabeledExample("c", "omega", {"RE": 0}),
        ]
        vocab, parts = prepare(examples, ratio=0.67, seed=0, min_frequency=1)
        test_tokens = {t for ex in examples if ex.id in {c.id for c in parts.test} for t in ex.source.split()}
        train_tokens = {t for ex in examples if ex.id in {c.id for c in parts.train} for t in ex.source.split()}
        assert set(vocab.tokens[3:]) == train_tokens
        for tok in test_tokens - train_tokens:
            assert tok not in vocab


class TestSynthetic:
    def test_counts(self):
        examples = generate_synthetic_corpus(500, 0.3, seed=7)
        assert len(examples) == 500
        assert sum(ex.labels["ORDER"] for ex in examples) == 150

    def test_deterministic(self, tmp_path):
        save_corpus(generate_synthetic_corpus(40, 0.3, seed=7), tmp_path / "a.jsonl")
        save_corpus(generate_synthetic_corpus(40, 0.3, seed=7), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_different_seeds_differ(self):
        assert corpus_hash(generate_synthetic_corpus(20, 0.3, 1)) != corpus_hash(generate_synthetic_corpus(20, 0.3, 2))

    def test_variants_are_permutations(self):
        for index in range(1000):
            vuln = tokenize(render_synthetic_contract(11, index, True))
            safe = tokenize(render_synthetic_contract(11, index, False))
            assert Counter(vuln) == Counter(safe)
            assert vuln != safe

    def test_variants_differ_only_inside_withdraw(self):
        for index in range(50):
            vuln = render_synthetic_contract(5, index, True).splitlines()
            safe = render_synthetic_contract(5, index, False).splitlines()
            assert len(vuln) == len(safe)
            changed = [i for i, (a, b) in enumerate(zip(vuln, safe)) if a != b]
            assert changed and changed == list(range(changed[0], changed[-1] + 1))
            # every differing line is a statement of the critical block
            assert all(vuln[i].startswith("        ") for i in changed)
            assert sorted(vuln[i] for i in changed) == sorted(safe[i] for i in changed)

    def test_vulnerable_transfers_before_bookkeeping(self):
        for index in range(30):
            lines = render_synthetic_contract(2, index, True).splitlines()
            transfer = next(i for i, l in enumerate(lines) if "msg.sender." in l and ("transfer" in l or "send" in l or "call" in l))
            update = next(i for i, l in enumerate(lines) if "-=" in l)
            assert transfer < update
            lines = render_synthetic_contract(2, index, False).splitlines()
            transfer = next(i for i, l in enumerate(lines) if "msg.sender." in l and ("transfer" in l or "send" in l or "call" in l))
            update = next(i for i, l in enumerate(lines) if "-=" in l)
            assert transfer > update

    @pytest.mark.parametrize("n,fraction", [(9, 0.3), (20, 0.0), (20, 1.0)])
    def test_rejects_bad_arguments(self, n, fraction):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(n, fraction, 0)
