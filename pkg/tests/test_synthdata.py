import json

import numpy as np
import pytest

from finealign.errors import NoSlotError, ParseError, ValidationError, VocabTooSmallError
from finealign.synthdata import (
    AttributeVocab,
    CorpusConfig,
    decode_region_attributes,
    generate_corpus,
    load_corpus,
    perturb_attributes,
    sample_to_json,
    save_corpus,
)

VOCAB = AttributeVocab()


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


class TestVocab:
    def test_layout(self):
        assert VOCAB.size == 122
        assert VOCAB.patch_dim == 60
        for tok in range(VOCAB.size):
            lang, kind, value = VOCAB.decode(tok)
            if kind != "lang":
                assert VOCAB.token(lang, kind, value) == tok

    def test_too_small(self):
        with pytest.raises(VocabTooSmallError):
            generate_corpus(CorpusConfig(samples=2, vocab=AttributeVocab(slots=(("color", 5),))))


class TestGenerate:
    def test_deterministic(self):
        a = generate_corpus(CorpusConfig(samples=6, seed=9))
        b = generate_corpus(CorpusConfig(samples=6, seed=9))
        assert [sample_to_json(s) for s in a] == [sample_to_json(s) for s in b]

    def test_single_region_long_caption(self):
        for s in generate_corpus(CorpusConfig(samples=10, seed=1, regions_per_image=1)):
            assert s.long_caption == [s.lang] + s.regions[0].phrase + s.short_caption[1:3]

    def test_decoding_oracle(self):
        corpus = generate_corpus(CorpusConfig(samples=100, seed=4))
        for s in corpus:
            for r in s.regions:
                assert decode_region_attributes(s, r, VOCAB) == r.phrase

    def test_captions_unique(self):
        corpus = generate_corpus(CorpusConfig(samples=32, seed=0))
        assert len({tuple(s.short_caption) for s in corpus}) == 32


class TestPerturb:
    def test_single_slot(self):
        red = VOCAB.token(0, "color", 3)
        phrase = [0, red, 0]
        negs = perturb_attributes(phrase, VOCAB, seed=0)
        colors = {n[1] for n in negs}
        assert len(colors) == 10 and red not in colors
        assert all(n[0] == 0 and n[2] == 0 for n in negs)

    def test_thousand_phrases(self, rng):
        for i in range(1000):
            lang = int(rng.integers(2))
            phrase = [VOCAB.token(lang, k, int(rng.integers(12))) for k in ("color", "count", "shape")]
            negs = perturb_attributes(phrase, VOCAB, seed=i)
            assert len({tuple(n) for n in negs}) == 10
            for n in negs:
                assert len(n) == len(phrase)
                assert sum(a != b for a, b in zip(n, phrase)) == 1

    def test_no_slot(self):
        with pytest.raises(NoSlotError):
            perturb_attributes([0, VOCAB.token(0, "scene_a", 1)], VOCAB, seed=0)


class TestFormat:
    def test_round_trip_bytes(self, tmp_path):
        save_corpus(generate_corpus(CorpusConfig(samples=10, seed=2)), tmp_path / "a.jsonl")
        save_corpus(load_corpus(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_missing_hard_negatives(self, tmp_path, small_corpus):
        lines = [sample_to_json(s) for s in small_corpus[:3]]
        rec = json.loads(lines[1])
        del rec["regions"][0]["hard_negatives"]
        lines[1] = json.dumps(rec)
        with pytest.raises(ParseError) as exc:
            load_corpus(write_lines(tmp_path / "c.jsonl", lines))
        assert exc.value.line == 2
        assert "hard_negatives" in str(exc.value)

    def test_long_caption_limit(self, tmp_path, small_corpus):
        rec = json.loads(sample_to_json(small_corpus[0]))
        rec["long_caption"] = [2] * 197
        with pytest.raises(ValidationError) as exc:
            load_corpus(write_lines(tmp_path / "c.jsonl", [sample_to_json(small_corpus[1]), json.dumps(rec)]))
        assert exc.value.line == 2
        assert "196" in str(exc.value)

    def test_negative_count(self, tmp_path, small_corpus):
        rec = json.loads(sample_to_json(small_corpus[0]))
        rec["regions"][1]["hard_negatives"].pop()
        with pytest.raises(ValidationError) as exc:
            load_corpus(write_lines(tmp_path / "c.jsonl", [json.dumps(rec)]))
        assert exc.value.line == 1
        assert "10" in str(exc.value)

    def test_bad_json(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            load_corpus(write_lines(tmp_path / "c.jsonl", ["{"]))
        assert exc.value.line == 1

    def test_image_preserved(self, tmp_path, small_corpus):
        save_corpus(small_corpus, tmp_path / "c.jsonl")
        for a, b in zip(small_corpus, load_corpus(tmp_path / "c.jsonl")):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.regions == b.regions
