"""Vocabulary, encoders, dataset i/o, and the synthetic world generator."""

import collections
import json

import pytest

from cskt.data import (
    CLS_ID,
    CLS_Q_ID,
    PAD_ID,
    RESERVED_TOKENS,
    SEP_ID,
    SOURCE_LANG,
    TARGET_LANG,
    UNK_ID,
    Example,
    ParallelPair,
    SynthWorldConfig,
    Vocab,
    decode_tokens,
    encode_qa,
    encode_statement,
    generate_synthetic_world,
    load_jsonl,
    pair_by_id,
    save_jsonl,
    save_world,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocab(["alpha", "beta", "gamma", "delta"])


@pytest.fixture(scope="module")
def world():
    cfg = SynthWorldConfig(
        n_concepts=24, n_filler_tokens=30, relation_density=0.2,
        choices_per_item=5, n_train=600, n_dev=500, n_test=120,
        n_parallel=100, seed=3,
    )
    return generate_synthetic_world(cfg)


# -- vocab -------------------------------------------------------------------


def test_reserved_ids_fixed():
    v = Vocab()
    assert (PAD_ID, CLS_ID, SEP_ID, CLS_Q_ID, UNK_ID) == (0, 1, 2, 3, 4)
    assert [v.token_of(i) for i in range(5)] == list(RESERVED_TOKENS)
    assert len(v) == 5


def test_vocab_dense_and_bijective(vocab):
    assert vocab.id_of("alpha") == 5
    assert vocab.id_of("delta") == 8
    for t in vocab.non_reserved():
        assert vocab.token_of(vocab.id_of(t)) == t
    assert vocab.id_of("nope") == UNK_ID


def test_vocab_add_idempotent_and_validated():
    v = Vocab(["a"])
    assert v.add("a") == 5
    assert len(v) == 6
    with pytest.raises(ValueError):
        v.add("two words")
    with pytest.raises(ValueError):
        v.add("")


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines == ["alpha", "beta", "gamma", "delta"]  # line i holds id 5+i
    again = Vocab.load(path)
    assert again.non_reserved() == vocab.non_reserved()


# -- statement encoding ------------------------------------------------------


def test_encode_statement_construction(vocab):
    seq = encode_statement("alpha beta", vocab, max_len=8)
    assert seq.ids == [CLS_ID, 5, 6, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert seq.pad_mask == [1, 1, 1, 1, 0, 0, 0, 0]
    assert seq.segment == [0] * 8
    assert seq.content_length == 4


def test_encode_statement_unknown_token(vocab):
    seq = encode_statement("alpha mystery", vocab, max_len=6)
    assert seq.ids[2] == UNK_ID


def test_encode_statement_truncates_and_keeps_sep(vocab):
    seq = encode_statement("alpha beta gamma delta alpha", vocab, max_len=4)
    assert len(seq.ids) == 4
    assert seq.ids == [CLS_ID, 5, 6, SEP_ID]
    assert seq.pad_mask == [1, 1, 1, 1]


def test_encode_statement_empty_errors(vocab):
    with pytest.raises(ValueError):
        encode_statement("   ", vocab, max_len=8)


# -- QA encoding -------------------------------------------------------------


def test_encode_qa_construction(vocab):
    seq = encode_qa("alpha", "beta", vocab, max_len=8)
    assert seq.trimmed_ids() == [CLS_ID, 5, SEP_ID, CLS_Q_ID, 6, SEP_ID]
    assert seq.trimmed_segment() == [0, 0, 0, 0, 1, 0]


def test_encode_qa_empty_question(vocab):
    seq = encode_qa("", "alpha beta", vocab, max_len=8)
    assert seq.trimmed_ids() == [CLS_ID, SEP_ID, CLS_Q_ID, 5, 6, SEP_ID]
    assert seq.trimmed_segment() == [0, 0, 0, 1, 1, 0]


def test_encode_qa_segment_covers_exactly_answer_span(vocab):
    seq = encode_qa("alpha beta", "gamma delta", vocab, max_len=12)
    ids, seg = seq.trimmed_ids(), seq.trimmed_segment()
    q_start = ids.index(CLS_Q_ID)
    for i, (tok, s) in enumerate(zip(ids, seg)):
        in_span = q_start < i < len(ids) - 1
        assert s == (1 if in_span else 0)


def test_encode_qa_answer_keeps_room(vocab):
    # question gives way so the answer fits whole
    seq = encode_qa("alpha beta gamma delta", "alpha beta", vocab, max_len=8)
    ids = seq.trimmed_ids()
    assert ids[-3:] == [5, 6, SEP_ID]
    assert len(ids) == 8


def test_encode_qa_too_small_max_len(vocab):
    with pytest.raises(ValueError):
        encode_qa("alpha", "beta", vocab, max_len=4)
    with pytest.raises(ValueError):
        encode_qa("alpha", "   ", vocab, max_len=8)


def test_decode_round_trip(vocab):
    s = encode_statement("alpha gamma beta", vocab, max_len=10)
    assert decode_tokens(s, vocab) == ["alpha", "gamma", "beta"]
    q = encode_qa("beta", "delta alpha", vocab, max_len=10)
    assert decode_tokens(q, vocab) == ["beta", "delta", "alpha"]


# -- JSONL i/o ---------------------------------------------------------------


def _write_lines(path, lines):
    path.write_text("".join(json.dumps(obj) + "\n" for obj in lines))


def test_load_jsonl_parses(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_lines(path, [
        {"id": "a", "lang": "en", "question": "q one", "choices": ["1", "2", "3", "4", "5"], "label": 2},
        {"id": "b", "lang": "en", "question": "q two", "choices": ["1", "2", "3", "4", "5"], "label": 0},
    ])
    got = load_jsonl(path, n_choices=5)
    assert [e.id for e in got] == ["a", "b"]  # order preserved
    assert got[0].gold == 2 and len(got[0].choices) == 5


def test_load_jsonl_label_out_of_range(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_lines(path, [{"id": "a", "lang": "en", "question": "q", "choices": ["1", "2", "3", "4", "5"], "label": 7}])
    with pytest.raises(ValueError, match=r":1:"):
        load_jsonl(path)


def test_load_jsonl_malformed_line(tmp_path):
    path = tmp_path / "d.jsonl"
    ok = json.dumps({"id": "a", "lang": "en", "question": "q", "choices": ["1", "2"], "label": 0})
    path.write_text(ok + "\n{not json\n")
    with pytest.raises(ValueError, match=r":2:"):
        load_jsonl(path)


def test_load_jsonl_choice_count_schema(tmp_path):
    path = tmp_path / "d.jsonl"
    _write_lines(path, [{"id": "a", "lang": "en", "question": "q", "choices": ["1", "2", "3"], "label": 0}])
    assert load_jsonl(path, n_choices=3)
    with pytest.raises(ValueError, match="expected 5 choices"):
        load_jsonl(path, n_choices=5)


def test_jsonl_round_trip(tmp_path):
    items = [Example(id="x1", lang="de", question="w q", choices=["a b", "c d"], gold=1)]
    path = tmp_path / "r.jsonl"
    save_jsonl(path, items)
    assert load_jsonl(path) == items


def test_pair_by_id():
    src = [Example(id="a", lang="en", question="q", choices=["1", "2"], gold=1)]
    tgt = [Example(id="a", lang="de", question="f", choices=["x", "y"], gold=1)]
    pairs = pair_by_id(src, tgt)
    assert pairs[0].source.lang == "en" and pairs[0].target.lang == "de"
    with pytest.raises(ValueError, match="counterpart"):
        pair_by_id(src, [Example(id="b", lang="de", question="f", choices=["x", "y"], gold=1)])
    with pytest.raises(ValueError, match="counterpart"):
        pair_by_id(src, tgt + [Example(id="c", lang="de", question="f", choices=["x", "y"], gold=1)])
    with pytest.raises(ValueError, match="gold"):
        pair_by_id(src, [Example(id="a", lang="de", question="f", choices=["x", "y"], gold=0)])


# -- synthetic world ---------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SynthWorldConfig(relation_density=0.0)
    with pytest.raises(ValueError):
        SynthWorldConfig(n_train=0)
    with pytest.raises(ValueError):
        SynthWorldConfig(choices_per_item=1)


def test_config_file_round_trip(tmp_path):
    cfg = SynthWorldConfig(seed=9, n_train=10)
    path = tmp_path / "cfg.json"
    cfg.to_json_file(path)
    assert SynthWorldConfig.from_json_file(path) == cfg
    obj = json.loads(path.read_text())
    obj["surprise"] = 1
    path.write_text(json.dumps(obj))
    with pytest.raises(ValueError, match="unknown config fields"):
        SynthWorldConfig.from_json_file(path)


def test_generation_deterministic_byte_identical(tmp_path):
    cfg = SynthWorldConfig(n_train=40, n_dev=20, n_test=20, n_parallel=10, seed=5)
    d1, d2 = tmp_path / "one", tmp_path / "two"
    save_world(generate_synthetic_world(cfg), d1)
    save_world(generate_synthetic_world(cfg), d2)
    names = sorted(p.name for p in d1.iterdir())
    assert names == sorted(p.name for p in d2.iterdir())
    for name in names:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def _concept_of(text: str, prefix: str) -> int:
    hits = [w for w in text.split() if w.startswith(prefix)]
    assert len(hits) == 1, f"expected one concept word in {text!r}"
    return int(hits[0][len(prefix):])


def test_exactly_one_related_choice(world):
    related = {frozenset(p) for p in world.relation}
    for src_items, _ in world.splits.values():
        for ex in src_items:
            q = _concept_of(ex.question, "en_c")
            flags = [frozenset((q, _concept_of(c, "en_c"))) in related for c in ex.choices]
            assert sum(flags) == 1
            assert flags[ex.gold]


def test_splits_disjoint_by_question_concept(world):
    seen = {}
    for name, (src_items, _) in world.splits.items():
        seen[name] = {_concept_of(ex.question, "en_c") for ex in src_items}
        assert seen[name] <= set(world.split_concepts[name])
    assert not seen["train"] & seen["dev"]
    assert not seen["train"] & seen["test"]
    assert not seen["dev"] & seen["test"]


def test_held_out_gold_partner_in_train_pool(world):
    train_pool = set(world.split_concepts["train"])
    for name in ("dev", "test"):
        for ex in world.splits[name][0]:
            assert _concept_of(ex.choices[ex.gold], "en_c") in train_pool


def test_languages_aligned(world):
    for name, (src_items, tgt_items) in world.splits.items():
        for s, t in zip(src_items, tgt_items):
            assert s.id == t.id and s.gold == t.gold
            assert s.lang == SOURCE_LANG and t.lang == TARGET_LANG
            # question translates word for word
            assert [w.replace("de_", "en_") for w in t.question.split()] == s.question.split()
            # choices translate up to within-choice word order
            for cs, ct in zip(s.choices, t.choices):
                assert sorted(w.replace("de_", "en_") for w in ct.split()) == sorted(cs.split())


def test_fillers_shared_across_choices(world):
    for ex in world.splits["train"][0]:
        filler_sets = [frozenset(w for w in c.split() if w.startswith("en_f")) for c in ex.choices]
        assert len(set(filler_sets)) == 1
        assert len(filler_sets[0]) == 2


def test_gold_index_roughly_uniform(world):
    counts = collections.Counter(ex.gold for ex in world.splits["train"][0])
    n = len(world.splits["train"][0])
    for j in range(world.config.choices_per_item):
        assert abs(counts[j] / n - 0.2) < 0.05


def test_vocab_covers_all_emitted_tokens(world):
    for src_items, tgt_items in world.splits.values():
        for ex in src_items + tgt_items:
            for text in [ex.question] + ex.choices:
                for w in text.split():
                    assert w in world.vocab


def test_parallel_pairs_from_train_pool(world):
    train_pool = set(world.split_concepts["train"])
    assert len(world.parallel) == world.config.n_parallel
    for pair in world.parallel:
        assert _concept_of(pair.source.question, "en_c") in train_pool
        assert pair.source.gold == pair.target.gold


def test_majority_baseline_near_chance(world):
    # [DERIVED] oracle: predict the most frequent training gold index on dev
    counts = collections.Counter(ex.gold for ex in world.splits["train"][0])
    majority = counts.most_common(1)[0][0]
    dev = world.splits["dev"][0]
    assert len(dev) >= 500
    acc = sum(ex.gold == majority for ex in dev) / len(dev)
    assert abs(acc - 1.0 / world.config.choices_per_item) <= 0.03


def test_world_files_written(tmp_path, world):
    paths = save_world(world, tmp_path / "w")
    truth = json.loads((tmp_path / "w" / "world.json").read_text())
    assert set(truth) == {"concepts", "fillers", "relation", "split_concepts"}
    assert truth["concepts"]["en"][0] == "en_c0"
    reloaded = load_jsonl(paths["dev.en"], n_choices=5)
    assert [e.id for e in reloaded] == [e.id for e in world.splits["dev"][0]]
    vocab_lines = (tmp_path / "w" / "vocab.txt").read_text().splitlines()
    assert vocab_lines[0] == "en_c0"
