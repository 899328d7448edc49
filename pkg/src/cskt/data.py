"""Tokenization, dataset schemas, and the synthetic bilingual world generator.

Vocabulary and sequence forms
-----------------------------
Reserved token ids are fixed: [PAD]=0, [CLS]=1, [SEP]=2, [CLS_Q]=3, [UNK]=4.
A vocab file lists the non-reserved tokens one per line; line ``i`` (0-based)
holds the token with id ``5 + i``.

Two sequence forms exist. Statement form wraps whitespace tokens as
``[CLS] w1 .. wk [SEP]`` and is used when a question and one choice are
concatenated into a single statement. QA form is
``[CLS] q1 .. qm [SEP] [CLS_Q] a1 .. an [SEP]`` with segment marks set to 1
exactly on the answer tokens ``a1 .. an``.

Synthetic world
---------------
``generate_synthetic_world`` builds a closed bilingual world: concepts
``0..K-1`` joined by a symmetric relation R sampled at a given density
(concepts left without a partner get one added), plus language-specific
filler tokens with no relation signal. Each item asks about a concept ``c``;
exactly one choice names a concept related to ``c``, the distractor choices
name unrelated concepts, and all choices of an item share the same filler
tokens. Every item is emitted in both languages with aligned choices and the
same gold index; the target language permutes word order within each choice.
Splits are disjoint by question concept. Held-out (dev/test) items draw
their gold partner from the train concept pool so the tested relation edges
are observable, in one direction or the other, during training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
CLS_Q_ID = 3
UNK_ID = 4
RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[CLS_Q]", "[UNK]")

SOURCE_LANG = "en"
TARGET_LANG = "de"

__all__ = [
    "PAD_ID", "CLS_ID", "SEP_ID", "CLS_Q_ID", "UNK_ID", "RESERVED_TOKENS",
    "SOURCE_LANG", "TARGET_LANG",
    "Vocab", "TokenSequence", "Example", "ParallelPair",
    "encode_statement", "encode_qa", "decode_tokens",
    "load_jsonl", "save_jsonl", "pair_by_id",
    "SynthWorldConfig", "SynthWorld", "generate_synthetic_world",
    "save_world", "load_world_json",
]


class Vocab:
    """Dense token-to-id map with a fixed reserved block."""

    def __init__(self, tokens=()):
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        self._id_to_token: list[str] = list(RESERVED_TOKENS)
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if not token or token.split() != [token]:
            raise ValueError(f"invalid vocab token {token!r}")
        if token in self._token_to_id:
            return self._token_to_id[token]
        idx = len(self._id_to_token)
        self._token_to_id[token] = idx
        self._id_to_token.append(token)
        return idx

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise IndexError(f"token id {idx} out of range [0, {len(self._id_to_token)})")
        return self._id_to_token[idx]

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def non_reserved(self) -> list[str]:
        return self._id_to_token[len(RESERVED_TOKENS):]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.non_reserved()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


@dataclass
class TokenSequence:
    """Fixed-length encoded sequence with answer-span and pad masks."""

    ids: list[int]
    segment: list[int]   # 1 on answer-span tokens (QA form), else 0
    pad_mask: list[int]  # 1 on real tokens, 0 on padding

    def __post_init__(self):
        n = len(self.ids)
        if len(self.segment) != n or len(self.pad_mask) != n:
            raise ValueError("ids, segment and pad_mask must share one length")

    @property
    def content_length(self) -> int:
        return sum(self.pad_mask)

    def trimmed_ids(self) -> list[int]:
        return self.ids[: self.content_length]

    def trimmed_segment(self) -> list[int]:
        return self.segment[: self.content_length]


@dataclass
class Example:
    """One multiple-choice item in one language."""

    id: str
    lang: str
    question: str
    choices: list[str]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError(f"example {self.id}: need at least 2 choices, got {len(self.choices)}")
        if not 0 <= self.gold < len(self.choices):
            raise ValueError(f"example {self.id}: gold {self.gold} out of range for {len(self.choices)} choices")


@dataclass
class ParallelPair:
    """The same item in source and target language, choices aligned index-wise."""

    source: Example
    target: Example

    def __post_init__(self):
        if len(self.source.choices) != len(self.target.choices):
            raise ValueError(f"pair {self.source.id}: choice counts differ")
        if self.source.gold != self.target.gold:
            raise ValueError(f"pair {self.source.id}: gold indices differ")


# -- encoding ----------------------------------------------------------------


def _pad_to(ids: list[int], segment: list[int], max_len: int) -> TokenSequence:
    n = len(ids)
    pad = max_len - n
    return TokenSequence(
        ids=ids + [PAD_ID] * pad,
        segment=segment + [0] * pad,
        pad_mask=[1] * n + [0] * pad,
    )


def encode_statement(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """``[CLS] tokens [SEP]`` padded to ``max_len``; over-long text is truncated."""
    tokens = text.split()
    if not tokens:
        raise ValueError("statement is empty after tokenization")
    tokens = tokens[: max_len - 2]
    ids = [CLS_ID] + vocab.encode(tokens) + [SEP_ID]
    return _pad_to(ids, [0] * len(ids), max_len)


def encode_qa(question: str, answer: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """``[CLS] q [SEP] [CLS_Q] a [SEP]`` with segment marks on the answer span.

    The answer keeps as many tokens as fit (at least one, else an error); the
    question is then truncated to the remaining room and may be empty.
    """
    a_tokens = answer.split()
    if not a_tokens:
        raise ValueError("answer is empty after tokenization")
    room = max_len - 4  # [CLS] [SEP] [CLS_Q] [SEP]
    if room < 1:
        raise ValueError(f"max_len {max_len} cannot fit even one answer token")
    a_tokens = a_tokens[:room]
    q_tokens = question.split()[: room - len(a_tokens)]
    ids = [CLS_ID] + vocab.encode(q_tokens) + [SEP_ID, CLS_Q_ID] + vocab.encode(a_tokens) + [SEP_ID]
    segment = [0] * (len(q_tokens) + 3) + [1] * len(a_tokens) + [0]
    return _pad_to(ids, segment, max_len)


def decode_tokens(seq: TokenSequence, vocab: Vocab) -> list[str]:
    """Content tokens of a sequence, dropping specials and padding."""
    out = []
    for i, mask in zip(seq.ids, seq.pad_mask):
        if mask and i not in (PAD_ID, CLS_ID, SEP_ID, CLS_Q_ID):
            out.append(vocab.token_of(i))
    return out


# -- JSONL i/o ---------------------------------------------------------------


def load_jsonl(path, n_choices: int | None = None) -> list[Example]:
    """Read one example per line; any malformed line is an error naming it."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                ex = Example(
                    id=str(obj["id"]),
                    lang=str(obj["lang"]),
                    question=str(obj["question"]),
                    choices=[str(c) for c in obj["choices"]],
                    gold=int(obj["label"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if n_choices is not None and len(ex.choices) != n_choices:
                raise ValueError(
                    f"{path}:{lineno}: expected {n_choices} choices, got {len(ex.choices)}"
                )
            examples.append(ex)
    return examples


def save_jsonl(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(
                {"id": ex.id, "lang": ex.lang, "question": ex.question,
                 "choices": ex.choices, "label": ex.gold},
                ensure_ascii=False,
            ) + "\n")


def pair_by_id(source, target) -> list[ParallelPair]:
    """Join two example lists on id, keeping the source order."""
    by_id = {ex.id: ex for ex in target}
    if len(by_id) != len(target):
        raise ValueError("duplicate ids in target examples")
    pairs = []
    for ex in source:
        if ex.id not in by_id:
            raise ValueError(f"no target counterpart for id {ex.id!r}")
        pairs.append(ParallelPair(source=ex, target=by_id[ex.id]))
    if len(by_id) != len(pairs):
        missing = sorted(set(by_id) - {p.source.id for p in pairs})
        raise ValueError(f"no source counterpart for id {missing[0]!r}")
    return pairs


# -- synthetic world ---------------------------------------------------------


@dataclass
class SynthWorldConfig:
    """Knobs of the generated bilingual world; all generation is seed-pure."""

    n_concepts: int = 24
    n_filler_tokens: int = 30
    relation_density: float = 0.2
    choices_per_item: int = 5
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    n_parallel: int = 4000
    seed: int = 0

    def __post_init__(self):
        for name in ("n_concepts", "n_filler_tokens", "choices_per_item",
                     "n_train", "n_dev", "n_test", "n_parallel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.relation_density < 1.0:
            raise ValueError("relation_density must lie in (0, 1)")
        if self.choices_per_item < 2:
            raise ValueError("choices_per_item must be at least 2")
        if self.n_filler_tokens < 4:
            raise ValueError("need at least 4 filler tokens")

    def to_json_file(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_json_file(cls, path) -> "SynthWorldConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**obj)


@dataclass
class SynthWorld:
    """Generated datasets plus the ground truth that explains them."""

    config: SynthWorldConfig
    vocab: Vocab
    concept_words: dict[str, list[str]]   # lang -> word per concept index
    filler_words: dict[str, list[str]]
    relation: list[tuple[int, int]]       # unordered related pairs, i < j
    split_concepts: dict[str, list[int]]  # question concepts per split
    splits: dict[str, tuple[list[Example], list[Example]]]  # name -> (source, target)
    parallel: list[ParallelPair] = field(repr=False, default_factory=list)


def _sample_relation(rng, k: int, density: float):
    adj: list[set[int]] = [set() for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            if rng.random() < density:
                adj[i].add(j)
                adj[j].add(i)
    # every concept must have at least one compatible partner
    for c in range(k):
        if not adj[c]:
            partner = int(rng.integers(k - 1))
            if partner >= c:
                partner += 1
            adj[c].add(partner)
            adj[partner].add(c)
    return adj


def _split_concepts(rng, adj, n_choices: int):
    k = len(adj)
    usable = [c for c in range(k)
              if adj[c] and (k - 1 - len(adj[c])) >= n_choices - 1]
    if len(usable) < 3:
        raise ValueError(
            f"only {len(usable)} of {k} concepts have a partner and enough "
            f"non-partners for {n_choices - 1} distractors; adjust n_concepts "
            f"or relation_density"
        )
    order = [usable[i] for i in rng.permutation(len(usable))]
    n_held = max(1, round(0.15 * len(usable)))
    dev = order[:n_held]
    test = order[n_held: 2 * n_held]
    train = order[2 * n_held:]
    if not train or not test:
        raise ValueError("too few usable concepts to form disjoint train/dev/test splits")
    # a held-out concept is only testable if some train concept is its partner
    train_set = set(train)
    for held in (dev, test):
        for c in list(held):
            if not adj[c] & train_set:
                held.remove(c)
                train.append(c)
                train_set.add(c)
    if not dev or not test:
        raise ValueError("held-out concepts all lacked train-pool partners; re-seed or raise density")
    return {"train": train, "dev": dev, "test": test}


def _build_item(rng, world, item_id: str, question_pool, partner_pool):
    """One item in both languages. ``partner_pool`` limits the gold concept."""
    cfg = world["config"]
    adj = world["adj"]
    n_c = cfg.choices_per_item

    c = question_pool[int(rng.integers(len(question_pool)))]
    partners = sorted(adj[c] & partner_pool) if partner_pool is not None else sorted(adj[c])
    gold_concept = partners[int(rng.integers(len(partners)))]
    non_partners = [d for d in range(cfg.n_concepts) if d != c and d not in adj[c]]
    picked = rng.choice(len(non_partners), size=n_c - 1, replace=False)
    distractors = [non_partners[int(i)] for i in picked]

    filler_ids = rng.choice(cfg.n_filler_tokens, size=4, replace=False)
    q_fill = [int(filler_ids[0]), int(filler_ids[1])]
    c_fill = [int(filler_ids[2]), int(filler_ids[3])]

    gold_idx = int(rng.integers(n_c))
    concepts_by_slot = distractors[:gold_idx] + [gold_concept] + distractors[gold_idx:]

    q_pos = int(rng.integers(len(q_fill) + 1))
    c_pos = [int(rng.integers(len(c_fill) + 1)) for _ in range(n_c)]
    tgt_perms = [rng.permutation(len(c_fill) + 1) for _ in range(n_c)]

    def words(lang: str, concept: int, fillers, pos: int) -> list[str]:
        toks = [world["filler_words"][lang][f] for f in fillers]
        toks.insert(pos, world["concept_words"][lang][concept])
        return toks

    out = {}
    for lang in (SOURCE_LANG, TARGET_LANG):
        q_words = words(lang, c, q_fill, q_pos)
        choices = []
        for slot, concept in enumerate(concepts_by_slot):
            toks = words(lang, concept, c_fill, c_pos[slot])
            if lang == TARGET_LANG:
                toks = [toks[int(p)] for p in tgt_perms[slot]]
            choices.append(" ".join(toks))
        out[lang] = Example(
            id=item_id, lang=lang, question=" ".join(q_words),
            choices=choices, gold=gold_idx,
        )
    return out


def generate_synthetic_world(cfg: SynthWorldConfig) -> SynthWorld:
    """Deterministic world and datasets from the config seed."""
    rng = np.random.default_rng(cfg.seed)
    adj = _sample_relation(rng, cfg.n_concepts, cfg.relation_density)
    split_concepts = _split_concepts(rng, adj, cfg.choices_per_item)

    concept_words = {
        SOURCE_LANG: [f"en_c{i}" for i in range(cfg.n_concepts)],
        TARGET_LANG: [f"de_c{i}" for i in range(cfg.n_concepts)],
    }
    filler_words = {
        SOURCE_LANG: [f"en_f{j}" for j in range(cfg.n_filler_tokens)],
        TARGET_LANG: [f"de_f{j}" for j in range(cfg.n_filler_tokens)],
    }
    vocab = Vocab(
        concept_words[SOURCE_LANG] + filler_words[SOURCE_LANG]
        + concept_words[TARGET_LANG] + filler_words[TARGET_LANG]
    )

    world = {"config": cfg, "adj": adj,
             "concept_words": concept_words, "filler_words": filler_words}
    train_pool = set(split_concepts["train"])

    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    splits: dict[str, tuple[list[Example], list[Example]]] = {}
    for name in ("train", "dev", "test"):
        src_items, tgt_items = [], []
        partner_pool = None if name == "train" else train_pool
        for t in range(sizes[name]):
            both = _build_item(rng, world, f"{name}-{t:05d}",
                               split_concepts[name], partner_pool)
            src_items.append(both[SOURCE_LANG])
            tgt_items.append(both[TARGET_LANG])
        splits[name] = (src_items, tgt_items)

    parallel = []
    for t in range(cfg.n_parallel):
        both = _build_item(rng, world, f"par-{t:05d}", split_concepts["train"], None)
        parallel.append(ParallelPair(source=both[SOURCE_LANG], target=both[TARGET_LANG]))

    relation = sorted((i, j) for i in range(cfg.n_concepts) for j in adj[i] if i < j)
    return SynthWorld(
        config=cfg, vocab=vocab, concept_words=concept_words,
        filler_words=filler_words, relation=relation,
        split_concepts={k: [int(c) for c in v] for k, v in split_concepts.items()},
        splits=splits, parallel=parallel,
    )


def save_world(world: SynthWorld, outdir) -> dict[str, str]:
    """Write config, vocab, ground truth and all datasets; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    world.config.to_json_file(outdir / "config.json")
    paths["config"] = str(outdir / "config.json")
    world.vocab.save(outdir / "vocab.txt")
    paths["vocab"] = str(outdir / "vocab.txt")

    truth = {
        "concepts": world.concept_words,
        "fillers": world.filler_words,
        "relation": [list(p) for p in world.relation],
        "split_concepts": world.split_concepts,
    }
    (outdir / "world.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["world"] = str(outdir / "world.json")

    for name, (src_items, tgt_items) in world.splits.items():
        for lang, items in ((SOURCE_LANG, src_items), (TARGET_LANG, tgt_items)):
            p = outdir / f"{name}.{lang}.jsonl"
            save_jsonl(p, items)
            paths[f"{name}.{lang}"] = str(p)
    for lang, items in ((SOURCE_LANG, [p.source for p in world.parallel]),
                        (TARGET_LANG, [p.target for p in world.parallel])):
        p = outdir / f"parallel.{lang}.jsonl"
        save_jsonl(p, items)
        paths[f"parallel.{lang}"] = str(p)
    return paths


def load_world_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
