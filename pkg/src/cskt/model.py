"""Model container: encoder + gated head + vocabulary, applied per choice set.

A forward pass scores every choice of one example: each choice is encoded
(statement form concatenates question and choice; QA form marks the answer
span), run through the encoder, split by the head into (X, X~), and
classified. Training always classifies from X; evaluation may instead feed
X~ ("non-commonsense") or X + X~ ("both") to the same classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import Example, TokenSequence, Vocab, encode_qa, encode_statement
from .encoder import EncoderConfig, EncoderWeights, encode, init_encoder
from .head import HeadConfig, HeadOutputs, HeadWeights, choice_logits, extract, init_head, predict_index
from .tensor import Tensor, cross_entropy

ENCODINGS = ("statement", "qa")
EVAL_MODES = ("commonsense", "non-commonsense", "both")

__all__ = ["ModelConfig", "Model", "ChoiceSet", "ENCODINGS", "EVAL_MODES"]


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    head: HeadConfig

    def __post_init__(self):
        if self.encoder.d_model != self.head.d_model:
            raise ValueError(
                f"encoder d_model {self.encoder.d_model} != head d_model {self.head.d_model}"
            )

    def to_dict(self) -> dict:
        return {"encoder": dict(self.encoder.__dict__), "head": dict(self.head.__dict__)}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**obj["encoder"]), head=HeadConfig(**obj["head"]))


@dataclass
class ChoiceSet:
    """Everything produced while scoring one example's choices."""

    sequences: list[TokenSequence]
    outputs: list[HeadOutputs]
    logits: Tensor  # classifier over commonsense embeddings X

    @property
    def pred(self) -> int:
        return predict_index(self.logits)


class Model:
    def __init__(self, encoder_weights: EncoderWeights, head_weights: HeadWeights, vocab: Vocab):
        if encoder_weights.config.d_model != head_weights.config.d_model:
            raise ValueError("encoder and head disagree on d_model")
        if encoder_weights.config.vocab_size != len(vocab):
            raise ValueError(
                f"encoder vocab_size {encoder_weights.config.vocab_size} != vocab size {len(vocab)}"
            )
        self.encoder = encoder_weights
        self.head = head_weights
        self.vocab = vocab

    @classmethod
    def build(cls, config: ModelConfig, vocab: Vocab) -> "Model":
        if config.encoder.vocab_size != len(vocab):
            raise ValueError("config vocab_size does not match the vocabulary")
        return cls(init_encoder(config.encoder), init_head(config.head), vocab)

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder.config, head=self.head.config)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors, encoder first, in stable creation order."""
        out: dict[str, Tensor] = {}
        for name, t in self.encoder.parameters().items():
            out["encoder." + name] = t
        for name, t in self.head.parameters().items():
            out["head." + name] = t
        return out

    def encode_choice(self, example: Example, j: int, encoding: str) -> TokenSequence:
        if encoding == "statement":
            text = (example.question + " " + example.choices[j]).strip()
            return encode_statement(text, self.vocab, self.encoder.config.max_len)
        if encoding == "qa":
            return encode_qa(example.question, example.choices[j], self.vocab,
                             self.encoder.config.max_len)
        raise ValueError(f"unknown encoding {encoding!r}; choose from {ENCODINGS}")

    def forward_choice_set(self, example: Example, encoding: str = "statement") -> ChoiceSet:
        sequences, outputs = [], []
        for j in range(len(example.choices)):
            seq = self.encode_choice(example, j, encoding)
            states = encode(self.encoder, seq)
            outputs.append(extract(states, None, self.head))
            sequences.append(seq)
        logits = choice_logits([o.x for o in outputs], self.head)
        return ChoiceSet(sequences=sequences, outputs=outputs, logits=logits)

    def logits_for_mode(self, choice_set: ChoiceSet, mode: str) -> Tensor:
        """Classifier logits with X, X~, or their sum as the classifier input."""
        if mode == "commonsense":
            return choice_set.logits
        if mode == "non-commonsense":
            return choice_logits([o.x_nc for o in choice_set.outputs], self.head)
        if mode == "both":
            return choice_logits([o.x + o.x_nc for o in choice_set.outputs], self.head)
        raise ValueError(f"unknown mode {mode!r}; choose from {EVAL_MODES}")

    def ce_loss(self, choice_set: ChoiceSet, gold: int) -> Tensor:
        return cross_entropy(choice_set.logits, gold)

    def predict(self, example: Example, encoding: str = "statement", mode: str = "commonsense") -> int:
        cs = self.forward_choice_set(example, encoding)
        return predict_index(self.logits_for_mode(cs, mode))
