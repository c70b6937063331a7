"""Identifier tokens, prompt templates and the toy word-level vocabulary."""
from __future__ import annotations

import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import torch

from .errors import ArgumentError, ConfigurationError

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
IDENTIFIER_SLOTS = ("<v>",) + tuple(f"<v{i}>" for i in range(1, 10))
TOY_VOCAB_SIZE = 2048
# Token id used for identifier initialization under the CLIP tokenizer.
CLIP_INIT_TOKEN_ID = 48136
NEUTRAL_NOUN = "thing"
MAX_TOKENS = 24

_TOKEN_RE = re.compile(r"<[^<>\s]+>|[^\s]+")


def _data_lines(name: str) -> list[str]:
    text = resources.files("conceptloc.data").joinpath(name).read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


class Vocabulary:
    """Word-level vocabulary: specials, reserved identifier slots, words, unused fill."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("vocabulary contains duplicate entries")

    @classmethod
    def toy(cls, size: int = TOY_VOCAB_SIZE) -> "Vocabulary":
        toks = list(SPECIALS) + list(IDENTIFIER_SLOTS) + _data_lines("vocab_words.txt")
        if len(toks) > size:
            raise ConfigurationError(f"toy vocabulary needs at least {len(toks)} entries")
        toks += [f"<unused_{i}>" for i in range(size - len(toks))]
        return cls(toks)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, self.index["<unk>"])

    @property
    def pad_id(self):
        return self.index["<pad>"]

    def split(self, text: str) -> list[str]:
        words = []
        for tok in _TOKEN_RE.findall(text):
            if not tok.startswith("<"):
                tok = tok.lower().strip(string.punctuation)
            if tok:
                words.append(tok)
        return words

    def encode(self, words: Sequence[str], max_len: int = MAX_TOKENS) -> list[int]:
        """``<bos> words <eos>`` padded to ``max_len``."""
        ids = [self.index["<bos>"]] + [self.id(w) for w in words] + [self.index["<eos>"]]
        if len(ids) > max_len:
            raise ArgumentError(f"prompt of {len(words)} words exceeds {max_len - 2} tokens")
        return ids + [self.pad_id] * (max_len - len(ids))


@lru_cache(maxsize=1)
def toy_vocabulary() -> Vocabulary:
    return Vocabulary.toy()


def default_init_source(vocab: Vocabulary) -> int:
    if len(vocab) > CLIP_INIT_TOKEN_ID:
        return CLIP_INIT_TOKEN_ID
    return vocab.index[NEUTRAL_NOUN]


@dataclass(frozen=True)
class IdentifierToken:
    surface: str
    vocab_id: int
    init_source_id: int

    @classmethod
    def lookup(cls, surface: str, vocab: Vocabulary, init_source_id: int | None = None):
        if len(vocab.split(surface)) != 1 or surface.strip() != surface:
            raise ConfigurationError(f"identifier {surface!r} must be a single token")
        if surface not in vocab:
            raise ConfigurationError(f"identifier {surface!r} is not in the vocabulary")
        src = default_init_source(vocab) if init_source_id is None else int(init_source_id)
        return cls(surface, vocab.index[surface], src)


def check_distinct(identifiers: Iterable[IdentifierToken]):
    ids = [i.vocab_id for i in identifiers]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("identifiers in one run must be distinct")


_PLACEHOLDER_RE = re.compile(r"\{(V1|V2|V|class1|class2|class)\}")


@dataclass(frozen=True)
class PromptTemplate:
    text: str

    def __post_init__(self):
        names = set(_PLACEHOLDER_RE.findall(self.text))
        if names == {"V", "class"}:
            arity = 1
        elif names == {"V1", "V2", "class1", "class2"}:
            arity = 2
        else:
            raise ConfigurationError(f"template {self.text!r} mixes or lacks placeholders: {sorted(names)}")
        object.__setattr__(self, "arity", arity)

    def fill(self, bindings: Sequence[tuple[str, str]]) -> str:
        if len(bindings) != self.arity:
            raise ArgumentError(f"template of arity {self.arity} got {len(bindings)} bindings")
        if self.arity == 1:
            values = {"V": bindings[0][0], "class": bindings[0][1]}
        else:
            values = {"V1": bindings[0][0], "class1": bindings[0][1],
                      "V2": bindings[1][0], "class2": bindings[1][1]}
        return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], self.text)


SINGLE_TEMPLATE = PromptTemplate("photo of a {V} {class}")
PAIR_TEMPLATE = PromptTemplate("photo of a {V1} {class1} and a {V2} {class2}")


@dataclass
class RenderedPrompt:
    text: str
    words: list[str]
    token_ids: list[int]
    positions: dict[str, int]
    """identifier surface -> index into ``token_ids`` (offset by the leading <bos>)."""

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.token_ids, dtype=torch.long)


def render_prompt(template: PromptTemplate, bindings: Sequence[tuple[str, str]],
                  vocab: Vocabulary | None = None, max_len: int = MAX_TOKENS) -> RenderedPrompt:
    vocab = vocab or toy_vocabulary()
    if len(bindings) != template.arity:
        raise ArgumentError(f"template of arity {template.arity} got {len(bindings)} bindings")
    for ident, _ in bindings:
        IdentifierToken.lookup(ident, vocab)
    text = template.fill(bindings)
    words = vocab.split(text)
    ids = vocab.encode(words, max_len)
    positions = {}
    for ident, _ in bindings:
        hits = [i + 1 for i, w in enumerate(words) if w == ident]
        if len(hits) != 1:
            raise ConfigurationError(f"identifier {ident!r} appears {len(hits)} times in {text!r}")
        positions[ident] = hits[0]
    return RenderedPrompt(text, words, ids, positions)


def render_class_prompt(class_name: str, vocab: Vocabulary | None = None,
                        max_len: int = MAX_TOKENS) -> RenderedPrompt:
    vocab = vocab or toy_vocabulary()
    words = vocab.split(class_name)
    return RenderedPrompt(class_name, words, vocab.encode(words, max_len), {})


def init_identifier_embedding(token: IdentifierToken, table: torch.nn.Embedding | torch.Tensor):
    """Copy the source row into the identifier row (in place)."""
    weight = table.weight if isinstance(table, torch.nn.Embedding) else table
    n = weight.shape[0]
    if not 0 <= token.init_source_id < n:
        raise ConfigurationError(f"init source id {token.init_source_id} outside vocabulary of {n}")
    if not 0 <= token.vocab_id < n:
        raise ConfigurationError(f"identifier id {token.vocab_id} outside vocabulary of {n}")
    with torch.no_grad():
        weight[token.vocab_id] = weight[token.init_source_id].clone()


def strip_identifiers(tokens, identifiers):
    """Drop identifier tokens, keeping everything else in order.

    Works on a word list or on a plain string (returned re-joined with
    single spaces).
    """
    surfaces = {i.surface if isinstance(i, IdentifierToken) else i for i in identifiers}
    if isinstance(tokens, str):
        return " ".join(w for w in _TOKEN_RE.findall(tokens) if w not in surfaces)
    return [w for w in tokens if w not in surfaces]


def load_prompt_bank(path=None, arity: int = 1) -> list[PromptTemplate]:
    """Templates one per line; defaults to the bundled stand-in bank."""
    if path is None:
        lines = _data_lines("prompt_bank.txt" if arity == 1 else "prompt_bank_pair.txt")
    else:
        from pathlib import Path

        lines = [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]
    templates = [PromptTemplate(l) for l in lines]
    bad = [t.text for t in templates if t.arity != arity]
    if bad:
        raise ConfigurationError(f"prompt bank has templates of the wrong arity: {bad}")
    return templates
