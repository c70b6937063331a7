import pytest
import torch

from conceptloc.backbone import build_backbone
from conceptloc.conditioning import (PAIR_TEMPLATE, SINGLE_TEMPLATE, IdentifierToken,
                                     PromptTemplate, check_distinct, default_init_source,
                                     init_identifier_embedding, load_prompt_bank, render_prompt,
                                     strip_identifiers, toy_vocabulary)
from conceptloc.errors import ArgumentError, ConfigurationError

from conftest import TINY


def test_single_template_positions():
    p = render_prompt(SINGLE_TEMPLATE, [("<v>", "helmet")])
    assert p.text == "photo of a <v> helmet"
    assert p.words == ["photo", "of", "a", "<v>", "helmet"]
    pos = p.positions["<v>"]
    assert p.token_ids[pos] == toy_vocabulary().index["<v>"]
    assert p.token_ids[0] == toy_vocabulary().index["<bos>"]


def test_pair_template_positions():
    p = render_prompt(PAIR_TEMPLATE, [("<v1>", "pot"), ("<v2>", "penbag")])
    assert p.text == "photo of a <v1> pot and a <v2> penbag"
    vocab = toy_vocabulary()
    for ident in ("<v1>", "<v2>"):
        assert p.token_ids[p.positions[ident]] == vocab.index[ident]
    assert "<unk>" not in [vocab.tokens[i] for i in p.token_ids]


def test_arity_mismatch():
    with pytest.raises(ArgumentError):
        render_prompt(PAIR_TEMPLATE, [("<v1>", "pot")])
    with pytest.raises(ArgumentError):
        SINGLE_TEMPLATE.fill([("<v>", "a"), ("<v1>", "b")])
    with pytest.raises(ConfigurationError):
        PromptTemplate("a {V} and {V2}")


def test_identifier_lookup():
    vocab = toy_vocabulary()
    tok = IdentifierToken.lookup("<v3>", vocab)
    assert tok.vocab_id == vocab.index["<v3>"]
    assert tok.init_source_id == default_init_source(vocab) == vocab.index["thing"]
    with pytest.raises(ConfigurationError):
        IdentifierToken.lookup("<zzz>", vocab)
    with pytest.raises(ConfigurationError):
        IdentifierToken.lookup("<v1> <v2>", vocab)
    with pytest.raises(ConfigurationError):
        check_distinct([tok, IdentifierToken.lookup("<v3>", vocab)])


def test_init_copies_row_and_rejects_bad_source():
    bb = build_backbone(TINY)
    table = bb.token_embedding
    tok = IdentifierToken.lookup("<v1>", bb.vocab)
    init_identifier_embedding(tok, table)
    assert torch.equal(table.weight[tok.vocab_id], table.weight[tok.init_source_id])
    bad = IdentifierToken("<v1>", tok.vocab_id, len(bb.vocab))
    with pytest.raises(ConfigurationError):
        init_identifier_embedding(bad, table)


def test_shared_source_identifiers_diverge():
    bb = build_backbone(TINY)
    a, b = (IdentifierToken.lookup(s, bb.vocab) for s in ("<v1>", "<v2>"))
    for tok in (a, b):
        init_identifier_embedding(tok, bb.token_embedding)
    w = bb.token_embedding.weight
    assert torch.equal(w[a.vocab_id], w[b.vocab_id])
    opt = torch.optim.SGD(bb.text_encoder.parameters(), lr=0.5)
    g = torch.Generator().manual_seed(0)
    for ident, target in ((a, 1.0), (b, -1.0)):
        ids = render_prompt(SINGLE_TEMPLATE, [(ident.surface, "square")], bb.vocab).tensor()[None]
        opt.zero_grad()
        out = bb(torch.randn(1, 3, 32, 32, generator=g), 3, ids)
        (out - target).square().mean().backward()
        opt.step()
    assert not torch.equal(w[a.vocab_id], w[b.vocab_id])


def test_strip_identifiers():
    assert strip_identifiers("photo of a <v> dog", ["<v>"]) == "photo of a dog"
    assert strip_identifiers("photo of a dog", ["<v>"]) == "photo of a dog"
    assert strip_identifiers("<v1> pot and <v2> penbag", ["<v1>", "<v2>"]) == "pot and penbag"
    assert strip_identifiers(["a", "<v>", "b"], ["<v>"]) == ["a", "b"]


def test_prompt_banks_render():
    bb = build_backbone(TINY)
    singles, pairs = load_prompt_bank(arity=1), load_prompt_bank(arity=2)
    assert len(singles) == len(pairs) == 10
    for t in singles:
        render_prompt(t, [("<v1>", "square")], bb.vocab, bb.cfg.max_tokens)
    for t in pairs:
        render_prompt(t, [("<v1>", "square"), ("<v2>", "circle")], bb.vocab, bb.cfg.max_tokens)
