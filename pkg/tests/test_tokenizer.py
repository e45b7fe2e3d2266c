import pytest
from hypothesis import given
from hypothesis import strategies as st

from lobmm.feed import MsgType, RawMessage, Side
from lobmm.tokenizer import (
    MASK_ID,
    PAD,
    PAD_ID,
    SPECIALS,
    UNK_ID,
    UNKNOWN,
    MsgComponents,
    TokenizerConfig,
    Vocabulary,
    all_components,
    build_vocab,
    decode_components,
    encode,
    max_vocab_size,
    parse_token,
    quantize,
    stringify,
    tokenize_messages,
)

CFG = TokenizerConfig()


def exhaustive_vocab():
    return build_vocab(stringify(c) for c in all_components())


def test_quantize_examples():
    assert quantize(4, CFG.price_levels, 1000) == (3, 3, 5, False)
    assert quantize(100, CFG.volume_levels, 1500).exact
    assert quantize(0, CFG.price_levels, 1000) == (0, 0, 1, True)
    assert quantize(5000, CFG.volume_levels, 1500) == (3, 200, 1500, False)
    with pytest.raises(ValueError):
        quantize(-1, CFG.price_levels, 1000)


@given(st.integers(0, 1000))
def test_bins_partition(v):
    b = quantize(v, CFG.price_levels, 1000)
    assert b.lower <= v and (v < b.upper or (v == 1000 and b.upper == 1000))
    owners = [i for i, lo in enumerate(CFG.price_levels) if lo <= v < (CFG.price_levels + (1001,))[i + 1]]
    assert owners == [b.index]


def test_stringify_examples():
    assert stringify(MsgComponents(Side.SELL, MsgType.NEW, 3, 2, False)) == "S:1:P3:V100:N"
    assert stringify(MsgComponents(Side.BUY, MsgType.EXECUTE, 4, 2, True)) == "B:4:P0:V100:Y"
    assert PAD == "[PAD]"


def test_parse_rejects_garbage():
    for s in ("S:1:P4:V100:N", "X:1:P3:V100:N", "S:9:P3:V100:N", "S:1:P3:V100", "[PAD]"):
        with pytest.raises(ValueError):
            parse_token(s)


def test_exhaustive_roundtrip():
    vocab = exhaustive_vocab()
    failures = 0
    for c in all_components():
        tid = vocab.id_of(stringify(c))
        failures += tid < len(SPECIALS) or decode_components(tid, vocab) != c.canonical()
    assert len(all_components()) == 480 and failures == 0


def test_exhaustive_vocab_size():
    vocab = exhaustive_vocab()
    # Execute and Hidden collapse onto P0: 480 - 2*2*5*4*2 = 320 message tokens
    assert len(vocab) == 323 <= max_vocab_size() == 483
    assert vocab.tokens[:3] == list(SPECIALS)
    assert vocab.tokens[3:] == sorted(vocab.tokens[3:])


def test_no_priced_execute_tokens():
    for tok in exhaustive_vocab().tokens[3:]:
        c = parse_token(tok)
        if c.mtype in (MsgType.EXECUTE, MsgType.HIDDEN):
            assert c.price_bin == 0


def test_single_message_corpus():
    assert len(build_vocab(["S:1:P3:V100:N"] * 7)) == 4
    with pytest.raises(ValueError):
        build_vocab([])


def test_encode_and_unk():
    vocab = build_vocab(["S:1:P3:V100:Y"])
    tok = encode(RawMessage(0, MsgType.NEW, Side.SELL, 1004, 100, 1), 1000, vocab)
    assert tok.token_id == 3 and tok.components == MsgComponents(Side.SELL, MsgType.NEW, 3, 2, True)
    assert decode_components(tok.token_id, vocab) == tok.components
    other = encode(RawMessage(0, MsgType.NEW, Side.SELL, 1004, 120, 1), 1000, vocab)
    assert other.token_id == UNK_ID
    assert decode_components(UNK_ID, vocab) is UNKNOWN


def test_decode_specials_error():
    vocab = exhaustive_vocab()
    for tid in (PAD_ID, MASK_ID, len(vocab)):
        with pytest.raises(ValueError):
            decode_components(tid, vocab)


def test_vocab_file_roundtrip(tmp_path):
    vocab = exhaustive_vocab()
    vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == vocab.tokens
    with pytest.raises(ValueError):
        Vocabulary(["a", "b", "c"])


def test_tokenize_uses_book_context():
    msgs = [
        RawMessage(0, MsgType.NEW, Side.BUY, 1000, 100, 1),
        RawMessage(1, MsgType.NEW, Side.SELL, 1003, 50, 2),
        RawMessage(2, MsgType.NEW, Side.BUY, 998, 120, 3),
        RawMessage(3, MsgType.EXECUTE, Side.BUY, 1000, 100, 1),
    ]
    assert tokenize_messages(msgs) == ["B:1:P10:V100:Y", "S:1:P3:V50:Y", "B:1:P5:V100:N", "B:4:P0:V100:Y"]


def test_config_validation():
    with pytest.raises(ValueError):
        TokenizerConfig(price_levels=(1, 2))
    with pytest.raises(ValueError):
        TokenizerConfig(volume_levels=(0, 50, 50))
    assert TokenizerConfig.from_dict(CFG.to_dict()) == CFG
