import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segorder.errors import VocabularyError
from segorder.tokenizer import (
    CONTINUATION,
    SPECIAL_TOKENS,
    Vocab,
    detokenize,
    load_vocab,
    pre_split,
    wordpiece_tokenize,
)


def pieces(seg, vocab):
    return [vocab.tokens[i] for i in seg.token_ids]


def test_specials_only_file_gives_five_tokens(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("\n".join(SPECIAL_TOKENS) + "\n", encoding="utf-8")
    assert len(load_vocab(path)) == 5


def test_missing_mask_is_named():
    lines = [t + "\n" for t in SPECIAL_TOKENS if t != "[MASK]"]
    with pytest.raises(VocabularyError, match=r"\[MASK\]"):
        load_vocab(lines)


def test_duplicate_line_warns_and_keeps_first(caplog):
    lines = [t + "\n" for t in SPECIAL_TOKENS] + ["play\n", "play\n", "run\n"]
    with caplog.at_level(logging.WARNING, logger="segorder.tokenizer"):
        vocab = load_vocab(lines)
    assert "duplicates" in caplog.text
    assert vocab.tokens[5:] == ["play", "run"]


def test_thirty_token_vocabulary_round_trips_ids(tmp_path):
    words = list(SPECIAL_TOKENS) + [f"w{i}" for i in range(25)]
    path = tmp_path / "vocab.txt"
    path.write_text("\n".join(words) + "\n", encoding="utf-8")
    vocab = load_vocab(path)
    assert len(vocab) == 30
    for line_index, tok in enumerate(words):
        assert vocab.index[tok] == line_index
        assert vocab.tokens[line_index] == tok


def test_saved_vocab_keeps_its_fingerprint(tmp_path, toy_vocab):
    path = tmp_path / "vocab.txt"
    toy_vocab.save(path)
    assert load_vocab(path).fingerprint == toy_vocab.fingerprint


def test_pad_must_be_id_zero():
    with pytest.raises(VocabularyError):
        Vocab.from_tokens(["[UNK]", "[PAD]", "[CLS]", "[SEP]", "[MASK]"])


def test_continuation_pieces_split_a_word(toy_vocab):
    seg = wordpiece_tokenize("playing", toy_vocab)
    assert pieces(seg, toy_vocab) == ["play", "##ing"]
    assert seg.word_starts == [True, False]


def test_unmatchable_word_becomes_unk(toy_vocab):
    seg = wordpiece_tokenize("zzz", toy_vocab)
    assert pieces(seg, toy_vocab) == ["[UNK]"]
    assert seg.word_starts == [True]


def test_partially_matchable_word_becomes_single_unk(toy_vocab):
    assert pieces(wordpiece_tokenize("playzz", toy_vocab), toy_vocab) == ["[UNK]"]


def test_two_words_hand_trace(toy_vocab):
    seg = wordpiece_tokenize("play playing", toy_vocab)
    assert pieces(seg, toy_vocab) == ["play", "play", "##ing"]
    assert seg.word_starts == [True, True, False]


def test_over_long_word_is_unk():
    vocab = Vocab.from_tokens(list(SPECIAL_TOKENS) + ["a", "##a"], max_word_chars=5)
    assert pieces(wordpiece_tokenize("aaaaa", vocab), vocab) == ["a"] + ["##a"] * 4
    assert pieces(wordpiece_tokenize("aaaaaa", vocab), vocab) == ["[UNK]"]


def test_punctuation_is_its_own_word_and_case_is_kept():
    assert pre_split("Hello,world! ok") == ["Hello", ",", "world", "!", "ok"]
    assert pre_split("  ") == []


def test_empty_text_gives_empty_segment(toy_vocab):
    seg = wordpiece_tokenize("", toy_vocab)
    assert seg.token_ids == [] and seg.word_starts == []


def test_detokenize_glues_continuations(toy_vocab):
    ids = [toy_vocab.index["play"], toy_vocab.index["##ing"]]
    assert detokenize(ids, toy_vocab) == "playing"
    assert detokenize([], toy_vocab) == ""


def test_detokenize_unknown_id_is_index_error(toy_vocab):
    with pytest.raises(IndexError):
        detokenize([len(toy_vocab)], toy_vocab)


def test_every_in_vocab_word_round_trips(vocab):
    for tok in vocab.tokens:
        if tok in SPECIAL_TOKENS or tok.startswith(CONTINUATION):
            continue
        assert detokenize(wordpiece_tokenize(tok, vocab).token_ids, vocab) == tok


def longest_match_at(word, start, vocab):
    best = 0
    for end in range(start + 1, len(word) + 1):
        piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
        if piece in vocab.index:
            best = end
    return best


_alphabet = st.sampled_from("playingedrunabc.,")


@settings(max_examples=300, deadline=None)
@given(st.lists(st.text(_alphabet, min_size=1, max_size=10), max_size=6))
def test_greedy_pieces_are_never_a_prefix_of_a_longer_match(words):
    vocab = Vocab.from_tokens(list(SPECIAL_TOKENS) + ["play", "pla", "##ing", "##in", "##ed", "run", "a", "b",
                                                      "c", ".", ",", "##a", "##b"])
    text = " ".join(words)
    seg = wordpiece_tokenize(text, vocab)
    split = pre_split(text)
    # word groups partition the tokens, one group per pre-split word
    assert sum(seg.word_starts) == len(split)
    assert len(seg.word_starts) == len(seg.token_ids)
    if seg.token_ids:
        assert seg.word_starts[0]
    groups, cur = [], []
    for tok, start in zip(pieces(seg, vocab), seg.word_starts):
        if start and cur:
            groups.append(cur)
            cur = []
        cur.append(tok)
    if cur:
        groups.append(cur)
    for word, group in zip(split, groups):
        if group == ["[UNK]"]:
            continue
        pos = 0
        for tok in group:
            length = len(tok) - (len(CONTINUATION) if tok.startswith(CONTINUATION) else 0)
            assert pos + length == longest_match_at(word, pos, vocab)
            pos += length
        assert pos == len(word)
    # pure function
    assert wordpiece_tokenize(text, vocab) == seg
