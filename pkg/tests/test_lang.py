import numpy as np
import pytest

from million.lang import (EmbeddingTable, InstructionBank, ParseError, default_bank, encode_instruction,
                          load_embeddings, load_instruction_config, sample_instruction, tokenize)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_fifty_values_per_token(tmp_path):
    vals = " ".join(f"{0.01 * i:.2f}" for i in range(50))
    table = load_embeddings(write(tmp_path, "e.txt", f"push {vals}\n"))
    assert table.vocab["push"].shape == (50,)
    assert table.vocab["push"][1] == pytest.approx(0.01)


def test_empty_file_falls_back_to_oov(tmp_path):
    table = load_embeddings(write(tmp_path, "e.txt", ""), oov_policy="zero")
    assert len(table) == 0
    assert np.all(table.lookup("anything") == 0)
    hashed = load_embeddings(write(tmp_path, "h.txt", ""), oov_policy="hash")
    v = hashed.lookup("anything")
    assert v.shape == (50,) and np.any(v != 0)
    np.testing.assert_array_equal(v, hashed.lookup("anything"))


def test_duplicate_token_counted_once(tmp_path):
    row = " ".join(["0.5"] * 50)
    table = load_embeddings(write(tmp_path, "e.txt", f"a {row}\nb {row}\na {row}\n"))
    assert len(table) == 2
    assert table.duplicates == 1


def test_wrong_width_reports_line(tmp_path):
    row = " ".join(["0.5"] * 50)
    path = write(tmp_path, "e.txt", f"a {row}\nb 0.1 0.2\n")
    with pytest.raises(ParseError, match=":2"):
        load_embeddings(path)


def test_non_numeric_value_reports_line(tmp_path):
    row = " ".join(["0.5"] * 49)
    with pytest.raises(ParseError, match=":1"):
        load_embeddings(write(tmp_path, "e.txt", f"a x {row}\n"))


@pytest.mark.parametrize("text,tokens", [
    ("Push to goal_pos", ["push", "to", "goal_pos"]),
    ("", []),
    ("Press button down.", ["press", "button", "down"]),
    ("  pick   AND place ", ["pick", "and", "place"]),
])
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


def test_encode_matches_lookup():
    bank = default_bank()
    table = bank.table
    tokens = ["push", "the", "puck"]
    seq = encode_instruction(tokens, table)
    assert seq.shape == (3, 50)
    for row, tok in zip(seq, tokens):
        np.testing.assert_array_equal(row, table.lookup(tok))
    np.testing.assert_array_equal(seq, encode_instruction(tokens, table))


def test_shipped_templates_round_trip():
    bank = default_bank()
    for task in bank.tasks:
        for tpl, enc in zip(bank[task].templates, bank[task].encoded):
            assert len(enc) == len(tokenize(" ".join(tpl)))


def test_single_template_always_chosen():
    table = EmbeddingTable()
    bank = InstructionBank({"t": ["reach the goal"]}, table)
    rng = np.random.default_rng(0)
    assert all(bank.sample("t", rng)[0] == 0 for _ in range(50))


def test_three_templates_uniform():
    bank = InstructionBank({"t": ["a b", "c d", "e f"]}, EmbeddingTable())
    rng = np.random.default_rng(7)
    counts = np.bincount([bank.sample("t", rng)[0] for _ in range(3000)], minlength=3)
    assert np.all(np.abs(counts - 1000) <= 150)


def test_retry_can_pick_another_template():
    bank = default_bank()
    rng = np.random.default_rng(3)
    picks = {bank.sample("push", rng)[0] for _ in range(50)}
    assert len(picks) > 1


def test_sample_instruction_shape():
    bank = default_bank()
    seq = sample_instruction(bank, "reach", np.random.default_rng(0))
    assert seq.ndim == 2 and seq.shape[1] == 50 and len(seq) >= 1


def test_unknown_task_raises():
    with pytest.raises(KeyError):
        default_bank().sample("juggle", np.random.default_rng(0))


def test_instruction_config_errors(tmp_path):
    with pytest.raises(ParseError, match=":1"):
        load_instruction_config(write(tmp_path, "i.txt", "reach the goal\n"))
    with pytest.raises(ParseError):
        load_instruction_config(write(tmp_path, "j.txt", "[reach]\n[push]\npush it\n"))


def test_similar_words_are_close():
    table = default_bank().table
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)  # noqa: E731
    assert cos(table.lookup("push"), table.lookup("shove")) > cos(table.lookup("push"), table.lookup("left"))
