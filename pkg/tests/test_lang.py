import numpy as np
import pytest

from bimanual_transfer.lang import EMBED_DIM, Instruction, embed, template_embeddings, tokenize


def test_embed_unit_norm_and_deterministic():
    a, b = embed("open the red drawer"), embed("open the red drawer")
    assert a.shape == (EMBED_DIM,)
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert np.array_equal(a, b)


def test_embed_is_case_and_punctuation_insensitive():
    assert np.array_equal(embed("Press the button!"), embed("press the button"))


def test_distinct_instructions_differ():
    assert not np.allclose(embed("lift the tray"), embed("push the box"))


def test_seed_changes_table():
    assert not np.allclose(embed("lift the tray", seed=0), embed("lift the tray", seed=1))


def test_empty_text_raises():
    with pytest.raises(ValueError):
        tokenize("  ?! ")


def test_fill_replaces_slots_in_order():
    ins = Instruction.fill("push the ___ and ___ button", ["red", "green"], 3)
    assert ins.filled_text == "push the red and green button"
    assert ins.variation_id == 3


def test_fill_slot_count_mismatch():
    with pytest.raises(ValueError):
        Instruction.fill("pick up the ___ block", [])


def test_template_embeddings_errors():
    with pytest.raises(ValueError):
        template_embeddings([])
    with pytest.raises(ValueError):
        template_embeddings(["a b", "a b"])
