"""Tests for school label spaces and school caps."""
import numpy as np
import pytest

from conftest import make_panel
from src.cardinality import apply_school_cap, generate_school_space, generate_state_labels, school_hash


def test_state_labels_formats():
    assert generate_state_labels(3) == ["S01", "S02", "S03"]
    assert generate_state_labels(2, "st-%d") == ["st-1", "st-2"]


def test_school_space_is_state_major():
    ids, state_of, labels = generate_school_space(2, 3)
    assert ids == ["S01-001", "S01-002", "S01-003", "S02-001", "S02-002", "S02-003"]
    assert state_of == [0, 0, 0, 1, 1, 1]
    assert labels == ["S01", "S02"]


def test_cap_first_n():
    panel = make_panel(np.arange(24).reshape(6, 4), states=[0, 0, 1, 1, 2, 2])
    capped = apply_school_cap(panel, 3, "first_n")
    assert capped.school_ids == panel.school_ids[:3]
    assert capped.n_states == 2
    assert capped.state_of.tolist() == [0, 0, 1]


def test_cap_hash_is_deterministic_and_ordered():
    panel = make_panel(np.arange(40).reshape(10, 4), states=[0] * 10)
    a = apply_school_cap(panel, 4, "hash")
    b = apply_school_cap(panel, 4, "hash")
    assert a.school_ids == b.school_ids
    positions = [panel.school_ids.index(s) for s in a.school_ids]
    assert positions == sorted(positions)
    kept_hashes = max(school_hash(s) for s in a.school_ids)
    dropped = [s for s in panel.school_ids if s not in a.school_ids]
    assert all(school_hash(s) > kept_hashes for s in dropped)


def test_cap_noop_and_unknown_strategy():
    panel = make_panel(np.ones((2, 3), dtype=int))
    assert apply_school_cap(panel, 5) is panel
    with pytest.raises(ValueError):
        apply_school_cap(panel, 1, "random")
