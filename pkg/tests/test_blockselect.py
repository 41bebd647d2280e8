import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import TINY
from ditbs.blockselect import (DistanceTable, ExternalEmbedder, RandomConvEmbedder,
                               build_distance_table, select_skip_indices, semantic_distance)
from ditbs.model import ToyDiT

PROMPT = [1, 16, 9, 12]


def brute_force(front, back, k):
    """Enumerate every (n, m) with n + m = k, n, m >= 1; min by (score, n)."""
    cands = [(front[n - 1] + back[k - n - 1], n) for n in range(1, k)]
    _, n = min(cands)
    return n, k - n


def test_distance_examples():
    x = np.array([0.3, -1.2, 2.0])
    assert semantic_distance(x, x) == pytest.approx(0.0, abs=1e-15)
    assert semantic_distance(x, -x) == pytest.approx(2.0)
    assert semantic_distance([1, 0], [math.sqrt(0.5), math.sqrt(0.5)]) == pytest.approx(0.29289, abs=1e-5)
    with pytest.raises(ValueError, match="dims"):
        semantic_distance([1, 0], [1, 0, 0])
    with pytest.raises(ValueError, match="zero"):
        semantic_distance([0, 0], [1, 0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6), st.floats(0.1, 100))
def test_distance_range_and_scale(v, c):
    a = np.array(v)
    b = np.roll(a, 1) + 0.5
    if not np.linalg.norm(a) or not np.linalg.norm(b):
        return
    d = semantic_distance(a, b)
    assert 0 <= d <= 2
    assert semantic_distance(c * a, b) == pytest.approx(d, abs=1e-9)


def test_select_examples():
    ramp = DistanceTable(np.arange(7.0), np.arange(7.0), 1)
    assert select_skip_indices(ramp, 4) == (1, 3)
    flat = DistanceTable(np.full(9, 0.4), np.full(9, 0.4), 1)
    for k in range(2, 10):
        assert select_skip_indices(flat, k) == (1, k - 1)
    t = DistanceTable([0.5, 0.1, 0.9], [0.3, 0.2, 0.0], 1)
    # k = 3: n=1 -> 0.5 + 0.2, n=2 -> 0.1 + 0.3
    assert select_skip_indices(t, 3) == (2, 1)


def test_select_range_errors():
    t = DistanceTable(np.zeros(5), np.zeros(5), 1)
    for k in (0, 1, 6):
        with pytest.raises(ValueError):
            select_skip_indices(t, k)


@given(st.integers(3, 60), st.data())
def test_matches_brute_force(L, data):
    ints = data.draw(st.booleans())
    elem = st.integers(0, 3).map(float) if ints else st.floats(0, 2)
    front = data.draw(st.lists(elem, min_size=L - 1, max_size=L - 1))
    back = data.draw(st.lists(elem, min_size=L - 1, max_size=L - 1))
    k = data.draw(st.integers(2, L - 1))
    t = DistanceTable(front, back, 1)
    assert select_skip_indices(t, k) == brute_force(front, back, k)
    c = data.draw(st.sampled_from([0.5, 2.0, 4.0, 1024.0]))
    scaled = DistanceTable(np.array(front) * c, np.array(back) * c, 1)
    assert select_skip_indices(scaled, k) == select_skip_indices(t, k)


def test_grid_blanks_invalid_cells():
    t = DistanceTable(np.arange(1.0, 4.0), np.arange(1.0, 4.0) * 10, 1)
    g = t.grid()
    assert g.shape == (3, 3)
    for n in range(1, 4):
        for m in range(1, 4):
            if n + m >= 4:
                assert np.isnan(g[n - 1, m - 1])
            else:
                assert g[n - 1, m - 1] == n + 10 * m


def test_csv_round_trip_and_errors():
    t = DistanceTable(np.array([0.1, 1 / 3, 2.0]), np.array([0.0, 1e-17, 0.7]), 2)
    text = t.to_csv()
    back = DistanceTable.from_csv(text, 2)
    assert np.array_equal(back.front, t.front) and np.array_equal(back.back, t.back)
    assert back.to_csv() == text
    lines = text.splitlines()
    lines[3] = "front,3,abc"
    with pytest.raises(ValueError, match="line 4"):
        DistanceTable.from_csv("\n".join(lines))
    with pytest.raises(ValueError, match="line 1"):
        DistanceTable.from_csv("a,b,c\n")


def test_random_embedder_is_deterministic_unit_norm():
    img = np.random.default_rng(0).uniform(-1, 1, (3, 32, 32))
    a = RandomConvEmbedder(3).embed(img)
    b = RandomConvEmbedder(3).embed(img)
    assert a.tobytes() == b.tobytes()
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert not np.allclose(a, RandomConvEmbedder(4).embed(img))


def test_external_embedder(tmp_path):
    vecs = {"0/ref": [1, 0], "0/front/1": [0, 1], "0/back/1": [1, 1]}
    (tmp_path / "e.json").write_text(json.dumps(vecs))
    e = ExternalEmbedder(tmp_path / "e.json")
    assert np.allclose(e.embed(None, "0/back/1"), [math.sqrt(0.5)] * 2)
    with pytest.raises(KeyError):
        e.embed(None, "1/ref")
    (tmp_path / "z.json").write_text(json.dumps({"a": [0, 0]}))
    with pytest.raises(ValueError):
        ExternalEmbedder(tmp_path / "z.json")


def test_external_vectors_drive_table(tmp_path):
    cfg = TINY
    L = cfg.depth
    vecs = {"0/ref": [1.0, 0.0]}
    for i in range(1, L):
        angle = 0.2 * i
        vecs[f"0/front/{i}"] = [math.cos(angle), math.sin(angle)]
        vecs[f"0/back/{i}"] = [math.cos(0.1), math.sin(0.1)]
    (tmp_path / "e.json").write_text(json.dumps(vecs))
    t = build_distance_table([ToyDiT(cfg, 0)], PROMPT, ExternalEmbedder(tmp_path / "e.json"),
                             steps=2, size=8)
    assert np.allclose(t.front, [1 - math.cos(0.2 * i) for i in range(1, L)])
    assert np.allclose(t.back, 1 - math.cos(0.1))


# ---------------------------------------------------------------------------
# tables built from generated images


def _silence_attention(model, keep=()):
    """Zero the attention output of every block not in ``keep``."""
    for i, blk in enumerate(model.blocks):
        if i not in keep:
            blk.o.W.data[:] = 0
            blk.o.b.data[:] = 0
    return model


def test_text_blind_model_has_zero_table():
    model = _silence_attention(ToyDiT(TINY, 1))
    t = build_distance_table([model], PROMPT, steps=3, size=16)
    assert np.all(t.front == 0) and np.all(t.back == 0)


@pytest.mark.parametrize("b", range(TINY.depth))
def test_text_in_one_block_steps_the_table(b):
    model = _silence_attention(ToyDiT(TINY, 2), keep=(b,))
    t = build_distance_table([model], PROMPT, steps=3, size=16)
    L = TINY.depth
    for n in range(1, L):
        if n <= b:
            assert t.front[n - 1] == 0
        else:
            assert t.front[n - 1] > 0 and t.front[n - 1] == t.front[L - 2]
    for m in range(1, L):
        assert (t.back[m - 1] > 0) == (L - m <= b)


def test_table_bounds_and_retrieval_consistency():
    models = [ToyDiT(TINY, 10), ToyDiT(TINY, 11)]
    t1 = build_distance_table(models, PROMPT, steps=3, size=16, seed=5)
    t2 = build_distance_table(models, PROMPT, steps=3, size=16, seed=5)
    assert t1.front.tobytes() == t2.front.tobytes() and t1.back.tobytes() == t2.back.tobytes()
    assert np.all(t1.front >= 0) and np.all(t1.front <= 2 * t1.N)
    assert np.all(t1.back >= 0) and np.all(t1.back <= 2 * t1.N)
    for k in range(2, TINY.depth):
        assert select_skip_indices(t1, k) == select_skip_indices(t2, k)
    # model j uses seed + j, so with a shared embedder the sum splits per model
    emb = RandomConvEmbedder(5)
    a = build_distance_table(models[:1], PROMPT, emb, steps=3, size=16, seed=5)
    b = build_distance_table(models[1:], PROMPT, emb, steps=3, size=16, seed=6)
    assert np.array_equal(t1.front, a.front + b.front)


def test_mismatched_models_rejected():
    other = TINY.__class__(**{**TINY.to_dict(), "depth": 5})
    with pytest.raises(ValueError, match="differs"):
        build_distance_table([ToyDiT(TINY, 0), ToyDiT(other, 0)], PROMPT)
    with pytest.raises(ValueError):
        build_distance_table([], PROMPT)
