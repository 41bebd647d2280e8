import numpy as np
import pytest

from conftest import TINY, random_batch
from ditbs import autodiff as ad
from ditbs.lora import (AdapterError, LoraLayer, has_adapters, inject, load_adapters, merge,
                        save_adapters)
from ditbs.model import ToyDiT, save_checkpoint, load_checkpoint
from ditbs.train import AdamW


def _fwd(model, batch):
    return model.forward(*batch)[0].data


def _step(model, batch, lr=1e-2):
    opt = AdamW(model.trainable_parameters(), lr=lr)
    with ad.Tape() as tape:
        v = model.forward(*batch)[0]
        loss = ad.mse(v, ad.Tensor(np.ones_like(v.data)))
    ad.backward(tape, loss)
    opt.step()


def test_inject_is_identity():
    model = ToyDiT(TINY, 0)
    batch = random_batch(TINY, np.random.default_rng(0), batch=2)
    before = _fwd(model, batch)
    inject(model, range(TINY.depth), rank=4, alpha=4.0)
    assert _fwd(model, batch).tobytes() == before.tobytes()


def test_trainable_params_are_adapters_only():
    model = inject(ToyDiT(TINY, 0), [1, 2], rank=3)
    names = [n for n, _ in model.trainable_parameters()]
    assert names and all(".lora." in n for n in names)
    assert {n.split(".")[1] for n in names} == {"1", "2"}
    h = TINY.hidden
    q = [p for n, p in model.adapter_parameters() if n.startswith("blocks.1.q.")]
    assert sum(p.data.size for p in q) == 2 * 3 * h


def test_lora_init():
    layer = LoraLayer(200, 50, 8, 16.0, np.random.default_rng(0))
    assert layer.A.shape == (8, 200) and layer.B.shape == (50, 8)
    assert np.all(layer.B.data == 0) and layer.scaling == 2.0
    assert abs(layer.A.data.var() - 1 / 8) < 0.01


def test_delta_weight_formula():
    layer = LoraLayer(5, 3, 2, 6.0, np.random.default_rng(1))
    layer.B.data = np.random.default_rng(2).standard_normal((3, 2)).astype(np.float32)
    x = np.random.default_rng(3).standard_normal((4, 5)).astype(np.float32)
    expect = 3.0 * x @ layer.A.data.T @ layer.B.data.T
    assert np.allclose(layer(ad.Tensor(x)).data, expect, rtol=1e-5)
    assert np.allclose(x @ layer.delta_weight(), expect, rtol=1e-5)


def test_inject_into_skipped_block_fails():
    model = ToyDiT(TINY, 0)
    model.drop_blocks([0])
    with pytest.raises(AdapterError, match="offloaded"):
        inject(model, [0, 1])
    with pytest.raises(AdapterError):
        inject(model, [TINY.depth])


def test_step_changes_output_and_keeps_base_frozen():
    model = inject(ToyDiT(TINY, 0), range(TINY.depth))
    batch = random_batch(TINY, np.random.default_rng(1))
    base = {n: p.data.copy() for n, p in model.parameters()}
    before = _fwd(model, batch)
    for _ in range(3):
        _step(model, batch)
    assert not np.array_equal(_fwd(model, batch), before)
    for n, p in model.parameters():
        assert p.grad is None
        assert p.data.tobytes() == base[n].tobytes()


def test_merge_matches_adapted_forward():
    model = inject(ToyDiT(TINY, 0), range(TINY.depth))
    batch = random_batch(TINY, np.random.default_rng(2), batch=2)
    for _ in range(3):
        _step(model, batch)
    adapted = _fwd(model, batch)
    merge(model)
    assert not has_adapters(model)
    merged = _fwd(model, batch)
    assert np.abs(merged - adapted).max() / np.abs(adapted).max() < 1e-6
    with pytest.raises(AdapterError):
        merge(model)


def test_merge_at_zero_b_keeps_weights():
    model = ToyDiT(TINY, 0)
    ref = {n: p.data.copy() for n, p in model.parameters()}
    merge(inject(model, [0, 3]))
    for n, p in model.parameters():
        assert p.data.tobytes() == ref[n].tobytes()


def test_adapter_checkpoint_round_trip(tmp_path):
    base = ToyDiT(TINY, 0)
    save_checkpoint(base, tmp_path / "base")
    model = inject(load_checkpoint(tmp_path / "base"), [1, 2])
    _step(model, random_batch(TINY, np.random.default_rng(3)))
    save_adapters(model, tmp_path / "ad1")
    again = load_adapters(load_checkpoint(tmp_path / "base"), tmp_path / "ad1")
    save_adapters(again, tmp_path / "ad2")
    for f in (tmp_path / "ad1").iterdir():
        assert f.read_bytes() == (tmp_path / "ad2" / f.name).read_bytes()
    batch = random_batch(TINY, np.random.default_rng(4))
    assert _fwd(again, batch).tobytes() == _fwd(model, batch).tobytes()


def test_adapters_refuse_other_base(tmp_path):
    save_checkpoint(ToyDiT(TINY, 0), tmp_path / "a")
    save_checkpoint(ToyDiT(TINY, 1), tmp_path / "b")
    model = inject(load_checkpoint(tmp_path / "a"), [1])
    save_adapters(model, tmp_path / "ad")
    with pytest.raises(AdapterError, match="different base"):
        load_adapters(load_checkpoint(tmp_path / "b"), tmp_path / "ad")
