import json

import numpy as np
import pytest

from reachtrain import checkpoint as ckpt
from reachtrain.trainer import AdamState, adam_step


def _state(rng):
    p = {"W0": rng.normal(size=(3, 2)), "b0": rng.normal(size=3)}
    st = AdamState.for_params(p, lr=0.01)
    p = adam_step(st, p, {k: rng.normal(size=v.shape) for k, v in p.items()})
    return p, st


def test_round_trip_is_exact(tmp_path, rng):
    p, st = _state(rng)
    path = ckpt.save(tmp_path / "a" / "ck.json", p, st, epoch=7, config_hash="abc", seed=3)
    d = ckpt.load(path)
    assert (d["epoch"], d["config_hash"], d["seed"]) == (7, "abc", 3)
    for k in p:
        assert d["params"][k].tobytes() == p[k].tobytes()
        assert d["adam"]["m"][k].tobytes() == st.m[k].tobytes()
        assert d["adam"]["v"][k].tobytes() == st.v[k].tobytes()
    assert d["adam"]["t"] == 1 and d["adam"]["lr"] == 0.01
    assert not (tmp_path / "a" / "ck.json.tmp").exists()


def test_params_only():
    d = ckpt.decode(ckpt.encode({"x": np.arange(3.0)}))
    assert d["adam"] is None
    np.testing.assert_array_equal(d["params"]["x"], [0, 1, 2])


def test_tampered_value_fails_checksum(rng):
    p, st = _state(rng)
    body = json.loads(ckpt.encode(p, st))
    body["params"]["b0"]["data"][1] += 1e-12
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.decode(json.dumps(body))


def test_rejects_foreign_and_garbled_input():
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode("{not json")
    with pytest.raises(ckpt.CheckpointError, match="format"):
        ckpt.decode(json.dumps({"hello": 1}))
    body = json.loads(ckpt.encode({"x": np.zeros(1)}))
    body["version"] = 99
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.decode(json.dumps(body))
