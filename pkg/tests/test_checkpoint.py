import json

import numpy as np
import pytest

from adapt.checkpoint import MAGIC, Checkpoint, canonical_json, load_checkpoint, save_checkpoint
from adapt.errors import DependencyError, FormatError


@pytest.fixture
def ckpt(trained):
    return Checkpoint(trained["models"][3], "abc123", 3, {"val_f1_macro": 0.9, "bad": float("nan")})


def test_round_trip_is_byte_stable(ckpt, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    first = path.read_bytes()
    again = load_checkpoint(path)
    save_checkpoint(path, again)
    assert path.read_bytes() == first
    assert again.model.params == ckpt.model.params
    assert again.model.provenance == ckpt.model.provenance
    assert again.stage == 3 and again.seed == 3 and again.metrics["bad"] is None
    np.testing.assert_array_equal(again.model.class_of, ckpt.model.class_of)


def test_canonical_json_rules():
    assert canonical_json({"b": (1, np.int64(2)), "a": np.float64(0.5)}) == '{"a":0.5,"b":[1,2]}'
    assert canonical_json([float("inf")]) == "[null]"


def corrupt(buf, meta_fn):
    end = buf.index(b"\n", len(MAGIC))
    meta = json.loads(buf[len(MAGIC) : end])
    meta_fn(meta)
    return MAGIC + canonical_json(meta).encode() + buf[end:]


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"X" + b[1:], "bad magic"),
        (lambda b: MAGIC + b'{"format_version":1', "truncated"),
        (lambda b: MAGIC + b"{nope\n", "not valid JSON"),
        (lambda b: corrupt(b, lambda m: m.update(format_version=2)), "format-version"),
        (lambda b: corrupt(b, lambda m: m.pop("seed")), "incomplete"),
        (lambda b: corrupt(b, lambda m: m["layout"].pop()), "layout"),
        (lambda b: b[:-8], "truncated"),
        (lambda b: b + b"\0", "unexpected bytes"),
    ],
)
def test_format_errors(ckpt, mutate, message):
    with pytest.raises(FormatError, match=message):
        Checkpoint.from_bytes(mutate(ckpt.to_bytes()))


def test_missing_file(tmp_path):
    with pytest.raises(DependencyError):
        load_checkpoint(tmp_path / "nope.ckpt")
