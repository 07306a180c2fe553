import json

import numpy as np
import pytest
import torch

from mote.checkpoint import ALIGN, load_checkpoint, load_meta, read_manifest, save_checkpoint
from mote.convert import pack_model, ptq_shared
from mote.errors import (
    CheckpointIOError,
    CorruptManifestError,
    CorruptWeightsError,
    MissingTensorError,
    ShapeMismatchError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from mote.model import ModelConfig, PackedGluExpert, build_model, lm_forward
from mote.packing import PackedTernaryMatrix, unpack_int2
from mote.upcycle import upcycle_checkpoint

TOKENS = torch.tensor([[1, 5, 7, 2, 9, 3, 3, 0], [4, 4, 10, 11, 6, 2, 1, 8]])


def dense(seed=0):
    cfg = ModelConfig(vocab_size=12, d_model=8, n_heads=2, d_ffn=10, n_layers=2, max_seq=8)
    m = build_model(cfg, seed=seed)
    with torch.no_grad():
        for p in m.parameters():
            p.normal_(0, 0.3)
    return m


def mote(seed=0):
    m = upcycle_checkpoint(dense(seed), 4, init="random", seed=seed)
    with torch.no_grad():
        for n, p in m.named_parameters():
            if ".moe." in n:
                p.normal_(0, 0.3)
    return m


def assert_same(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k
    flags_a = {n: p.requires_grad for n, p in a.named_parameters()}
    assert flags_a == {n: p.requires_grad for n, p in b.named_parameters()}
    with torch.no_grad():
        la, _ = lm_forward(TOKENS, a)
        lb, _ = lm_forward(TOKENS, b)
    assert torch.equal(la, lb)


@pytest.mark.parametrize("make", [dense, mote])
def test_roundtrip_bit_exact(tmp_path, make):
    m = make()
    save_checkpoint(m, tmp_path / "ck", meta={"note": "x"})
    back = load_checkpoint(tmp_path / "ck")
    assert_same(m, back)
    assert load_meta(tmp_path / "ck") == {"note": "x"}
    # save of the loaded model reproduces the files byte for byte
    save_checkpoint(back, tmp_path / "ck2", meta={"note": "x"})
    for f in ("manifest.json", "weights.bin"):
        assert (tmp_path / "ck" / f).read_bytes() == (tmp_path / "ck2" / f).read_bytes()


def test_layout_alignment_and_unique_names(tmp_path):
    save_checkpoint(mote(), tmp_path / "ck")
    man = read_manifest(tmp_path / "ck")
    names = [t["name"] for t in man["tensors"]]
    assert len(names) == len(set(names))
    assert all(t["byte_offset"] % ALIGN == 0 for t in man["tensors"])
    assert {n for n, _ in mote().named_parameters()} == set(names)


def test_packed_roundtrip_and_lengths(tmp_path):
    m = pack_model(mote())
    save_checkpoint(m, tmp_path / "ck")
    man = read_manifest(tmp_path / "ck")
    packed = [t for t in man["tensors"] if t["dtype"] == "i2packed"]
    assert len(packed) == 2 * 4 * 3
    for t in packed:
        rows, cols = t["shape"]
        assert t["byte_length"] == rows * -(-cols // 4)
        assert t["frozen"] is False
    back = load_checkpoint(tmp_path / "ck")
    assert isinstance(back.layers[0].moe.experts[0], PackedGluExpert)
    assert_same(m, back)
    # exhaustive decode scan: every field of every stored byte is a valid code
    blob = (tmp_path / "ck" / "weights.bin").read_bytes()
    for t in packed:
        raw = blob[t["byte_offset"] : t["byte_offset"] + t["byte_length"]]
        codes = unpack_int2(PackedTernaryMatrix(*t["shape"], raw, t["scale"]))
        assert set(np.unique(codes)) <= {-1, 0, 1}


def test_rtn_roundtrip(tmp_path):
    m = mote()
    ptq_shared(m, 8)
    save_checkpoint(m, tmp_path / "ck")
    man = read_manifest(tmp_path / "ck")
    i8 = [t for t in man["tensors"] if t["dtype"] == "i8"]
    assert len(i8) == 2 * 3 and all(len(t["scale"]) == t["shape"][0] for t in i8)
    back = load_checkpoint(tmp_path / "ck")
    assert_same(m, back)
    for a, b in zip(m.layers, back.layers):
        for k, (codes, scales) in a.ffn.rtn.items():
            assert np.array_equal(codes, b.ffn.rtn[k][0])
            assert np.array_equal(scales.astype(np.float32), b.ffn.rtn[k][1])


def _tamper(path, fn):
    man = json.loads((path / "manifest.json").read_text())
    fn(man)
    (path / "manifest.json").write_text(json.dumps(man))


def saved(tmp_path, make=mote):
    p = tmp_path / "ck"
    save_checkpoint(make(), p)
    return p


def test_tampered_byte_length(tmp_path):
    p = saved(tmp_path)
    _tamper(p, lambda m: m["tensors"][3].update(byte_length=m["tensors"][3]["byte_length"] - 4))
    with pytest.raises(CorruptManifestError):
        load_checkpoint(p)


def test_unknown_dtype(tmp_path):
    p = saved(tmp_path)
    _tamper(p, lambda m: m["tensors"][0].update(dtype="bf16"))
    with pytest.raises(UnsupportedDtypeError):
        load_checkpoint(p)


def test_missing_tensor(tmp_path):
    p = saved(tmp_path)
    _tamper(p, lambda m: m["tensors"].pop(2))
    with pytest.raises(MissingTensorError):
        load_checkpoint(p)


def test_shape_mismatch(tmp_path):
    p = saved(tmp_path)

    def swap(m):
        t = next(t for t in m["tensors"] if t["name"] == "layers.0.ffn.w_up")
        t["shape"] = t["shape"][::-1]

    _tamper(p, swap)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(p)


def test_overlap_and_duplicates(tmp_path):
    p = saved(tmp_path)
    _tamper(p, lambda m: m["tensors"][1].update(byte_offset=m["tensors"][0]["byte_offset"]))
    with pytest.raises(CorruptManifestError):
        load_checkpoint(p)
    p = saved(tmp_path)
    _tamper(p, lambda m: m["tensors"].append(dict(m["tensors"][0])))
    with pytest.raises(CorruptManifestError):
        load_checkpoint(p)


def test_out_of_file(tmp_path):
    p = saved(tmp_path)
    blob = (p / "weights.bin").read_bytes()
    (p / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CorruptManifestError):
        load_checkpoint(p)


def test_invalid_int2_code(tmp_path):
    p = tmp_path / "ck"
    save_checkpoint(pack_model(mote()), p)
    man = read_manifest(p)
    t = next(t for t in man["tensors"] if t["dtype"] == "i2packed")
    blob = bytearray((p / "weights.bin").read_bytes())
    blob[t["byte_offset"]] = 0b10
    (p / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptWeightsError):
        load_checkpoint(p)


def test_version_and_json_errors(tmp_path):
    p = saved(tmp_path)
    _tamper(p, lambda m: m.update(format_version=99))
    with pytest.raises(UnsupportedVersionError):
        load_checkpoint(p)
    (p / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptManifestError):
        load_checkpoint(p)
    with pytest.raises(CheckpointIOError):
        load_checkpoint(tmp_path / "nowhere")


def test_error_kinds_are_distinct():
    kinds = {e("x").kind for e in (MissingTensorError, ShapeMismatchError, CorruptWeightsError,
                                   CorruptManifestError, UnsupportedDtypeError, UnsupportedVersionError)}
    assert len(kinds) == 6
