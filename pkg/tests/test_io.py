import os
import struct

import numpy as np
import pytest

from avit import netpbm
from avit.checkpoint import decode, encode, load_checkpoint, load_state, read_checkpoint, save_checkpoint
from avit.config import RunConfig, dump_config, load_config, parse_config
from avit.data import (
    kfold_split,
    load_dataset,
    make_synthetic,
    synth_dataset,
    threshold_predict,
)
from avit.errors import CheckpointFormatError, ConfigError, ContractError, DimensionError, InputError, ParseError
from avit.train import dice_iou
from avit import tensor as T
from avit.tensor import Tensor

from conftest import toy_model


# netpbm ---------------------------------------------------------------------


def test_p6_decoding():
    px = bytes(range(12))
    img = netpbm.decode(b"P6\n2 2\n255\n" + px)
    assert img.shape == (2, 2, 3)
    assert img[0, 1].tolist() == [3, 4, 5] and img[1, 0].tolist() == [6, 7, 8]


def test_header_comments_and_whitespace():
    img = netpbm.decode(b"P5 # grey\n3\t# w\n 1\n255\n\x01\x02\x03")
    assert img.tolist() == [[1, 2, 3]]


def test_roundtrip_is_bit_exact():
    rng = np.random.default_rng(0)
    for arr in (rng.integers(0, 256, (5, 7), dtype=np.uint8), rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)):
        assert np.array_equal(netpbm.decode(netpbm.encode(arr)), arr)


def test_small_maxval_is_rescaled():
    assert netpbm.decode(b"P5\n2 1\n100\n\x00\x64").tolist() == [[0, 255]]


@pytest.mark.parametrize(
    "buf,offset",
    [
        (b"P3\n1 1\n255\n\x00", 0),
        (b"P5\n1 x\n255\n\x00", 5),
        (b"P5\n2 2\n255\n\x00", 12),
        (b"P5\n1 1\n65535\n\x00\x00", 7),
        (b"P5\n1 1", 6),
    ],
)
def test_malformed_headers_report_offset(buf, offset):
    with pytest.raises(ParseError) as e:
        netpbm.decode(buf)
    assert e.value.offset == offset
    assert f"offset {offset}" in str(e.value)


# datasets -------------------------------------------------------------------


def _write_pair(d, sid, rgb, mask):
    netpbm.write(d / f"{sid}.ppm", rgb)
    netpbm.write(d / f"{sid}_mask.pgm", mask)


def test_load_dataset_pairs_and_threshold(tmp_path):
    rgb = np.full((4, 4, 3), 255, np.uint8)
    mask = np.array([[200, 10, 128, 127]] * 4, np.uint8)
    _write_pair(tmp_path, "b", rgb, mask)
    _write_pair(tmp_path, "a", rgb // 2, mask)
    ds = load_dataset(tmp_path)
    assert [s.id for s in ds] == ["a", "b"]
    assert ds[0].image.shape == (3, 4, 4) and ds[0].mask.shape == (1, 4, 4)
    assert ds[0].mask[0, 0].tolist() == [1.0, 0.0, 1.0, 0.0]
    assert ds[1].image.max() == 1.0


def test_load_dataset_resizes(tmp_path):
    _write_pair(tmp_path, "a", np.zeros((8, 8, 3), np.uint8), np.full((8, 8), 255, np.uint8))
    s = load_dataset(tmp_path, image_size=4)[0]
    assert s.image.shape == (3, 4, 4) and s.mask.shape == (1, 4, 4)
    assert set(np.unique(s.mask)) == {1.0}


def test_load_dataset_errors(tmp_path):
    assert load_dataset(tmp_path) == []
    netpbm.write(tmp_path / "lonely.ppm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(InputError, match="lonely"):
        load_dataset(tmp_path)
    with pytest.raises(InputError):
        load_dataset(tmp_path / "missing")


def test_load_dataset_parse_error_has_offset(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
    netpbm.write(tmp_path / "x_mask.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(ParseError) as e:
        load_dataset(tmp_path)
    assert e.value.offset is not None


# synthetic data -------------------------------------------------------------


def test_make_synthetic_is_byte_reproducible(tmp_path):
    make_synthetic(6, 32, tmp_path / "a", seed=3)
    make_synthetic(6, 32, tmp_path / "b", seed=3)
    names = sorted(os.listdir(tmp_path / "a"))
    assert len(names) == 12
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert len(ds) == 6 and all(set(np.unique(s.mask)) <= {0.0, 1.0} for s in ds)


def test_make_synthetic_size_contract(tmp_path):
    with pytest.raises(InputError):
        make_synthetic(1, 40, tmp_path)


def test_mask_fraction_bounds_over_1000_samples():
    fr = np.array([s.mask.mean() for s in synth_dataset(1000, 32, seed=5)])
    assert fr.min() >= 0.02 and fr.max() <= 0.60


def test_easy_variant_is_threshold_separable():
    ds = synth_dataset(100, 32, seed=6, easy=True)
    d = np.mean([dice_iou(threshold_predict(s), s.mask[0] > 0.5)[0] for s in ds])
    assert d > 0.95


def test_normal_variant_is_not_threshold_trivial():
    ds = synth_dataset(100, 32, seed=6)
    best = max(np.mean([dice_iou(threshold_predict(s, lv), s.mask[0] > 0.5)[0] for s in ds]) for lv in np.linspace(0.2, 0.8, 13))
    assert best < 0.9


# k-fold ---------------------------------------------------------------------


def test_kfold_examples():
    folds = kfold_split(10, 5, seed=0)
    tests = [set(te.tolist()) for _, te in folds]
    assert all(len(t) == 2 for t in tests)
    assert set().union(*tests) == set(range(10))
    assert sum(len(t) for t in tests) == 10
    for tr, te in folds:
        assert not set(tr.tolist()) & set(te.tolist())
        assert len(tr) + len(te) == 10
    assert [len(te) for _, te in kfold_split(7, 5, seed=1)] == [2, 2, 1, 1, 1]


def test_kfold_deterministic_and_seeded():
    a, b = kfold_split(20, 5, 3), kfold_split(20, 5, 3)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    c = kfold_split(20, 5, 4)
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_kfold_errors():
    with pytest.raises(InputError):
        kfold_split(3, 5)
    with pytest.raises(InputError):
        kfold_split(10, 1)


# checkpoints ----------------------------------------------------------------


def test_encode_layout():
    buf = encode({"w": np.array([[1.0, 2.0]], np.float32)})
    assert buf[:4] == b"AVCK"
    assert struct.unpack("<HI", buf[4:10]) == (1, 1)
    assert struct.unpack("<H", buf[10:12]) == (1,) and buf[12:13] == b"w"
    assert buf[13] == 2 and struct.unpack("<II", buf[14:22]) == (1, 2)
    assert buf[22] == 0
    assert np.frombuffer(buf[23:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = toy_model("avit", seed=3)
    save_checkpoint(m, tmp_path / "m.avck")
    back = read_checkpoint(tmp_path / "m.avck")
    sd = m.state_dict()
    assert list(back) == list(sd)
    for k in sd:
        assert back[k].dtype == sd[k].dtype and back[k].tobytes() == sd[k].tobytes()
    other = toy_model("avit", seed=4)
    load_checkpoint(tmp_path / "m.avck", other)
    for k, v in other.state_dict().items():
        assert v.tobytes() == sd[k].tobytes()


def test_float64_payloads_roundtrip():
    t = {"a": np.random.default_rng(0).standard_normal((2, 3)), "b": np.zeros((0,), np.float32)}
    back = decode(encode(t))
    assert back["a"].dtype == np.float64 and back["a"].tobytes() == t["a"].tobytes()
    assert back["b"].shape == (0,)


def test_unsupported_dtype_rejected():
    with pytest.raises(ContractError):
        encode({"i": np.arange(3)})


def test_truncated_file_leaves_model_untouched(tmp_path):
    m = toy_model("avit", seed=3)
    save_checkpoint(m, tmp_path / "m.avck")
    raw = (tmp_path / "m.avck").read_bytes()
    (tmp_path / "t.avck").write_bytes(raw[: len(raw) // 2])
    target = toy_model("avit", seed=8)
    before = {k: v.copy() for k, v in target.state_dict().items()}
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "t.avck", target)
    for k, v in target.state_dict().items():
        assert np.array_equal(v, before[k])


@pytest.mark.parametrize(
    "mutate",
    [lambda b: b"XXXX" + b[4:], lambda b: b[:4] + struct.pack("<H", 9) + b[6:], lambda b: b + b"\x00"],
    ids=["magic", "version", "trailing"],
)
def test_format_errors(mutate):
    good = encode({"w": np.ones(2, np.float32)})
    with pytest.raises(CheckpointFormatError):
        decode(mutate(good))


def test_duplicate_names_rejected():
    rec = encode({"w": np.ones(1, np.float32)})[10:]
    buf = b"AVCK" + struct.pack("<HI", 1, 2) + rec + rec
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        decode(buf)


def test_strict_and_partial_loading(tmp_path):
    base = toy_model("base", seed=1)
    avit = toy_model("avit", seed=2)
    save_checkpoint(base, tmp_path / "base.avck")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "base.avck", avit)
    names = load_checkpoint(tmp_path / "base.avck", avit, partial=True, prefixes=("backbone.",))
    assert names and all(n.startswith("backbone.") for n in names)
    sd = base.state_dict()
    for n in names:
        assert np.array_equal(avit.state_dict()[n], sd[n])
    assert np.all(avit.backbone.layer0.adapter_msa.w_up.data == 0)


def test_shape_mismatch_is_named(tmp_path):
    m = toy_model("avit")
    bad = dict(m.state_dict())
    bad["decoder.head.conv3.bias"] = np.zeros(7, np.float32)
    with pytest.raises(DimensionError, match="decoder.head.conv3.bias"):
        load_state(m, bad)


def test_partial_backbone_load_reproduces_donor_features(tmp_path):
    with T.precision(np.float64):
        donor = toy_model("base", seed=1, dtype=np.float64)
        donor.backbone.pos_embed.data[...] += 0.1
        save_checkpoint(donor, tmp_path / "d.avck", prefixes=("backbone.",))
        rec = toy_model("avit", seed=2, dtype=np.float64)
        load_checkpoint(tmp_path / "d.avck", rec, partial=True)
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
        assert rec.backbone(x, adapters=False).data.tobytes() == donor.backbone(x).data.tobytes()
        z0 = rec.backbone.embed(x)
        from avit.backbone import extract_feature_map

        expected = extract_feature_map(rec.backbone.norm(z0)).data
        assert rec.backbone(x).data.tobytes() == expected.tobytes()


# config ---------------------------------------------------------------------


def test_parse_config_roundtrip():
    cfg = parse_config("# c\nimage_size=32\npatch=4\ndim=32\ndepth=2\nheads=4\nvariant=base_star  # x\nlr=0.001\n")
    assert cfg.image_size == 32 and cfg.variant == "base_star" and cfg.lr == 1e-3
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.model_config().variant_name == "base_star"
    assert cfg.train_config().lr == 1e-3


def test_defaults_are_recipe():
    cfg = RunConfig()
    assert (cfg.image_size, cfg.epochs, cfg.batch, cfg.lr, cfg.variant) == (224, 200, 16, 1e-4, "avit")


@pytest.mark.parametrize(
    "text",
    ["bogus=1", "patch=4\npatch=4", "lr=fast", "variant=huge", "noequals", "epochs=0", "image_size=30\npatch=4", "steps=-1"],
)
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_file_errors(tmp_path):
    assert load_config(None) == RunConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
