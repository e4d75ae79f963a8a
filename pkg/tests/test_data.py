import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diva.data import (
    Dataset,
    FormatError,
    SynthConfig,
    dataset_bytes,
    export_csv,
    generate_synthetic,
    import_csv,
    load_dataset,
    parse_dataset,
    save_dataset,
)


@pytest.fixture(scope="module")
def default_ds():
    return generate_synthetic(SynthConfig())


def test_default_shape_and_split(default_ds):
    assert default_ds.features.shape == (1200, 64)
    assert len(default_ds.train_idx) == 600 and len(default_ds.test_idx) == 600
    assert set(default_ds.labels[default_ds.train_idx]).isdisjoint(default_ds.labels[default_ds.test_idx])
    assert np.bincount(default_ds.labels).tolist() == [30] * 40


def test_generation_is_deterministic(default_ds):
    again = generate_synthetic(SynthConfig())
    assert dataset_bytes(again) == dataset_bytes(default_ds)
    other = generate_synthetic(SynthConfig(seed=1))
    assert not other.equals(default_ds)


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        SynthConfig(n_train_classes=0)
    with pytest.raises(ValueError):
        SynthConfig(noise=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(atoms_per_class=-1)


def test_noise_free_construction_uses_only_codes_and_shared():
    # without noise or intra variation, two samples of a class that drew the
    # same atom with the same amplitude would coincide; instead check that the
    # class code alone separates classes when shared factors are switched off
    cfg = SynthConfig(noise=0.0, intra_scale=0.0, shared_scale=0.0, n_train_classes=3, n_test_classes=2)
    ds = generate_synthetic(cfg)
    for c in range(5):
        rows = ds.features[ds.labels == c]
        assert np.ptp(rows, axis=0).max() == 0.0
    assert len({tuple(r) for r in ds.features}) == 5


def test_binary_round_trip(tmp_path, default_ds):
    path = tmp_path / "d.bin"
    save_dataset(default_ds, path)
    back = load_dataset(path)
    assert back.equals(default_ds)
    assert dataset_bytes(back) == path.read_bytes()
    assert len(path.read_bytes()) == 20 + 1200 * 64 * 4 + 1200 * 4 + 40


def test_binary_rejects_corruption(default_ds):
    buf = dataset_bytes(default_ds)
    with pytest.raises(FormatError) as e:
        parse_dataset(b"DIVB" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        parse_dataset(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        parse_dataset(buf[:-1])
    assert "truncated split flags" in str(e.value) and e.value.offset == len(buf) - 1
    with pytest.raises(FormatError) as e:
        parse_dataset(buf[:10])
    assert "header" in str(e.value)
    with pytest.raises(FormatError) as e:
        parse_dataset(buf + b"\0")
    assert e.value.offset == len(buf)


def test_binary_rejects_out_of_range_label(default_ds):
    buf = bytearray(dataset_bytes(default_ds))
    lab_off = 20 + 1200 * 64 * 4
    buf[lab_off : lab_off + 4] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError):
        parse_dataset(bytes(buf))


def test_csv_round_trip(tmp_path, default_ds):
    path = tmp_path / "d.csv"
    export_csv(default_ds, path)
    back = import_csv(path)
    assert np.max(np.abs(back.features - default_ds.features)) <= 1e-9
    assert np.array_equal(back.labels, default_ds.labels)
    assert np.array_equal(back.split, default_ds.split)


def test_csv_remaps_sparse_labels(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0.5,1.5,7,0\n1.0,2.0,3,1\n\n2.0,0.0,7,0\n")
    ds = import_csv(path)
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.split.tolist() == [1, 0]
    assert ds.meta["class_ids"] == [3, 7]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("1.0,2.0,0,0\n1.0,0,0\n", "line 2: ragged"),
        ("1.0,0,0\n2.0,0,1\n", "line 2: class 0 appears in both splits"),
        ("1.0,0,2\n", "split flag"),
        ("x,0,0\n", "line 1"),
        ("", "empty"),
    ],
)
def test_csv_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValueError, match=fragment):
        import_csv(path)


@settings(max_examples=40)
@given(
    st.integers(1, 30),
    st.integers(1, 6),
    st.integers(1, 5),
    st.integers(0, 2**31),
)
def test_binary_round_trip_property(n, F, C, seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, F)).astype(np.float32).astype(np.float64)
    ds = Dataset(feats, rng.integers(0, C, n), rng.integers(0, 2, C))
    buf = dataset_bytes(ds)
    back = parse_dataset(buf)
    assert back.equals(ds) and dataset_bytes(back) == buf


def test_file_hash_stable(tmp_path):
    cfg = SynthConfig(n_train_classes=3, n_test_classes=3, samples_per_class=4)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_dataset(generate_synthetic(cfg), a)
    save_dataset(generate_synthetic(cfg), b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
