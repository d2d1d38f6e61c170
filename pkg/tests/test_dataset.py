import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pecad.dataset import (
    CtVolume,
    DatasetManifest,
    Label,
    ManifestEntry,
    SliceRecord,
    Split,
    SplitAssignment,
    VolumeFormatError,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    split_by_patient,
)


def _volume(shape=(4, 8, 8), seed=0, pid="p1", pe=False):
    rng = np.random.default_rng(seed)
    vox = rng.integers(-2048, 4096, size=shape, dtype=np.int16)
    return CtVolume(pid, vox, slice_thickness_mm=1.25, pixel_spacing_mm=0.7, pe_label=pe)


def _manifest(n, n_pe=0):
    return DatasetManifest([
        ManifestEntry(f"p{i:04d}", f"p{i:04d}.ctvol.json", pe_label=i < n_pe) for i in range(n)
    ])


# volumes -------------------------------------------------------------------

def test_load_handwritten_pair(tmp_path):
    header = {
        "patient_id": "hand", "pe_label": True, "n_slices": 4, "rows": 8, "cols": 8,
        "slice_thickness_mm": 2.0, "pixel_spacing_mm": 0.5,
        "dtype": "int16-le", "order": "slice-row-col",
    }
    vox = np.arange(4 * 8 * 8, dtype="<i2").reshape(4, 8, 8) - 100
    (tmp_path / "hand.ctvol.json").write_text(json.dumps(header))
    (tmp_path / "hand.ctvol.raw").write_bytes(vox.tobytes())
    assert len(vox.tobytes()) == 4 * 8 * 8 * 2
    v = load_volume(tmp_path / "hand.ctvol.json")
    assert v.shape == (4, 8, 8)
    assert v.voxels.dtype == np.int16
    np.testing.assert_array_equal(v.voxels, vox)
    assert v.pe_label is True and v.patient_id == "hand"


def test_raw_two_bytes_short(tmp_path):
    path = save_volume(_volume(), tmp_path / "v")
    raw = tmp_path / "v.ctvol.raw"
    raw.write_bytes(raw.read_bytes()[:-2])
    with pytest.raises(VolumeFormatError, match="raw size"):
        load_volume(path)


def test_out_of_range_voxel_on_load(tmp_path):
    path = save_volume(_volume(), tmp_path / "v")
    raw = tmp_path / "v.ctvol.raw"
    data = np.frombuffer(raw.read_bytes(), dtype="<i2").copy()
    data[5] = 5000
    raw.write_bytes(data.tobytes())
    with pytest.raises(VolumeFormatError, match="outside"):
        load_volume(path)


def test_out_of_range_voxel_in_memory():
    vox = np.zeros((1, 4, 4), dtype=np.int32)
    vox[0, 0, 0] = 5000
    with pytest.raises(VolumeFormatError):
        CtVolume("x", vox, 1.0, 1.0, False)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.ctvol.json")
    path = save_volume(_volume(), tmp_path / "v")
    (tmp_path / "v.ctvol.raw").unlink()
    with pytest.raises(FileNotFoundError):
        load_volume(path)


def test_malformed_header(tmp_path):
    (tmp_path / "bad.ctvol.json").write_text("{not json")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "bad.ctvol.json")


@pytest.mark.parametrize("shape", [(4, 8, 8), (1, 5, 7), (3, 1, 1)])
def test_round_trip(tmp_path, shape):
    v = _volume(shape, seed=sum(shape))
    v2 = load_volume(save_volume(v, tmp_path / "v"))
    assert v2.patient_id == v.patient_id
    np.testing.assert_array_equal(v2.voxels, v.voxels)
    assert (v2.slice_thickness_mm, v2.pixel_spacing_mm, v2.pe_label) == (1.25, 0.7, False)


def test_saves_are_byte_identical(tmp_path):
    v = _volume()
    save_volume(v, tmp_path / "a")
    save_volume(v, tmp_path / "b")
    for suffix in (".ctvol.json", ".ctvol.raw"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()


def test_raw_is_little_endian_c_order(tmp_path):
    vox = np.array([[[1, -2], [258, 3]]], dtype=np.int16)
    save_volume(CtVolume("e", vox, 1.0, 1.0, False), tmp_path / "e")
    assert (tmp_path / "e.ctvol.raw").read_bytes() == b"\x01\x00\xfe\xff\x02\x01\x03\x00"


def test_mask_round_trip_and_values(tmp_path):
    m = (np.random.default_rng(0).random((3, 6, 6)) > 0.7).astype(np.uint8)
    np.testing.assert_array_equal(load_mask(save_mask(m, tmp_path / "m")), m)
    raw = tmp_path / "m.mask.raw"
    data = bytearray(raw.read_bytes())
    data[0] = 7
    raw.write_bytes(bytes(data))
    with pytest.raises(VolumeFormatError):
        load_mask(tmp_path / "m.mask.json")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_round_trip_property(tmp_path_factory, n, r, c, seed):
    d = tmp_path_factory.mktemp("rt")
    v = _volume((n, r, c), seed=seed)
    np.testing.assert_array_equal(load_volume(save_volume(v, d / "v")).voxels, v.voxels)


# records and manifests -----------------------------------------------------

def test_slice_record_invariants():
    img = np.zeros((4, 4), np.float32)
    SliceRecord("p", 0, img, Label.PE, mask=np.ones((4, 4), np.uint8))
    SliceRecord("p", 0, img, Label.NON_PE, mask=np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError):
        SliceRecord("p", 0, img, Label.NON_PE, mask=np.ones((4, 4), np.uint8))
    with pytest.raises(ValueError):
        SliceRecord("p", 0, img, Label.PE, mask=np.ones((3, 4), np.uint8))
    with pytest.raises(ValueError):
        SliceRecord("p", 0, img + 1.5, Label.PE)
    with pytest.raises(ValueError):
        SliceRecord("p", -1, img, Label.PE)


def test_manifest_unique_ids_and_tag(tmp_path):
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("a", "a", False), ManifestEntry("a", "b", False)])
    with pytest.raises(ValueError):
        DatasetManifest([], source_tag="scanner")
    m = _manifest(3, n_pe=1)
    m2 = DatasetManifest.load(m.save(tmp_path / "manifest.json"))
    assert m2 == m
    assert m2.root == tmp_path


# splitting -----------------------------------------------------------------

@pytest.mark.parametrize("n, expected", [(200, (140, 40, 20)), (10, (7, 2, 1)), (21, (15, 4, 2))])
def test_split_counts(n, expected):
    assert split_by_patient(_manifest(n), (0.7, 0.2, 0.1), seed=0).counts() == expected


def test_split_deterministic(tmp_path):
    a = split_by_patient(_manifest(50), seed=11)
    b = split_by_patient(_manifest(50), seed=11)
    assert a.assignment == b.assignment
    assert a.to_json() == b.to_json()
    c = split_by_patient(_manifest(50), seed=12)
    assert c.assignment != a.assignment
    assert SplitAssignment.load(a.save(tmp_path / "s.json")).assignment == a.assignment


def test_split_depends_only_on_patient_set():
    m = _manifest(30)
    shuffled = DatasetManifest(list(reversed(m.entries)))
    assert split_by_patient(m, seed=5).assignment == split_by_patient(shuffled, seed=5).assignment


def test_split_errors():
    with pytest.raises(ValueError):
        split_by_patient(DatasetManifest([]))
    with pytest.raises(ValueError):
        split_by_patient(_manifest(5), (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_by_patient(_manifest(5), (1.2, -0.1, -0.1))


def test_stratified_split_balances_classes():
    s = split_by_patient(_manifest(12, n_pe=6), (0.5, 1 / 6, 1 - 0.5 - 1 / 6), seed=3, stratify=True)
    test = s.patients(Split.TEST)
    assert len(test) == 4
    assert sum(int(p[1:]) < 6 for p in test) == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 120), st.integers(0, 10**6),
       st.floats(0, 1).flatmap(lambda a: st.tuples(st.just(a), st.floats(0, 1 - a))),
       st.booleans())
def test_split_is_partition(n, seed, ab, stratify):
    a, b = ab
    ratios = (1 - a - b, a, b)
    m = _manifest(n, n_pe=n // 3)
    try:
        s = split_by_patient(m, ratios, seed=seed, stratify=stratify)
    except ValueError:
        return  # remainder would make TRAIN negative
    assert sorted(s.assignment) == sorted(m.patient_ids)
    parts = [set(s.patients(x)) for x in Split]
    assert sum(len(p) for p in parts) == n
    assert set.union(*parts) == set(m.patient_ids)
    if not stratify:
        assert s.counts()[1:] == (round(n * ratios[1]), round(n * ratios[2]))
