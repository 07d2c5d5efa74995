"""Converter tests against a miniature synthetic pickle archive."""

import json
import pickle
from pathlib import Path

import numpy as np
import pytest

from camc.sigsynth import read_dataset

from rml_ingest import KNOWN_MODS, ConvertError, convert, load_archive

FULL_CORPUS = Path("/data/RML2016.10a_dict.pkl")


def make_archive(path, cells):
    """cells: {(mod, snr): count}; frames are deterministic float32 ramps."""
    data = {}
    for (mod, snr), count in cells.items():
        rng = np.random.default_rng([count, abs(snr), len(mod)])
        data[(mod, snr)] = rng.standard_normal((count, 2, 128)).astype(np.float32)
    with open(path, "wb") as f:
        pickle.dump(data, f, protocol=2)
    return data


@pytest.fixture
def small_archive(tmp_path):
    cells = {
        ("BPSK", -4): 5, ("BPSK", 6): 7,
        ("QPSK", -4): 6, ("QPSK", 6): 4,
        ("GFSK", 6): 3,
    }
    path = tmp_path / "mini.pkl"
    data = make_archive(path, cells)
    return path, data


def test_load_archive_shapes(small_archive):
    path, data = small_archive
    loaded = load_archive(path)
    assert set(loaded) == set(data)
    for key in data:
        np.testing.assert_array_equal(loaded[key], data[key])


def test_load_archive_rejects_non_dict(tmp_path):
    path = tmp_path / "bad.pkl"
    with open(path, "wb") as f:
        pickle.dump([1, 2, 3], f)
    with pytest.raises(ConvertError, match="mapping"):
        load_archive(path)


def test_load_archive_rejects_bad_shape(tmp_path):
    path = tmp_path / "bad.pkl"
    with open(path, "wb") as f:
        pickle.dump({("BPSK", 0): np.zeros((3, 128), np.float32)}, f)
    with pytest.raises(ConvertError, match="count, 2, length"):
        load_archive(path)


def test_convert_bit_exact_roundtrip(small_archive, tmp_path):
    path, data = small_archive
    out = tmp_path / "mini.camcds"
    manifest = convert(path, out)
    frames, labels = read_dataset(out)
    assert manifest["total_frames"] == len(frames) == 25
    assert labels == ["BPSK", "GFSK", "QPSK"]
    # frames appear in mod-name, then SNR, then archive-index order
    expect = []
    for mod in labels:
        for snr in sorted(s for m, s in data if m == mod):
            block = data[(mod, snr)]
            for k in range(block.shape[0]):
                expect.append((mod, snr, block[k]))
    for frame, (mod, snr, iq) in zip(frames, expect):
        assert frame.label == mod
        assert frame.snr_db == snr
        np.testing.assert_array_equal(frame.samples.real.astype(np.float32), iq[0])
        np.testing.assert_array_equal(frame.samples.imag.astype(np.float32), iq[1])


def test_convert_manifest_counts(small_archive, tmp_path):
    path, _ = small_archive
    out = tmp_path / "mini.camcds"
    convert(path, out)
    manifest = json.loads((tmp_path / "mini.json").read_text())
    assert manifest["counts"]["BPSK/-4"] == 5
    assert manifest["counts"]["QPSK/6"] == 4
    assert manifest["frame_len"] == 128
    assert sum(manifest["counts"].values()) == manifest["total_frames"]


def test_convert_deterministic_bytes(small_archive, tmp_path):
    path, _ = small_archive
    a, b = tmp_path / "a.camcds", tmp_path / "b.camcds"
    convert(path, a)
    convert(path, b)
    assert a.read_bytes() == b.read_bytes()


def test_convert_mod_and_snr_filters(small_archive, tmp_path):
    path, _ = small_archive
    out = tmp_path / "f.camcds"
    manifest = convert(path, out, mods=["QPSK", "BPSK"], snrs=[6])
    assert manifest["modulations"] == ["BPSK", "QPSK"]
    assert manifest["total_frames"] == 7 + 4
    frames, labels = read_dataset(out)
    assert labels == ["BPSK", "QPSK"]
    assert {f.snr_db for f in frames} == {6}


def test_convert_rejects_unknown_mod(tmp_path):
    path = tmp_path / "odd.pkl"
    make_archive(path, {("BPSK", 0): 2, ("OOK", 0): 2, ("4FSK", 0): 2})
    with pytest.raises(ConvertError, match=r"\['4FSK', 'OOK'\]"):
        convert(path, tmp_path / "o.camcds")


def test_convert_rejects_missing_requested_mod(small_archive, tmp_path):
    path, _ = small_archive
    with pytest.raises(ConvertError, match="QAM64"):
        convert(path, tmp_path / "m.camcds", mods=["QAM64"])


def test_convert_rejects_empty_selection(small_archive, tmp_path):
    path, _ = small_archive
    with pytest.raises(ConvertError, match="no frames"):
        convert(path, tmp_path / "e.camcds", snrs=[99])


def test_known_mods_cover_corpus_names():
    assert len(KNOWN_MODS) == 11
    assert "QAM16" in KNOWN_MODS and "WBFM" in KNOWN_MODS


@pytest.mark.skipif(not FULL_CORPUS.exists(), reason="full corpus not present")
def test_full_corpus_conversion(tmp_path):
    manifest = convert(FULL_CORPUS, tmp_path / "full.camcds")
    assert manifest["total_frames"] == 220000
    assert len(manifest["modulations"]) == 11
