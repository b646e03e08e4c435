import numpy as np
import pytest
from scipy import ndimage

from parotid_cl.errors import ConfigError, DataError, SplitError
from parotid_cl.synthdata import (DatasetManifest, PhantomConfig, build_dataset, generate_phantom,
                                  split_dataset)


def test_phantom_shapes_and_ranges():
    sl, mask = generate_phantom(0)
    assert sl.pixels.shape == (3, 64, 64) and sl.pixels.dtype == np.float32
    assert mask.labels.shape == (64, 64) and mask.labels.dtype == np.uint8
    assert sl.pixels.min() >= 0.0 and sl.pixels.max() <= 1.0
    assert set(np.unique(mask.labels)) == {0, 1, 2}


def test_phantom_is_pure_function_of_seed():
    a, ma = generate_phantom(7)
    b, mb = generate_phantom(7)
    c, _ = generate_phantom(8)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(ma.labels, mb.labels)
    assert not np.array_equal(a.pixels, c.pixels)


@pytest.mark.parametrize("seed", range(40))
def test_tumor_lies_strictly_inside_gland(seed):
    pos = (seed % 9) / 4 - 1
    _, mask = generate_phantom(seed, PhantomConfig(slice_pos=pos))
    tumor = mask.labels == 2
    assert tumor.any()
    # every tumor pixel and its 4-neighbours are gland or tumor
    grown = ndimage.binary_dilation(tumor)
    assert (mask.labels[grown] > 0).all()


def test_tumor_absent_option():
    _, mask = generate_phantom(3, PhantomConfig(tumor_present=False))
    assert set(np.unique(mask.labels)) == {0, 1}


def test_channels_differ():
    sl, mask = generate_phantom(1, PhantomConfig(noise_std=0.0))
    t = mask.labels == 2
    g = mask.labels == 1
    contrast = [sl.pixels[c][t].mean() - sl.pixels[c][g].mean() for c in range(3)]
    assert contrast[0] > 0 and contrast[1] < 0


def test_invalid_config():
    with pytest.raises(ConfigError):
        generate_phantom(0, PhantomConfig(H=48))
    with pytest.raises(ConfigError):
        generate_phantom(0, PhantomConfig(slice_pos=2.0))


def test_build_dataset_and_manifest_roundtrip(tmp_path):
    m = build_dataset(4, 5, 0.4, seed=0, out_dir=tmp_path)
    assert len(m.entries) == 20 and m.labeled_total == 8 and m.unlabeled_total == 12
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()
    x, y = back.labeled().load_arrays()
    assert x.shape == (8, 3, 64, 64) and y.shape == (8, 64, 64)
    assert back.load_arrays(labels=False).shape == (20, 3, 64, 64)
    with pytest.raises(DataError):
        back.load_arrays()
    # slices of one patient share anatomy: the body outline is identical
    a = np.load(back.resolve(back.entries[0].slice_path))
    b = np.load(back.resolve(back.entries[1].slice_path))
    assert np.abs(a - b).mean() < np.abs(a - np.load(back.resolve(back.entries[5].slice_path))).mean()


def test_manifest_validation(tmp_path):
    m = build_dataset(2, 2, 1.0, seed=1, out_dir=tmp_path)
    (tmp_path / m.entries[0].slice_path).unlink()
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "manifest.json")
    with pytest.raises(ConfigError):
        build_dataset(2, 2, 0.0, seed=1, out_dir=tmp_path / "x")


def test_split_by_patient_is_disjoint(tmp_path):
    m = build_dataset(5, 3, 1.0, seed=2, out_dir=tmp_path)
    tr, te = split_dataset(m, 0.8, seed=0)
    assert set(tr.patients()).isdisjoint(te.patients())
    assert len(tr.entries) + len(te.entries) == 15
    assert len(tr.patients()) == 4
    tr2, te2 = split_dataset(m, 0.8, seed=0)
    assert [e.slice_id for e in tr2.entries] == [e.slice_id for e in tr.entries]


def test_split_errors(tmp_path):
    m = build_dataset(1, 3, 1.0, seed=3, out_dir=tmp_path)
    with pytest.raises(SplitError):
        split_dataset(m)
    with pytest.raises(ConfigError):
        split_dataset(m, ratio=1.0)
    tr, te = split_dataset(m, by_patient=False)
    assert len(tr.entries) == 2 and len(te.entries) == 1
