import numpy as np
import pytest

from glyphforge.data import (
    DatasetError,
    DatasetManifest,
    SyntheticGlyphSpec,
    TextureProfile,
    save_dataset,
    scan_dataset,
    synth_generate,
)
from glyphforge.imagecore import Image, binarize, save_image


def test_synth_counts_and_ranges():
    spec = SyntheticGlyphSpec(num_classes=2, canvas=64)
    sc, pc = synth_generate(spec, samples_per_class=10, seed=1)
    assert len(sc) == 20 and len(pc) == 20
    for ds in (sc, pc):
        assert ds.images.shape == (20, 64, 64)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert sorted(set(ds.labels)) == ["class_00", "class_01"]


def test_synth_zero_noise_pure_white_background():
    spec = SyntheticGlyphSpec(
        num_classes=1, canvas=32,
        texture=TextureProfile(noise_amplitude=0.0, blotch_density=0.0, brightness_bias=0.0),
    )
    _, pc = synth_generate(spec, samples_per_class=4, seed=2)
    for i in range(len(pc)):
        img = pc.image(i)
        assert img.max() == 1.0
        # background pixels (away from any stroke) are exactly white
        assert (img == 1.0).sum() > img.size * 0.3


def test_synth_deterministic():
    spec = SyntheticGlyphSpec(num_classes=3, canvas=32)
    a_sc, a_pc = synth_generate(spec, 5, seed=9)
    b_sc, b_pc = synth_generate(spec, 5, seed=9)
    assert np.array_equal(a_sc.images, b_sc.images)
    assert np.array_equal(a_pc.images, b_pc.images)
    c_sc, _ = synth_generate(spec, 5, seed=10)
    assert not np.array_equal(a_sc.images, c_sc.images)


def test_synth_unpaired_but_same_topology():
    spec = SyntheticGlyphSpec(num_classes=2, canvas=48)
    sc, pc = synth_generate(spec, 6, seed=3)
    assert sc.stroke_counts == pc.stroke_counts
    assert set(sc.stroke_counts) == {"class_00", "class_01"}
    # unpaired: same-class samples differ pixelwise across domains
    for i in range(len(sc)):
        assert not np.array_equal(sc.images[i], pc.images[i])


def test_every_synthetic_glyph_binarizes_nontrivially():
    spec = SyntheticGlyphSpec(num_classes=3, canvas=64)
    sc, _ = synth_generate(spec, 8, seed=4)
    for i in range(len(sc)):
        mask = binarize(Image(sc.images[i].astype(np.float64)), "otsu")
        assert 0 < mask.foreground_count < 64 * 64


def test_scan_dataset_enumeration(tmp_path):
    spec = SyntheticGlyphSpec(num_classes=2, canvas=32)
    sc, _ = synth_generate(spec, 3, seed=5)
    save_dataset(sc, tmp_path / "corpus")
    manifest = scan_dataset(tmp_path / "corpus", 32)
    assert len(manifest) == 6
    assert manifest.labels == ["class_00", "class_01"]
    assert manifest.entries == sorted(manifest.entries)
    ds = manifest.as_dataset()
    assert ds.images.shape == (6, 32, 32)


def test_scan_dataset_resizes(tmp_path):
    spec = SyntheticGlyphSpec(num_classes=1, canvas=32)
    sc, _ = synth_generate(spec, 2, seed=6)
    save_dataset(sc, tmp_path / "corpus")
    manifest = scan_dataset(tmp_path / "corpus", 16)
    img = manifest.load(0)
    assert (img.height, img.width) == (16, 16)


def test_scan_dataset_empty_root_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no classes"):
        scan_dataset(tmp_path / "empty", 32)
    with pytest.raises(DatasetError):
        scan_dataset(tmp_path / "missing", 32)


def test_scan_dataset_skips_corrupt_files(tmp_path):
    root = tmp_path / "corpus"
    good_dir = root / "a"
    good_dir.mkdir(parents=True)
    save_image(Image(np.full((8, 8), 0.5)), good_dir / "good.png")
    (good_dir / "corrupt.png").write_bytes(b"not a png at all")
    manifest = scan_dataset(root, 8)
    assert len(manifest) == 1
    assert len(manifest.skipped) == 1
    assert manifest.skipped[0][0].endswith("corrupt.png")


def test_manifest_json_roundtrip(tmp_path):
    spec = SyntheticGlyphSpec(num_classes=2, canvas=32)
    sc, _ = synth_generate(spec, 2, seed=7)
    save_dataset(sc, tmp_path / "corpus")
    manifest = scan_dataset(tmp_path / "corpus", 32)
    back = DatasetManifest.from_json(manifest.to_json())
    assert back.entries == manifest.entries
    assert back.image_size == manifest.image_size
    assert back.root == manifest.root


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticGlyphSpec(num_classes=0)
    with pytest.raises(ValueError):
        SyntheticGlyphSpec(strokes_min=5, strokes_max=3)
    with pytest.raises(ValueError):
        TextureProfile(noise_amplitude=1.5)
