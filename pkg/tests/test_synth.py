"""Synthetic imagery: rendering, decoding, manifests, dataset generation."""

import numpy as np
import pytest

from parr.errors import ConfigError, ManifestError
from parr.schema import Attribute, AttributeSchema, TagBinding, demo_schema_small
from parr.synth import (
    GRAY,
    Manifest,
    ManifestRecord,
    SynthConfig,
    attribute_color,
    block_grid,
    decode_attributes,
    generate_dataset,
    load_image,
    load_manifest,
    load_split_arrays,
    render,
    save_manifest,
    _write_png,
)


# -- palette and layout -------------------------------------------------------


def test_palette_colors_are_distinct_and_byte_exact():
    colors = [attribute_color(i) for i in range(16)]
    assert len(set(colors)) == 16
    assert GRAY not in colors
    for c in colors + [GRAY]:
        assert all(v % 51 == 0 and 0 <= v <= 255 for v in c)
    with pytest.raises(ConfigError):
        attribute_color(16)


def test_block_grid_layout():
    assert block_grid(8, (32, 16)) == (4, 2, 8, 8)
    assert block_grid(1, (32, 16)) == (1, 1, 32, 16)
    assert block_grid(13, (28, 16)) == (7, 2, 4, 8)
    with pytest.raises(ConfigError):
        block_grid(5, (32, 16))  # 3 rows do not divide 32
    with pytest.raises(ConfigError):
        block_grid(5, (32, 15))  # 2 columns do not divide 15


# -- rendering ----------------------------------------------------------------


def test_render_shape_range_and_determinism():
    schema = demo_schema_small()
    bits = [1, 0, 1, 1, 0, 0, 1, 0]
    a = render(schema, bits, instance_seed=(0, 1, 2), noise_std=0.05)
    b = render(schema, bits, instance_seed=(0, 1, 2), noise_std=0.05)
    c = render(schema, bits, instance_seed=(0, 1, 3), noise_std=0.05)
    assert a.shape == (3, 32, 16)
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_render_noise_free_blocks_hold_palette_colors():
    schema = demo_schema_small()
    bits = [1, 0, 0, 0, 0, 0, 0, 0]
    img = render(schema, bits, instance_seed=0, noise_std=0.0, jitter=0)
    # attribute 0 fills the top-left 8x8 block with its palette color
    block = img[:, :8, :8]
    want = np.array(attribute_color(0), dtype=np.float64) / 255.0
    np.testing.assert_array_equal(block, np.broadcast_to(want[:, None, None], block.shape))
    # everything else stays gray
    gray = np.array(GRAY, dtype=np.float64) / 255.0
    np.testing.assert_array_equal(img[:, 8:, :], np.broadcast_to(gray[:, None, None], (3, 24, 16)))


def test_glyph_attributes_render_inset():
    schema = demo_schema_small()  # attribute 7 (hat) belongs to a glyph group
    bits = [0] * 7 + [1]
    img = render(schema, bits, instance_seed=0, noise_std=0.0, jitter=0)
    gray = np.array(GRAY, dtype=np.float64) / 255.0
    color = np.array(attribute_color(7), dtype=np.float64) / 255.0
    block = img[:, 24:32, 8:16]
    # border ring stays gray, interior takes the color
    np.testing.assert_array_equal(block[:, 0, :], np.broadcast_to(gray[:, None], (3, 8)))
    np.testing.assert_array_equal(block[:, :, 0], np.broadcast_to(gray[:, None], (3, 8)))
    np.testing.assert_array_equal(
        block[:, 1:7, 1:7], np.broadcast_to(color[:, None, None], (3, 6, 6))
    )


def test_decode_inverts_render_across_random_vectors(rng):
    schema = demo_schema_small()
    for trial in range(30):
        bits = rng.integers(0, 2, size=8).tolist()
        img = render(
            schema, bits, instance_seed=trial, noise_std=0.0, jitter=2
        )
        got = decode_attributes(schema, img)
        assert list(got.bits) == bits, f"trial {trial}: {got.bits} != {bits}"


def test_decode_survives_pipeline_noise(rng):
    schema = demo_schema_small()
    for trial in range(15):
        bits = rng.integers(0, 2, size=8).tolist()
        img = render(
            schema, bits, instance_seed=(7, trial), noise_std=0.05, jitter=2
        )
        got = decode_attributes(schema, img)
        assert list(got.bits) == bits


def test_decode_sees_single_bit_differences():
    schema = demo_schema_small()
    base = [1, 0, 1, 0, 1, 0, 1, 0]
    for flip in range(8):
        other = list(base)
        other[flip] ^= 1
        img = render(schema, other, instance_seed=3, noise_std=0.0)
        got = list(decode_attributes(schema, img).bits)
        assert got == other
        assert got != base


def test_decode_rejects_wrong_layout():
    schema = demo_schema_small()
    with pytest.raises(ConfigError):
        decode_attributes(schema, np.zeros((32, 16)))


def test_png_roundtrip_is_exact(tmp_path, rng):
    schema = demo_schema_small()
    bits = rng.integers(0, 2, size=8).tolist()
    img = render(schema, bits, instance_seed=5, noise_std=0.0, jitter=2)
    path = tmp_path / "x.png"
    _write_png(path, img)
    back = load_image(path)
    np.testing.assert_array_equal(back, img)


# -- manifests -----------------------------------------------------------------


def _tiny_manifest() -> Manifest:
    return Manifest(
        schema_hash=demo_schema_small().schema_hash(),
        image_hw=(32, 16),
        records=[
            ManifestRecord("images/a.png", (1, 0, 1, 0, 0, 0, 0, 0), 0, "train"),
            ManifestRecord("images/b.png", (0, 1, 0, 1, 0, 0, 0, 0), 1, "gallery"),
            ManifestRecord("images/c.png", (0, 1, 0, 1, 0, 0, 0, 0), 1, "query"),
        ],
    )


def test_manifest_roundtrip(tmp_path):
    m = _tiny_manifest()
    path = tmp_path / "manifest.jsonl"
    save_manifest(m, path)
    back = load_manifest(path, schema=demo_schema_small())
    assert back.schema_hash == m.schema_hash
    assert back.image_hw == (32, 16)
    assert back.records == m.records
    assert [r.image for r in back.split("gallery")] == ["images/b.png"]
    assert back.categories("train") == {0: (1, 0, 1, 0, 0, 0, 0, 0)}


def test_manifest_bytes_are_stable(tmp_path):
    m = _tiny_manifest()
    p1, p2 = tmp_path / "m1.jsonl", tmp_path / "m2.jsonl"
    save_manifest(m, p1)
    save_manifest(m, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_manifest_error_reports_line_number(tmp_path):
    m = _tiny_manifest()
    path = tmp_path / "manifest.jsonl"
    save_manifest(m, path)
    lines = path.read_text().splitlines()
    lines[2] = '{"image": "x.png"}'  # record missing required keys
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=":3:"):
        load_manifest(path)


def test_manifest_failure_modes(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "none.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ManifestError, match="empty"):
        load_manifest(empty)
    bad_header = tmp_path / "hdr.jsonl"
    bad_header.write_text("not json\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(bad_header)
    header_only = tmp_path / "ho.jsonl"
    save_manifest(_tiny_manifest(), header_only)
    header_only.write_text(header_only.read_text().splitlines()[0] + "\n")
    with pytest.raises(ManifestError, match="no records"):
        load_manifest(header_only)


def test_manifest_schema_hash_check(tmp_path):
    m = _tiny_manifest()
    path = tmp_path / "manifest.jsonl"
    save_manifest(m, path)
    other = AttributeSchema(
        attributes=[Attribute("young", "age")], tags={"age": [TagBinding(0, "young")]}
    )
    with pytest.raises(ManifestError, match="schema"):
        load_manifest(path, schema=other)


# -- configuration -------------------------------------------------------------


def test_synth_config_validation():
    schema = demo_schema_small()
    with pytest.raises(ConfigError):
        SynthConfig(schema=schema, noise_std=-0.1)
    with pytest.raises(ConfigError):
        SynthConfig(schema=schema, n_categories=2**8 + 1)
    with pytest.raises(ConfigError):
        SynthConfig(schema=schema, unseen_fraction=1.0)
    with pytest.raises(ConfigError):
        SynthConfig(schema=schema, split_fractions=(0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        SynthConfig(schema=schema, image_hw=(30, 16))
    big = AttributeSchema(
        attributes=[Attribute(f"a{i}", "g") for i in range(25)],
        tags={"g": [TagBinding(0, "a0")]},
    )
    with pytest.raises(ConfigError, match="24"):
        SynthConfig(schema=big, image_hw=(26, 16))


# -- dataset generation -----------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    cfg = SynthConfig(
        schema=demo_schema_small(),
        n_categories=6,
        images_per_category=10,
        noise_std=0.05,
        seed=11,
        unseen_fraction=0.34,  # 2 of 6 categories held out
    )
    manifest = generate_dataset(cfg, out)
    return cfg, out, manifest


def test_generate_dataset_counts_and_splits(small_dataset):
    cfg, out, manifest = small_dataset
    assert len(manifest.records) == 60
    cats = {r.category for r in manifest.records}
    assert cats == set(range(6))
    train_cats = {r.category for r in manifest.split("train")}
    all_cats = manifest.categories()
    unseen = cats - train_cats
    assert len(unseen) == 2
    # seen categories: 8 train / 1 gallery / 1 query of 10 images
    for cat in train_cats:
        recs = [r for r in manifest.records if r.category == cat]
        by = {s: sum(1 for r in recs if r.split == s) for s in ("train", "gallery", "query")}
        assert by == {"train": 8, "gallery": 1, "query": 1}
    # unseen categories split gallery/query proportionally (0.12 : 0.08)
    for cat in unseen:
        recs = [r for r in manifest.records if r.category == cat]
        by = {s: sum(1 for r in recs if r.split == s) for s in ("train", "gallery", "query")}
        assert by == {"train": 0, "gallery": 6, "query": 4}
    assert len(all_cats) == 6


def test_generated_images_decode_to_their_labels(small_dataset):
    cfg, out, manifest = small_dataset
    for rec in manifest.records[::7]:
        img = load_image(out / rec.image)
        got = decode_attributes(cfg.schema, img)
        assert got.bits == rec.attrs, rec.image


def test_generated_files_exist_and_manifest_loads(small_dataset):
    cfg, out, manifest = small_dataset
    for rec in manifest.records:
        assert (out / rec.image).exists()
    back = load_manifest(out / "manifest.jsonl", schema=cfg.schema)
    assert back.records == manifest.records


def test_load_split_arrays_shapes(small_dataset):
    cfg, out, manifest = small_dataset
    images, labels, cats, paths = load_split_arrays(manifest, out, "train")
    assert images.shape == (32, 3, 32, 16)
    assert images.dtype == np.float32
    assert labels.shape == (32, 8)
    assert cats.shape == (32,)
    assert len(paths) == 32
    with pytest.raises(ManifestError):
        load_split_arrays(Manifest("x", (32, 16), []), out, "train")


def test_generation_is_fully_deterministic(tmp_path):
    cfg = SynthConfig(
        schema=demo_schema_small(),
        n_categories=3,
        images_per_category=4,
        seed=5,
        unseen_fraction=0.0,
    )
    m1 = generate_dataset(cfg, tmp_path / "run1")
    m2 = generate_dataset(cfg, tmp_path / "run2")
    b1 = (tmp_path / "run1" / "manifest.jsonl").read_bytes()
    b2 = (tmp_path / "run2" / "manifest.jsonl").read_bytes()
    assert b1 == b2
    assert m1.records == m2.records
    for rec in m1.records:
        assert (tmp_path / "run1" / rec.image).read_bytes() == (
            tmp_path / "run2" / rec.image
        ).read_bytes()


def test_different_seed_different_data(tmp_path):
    base = dict(
        schema=demo_schema_small(),
        n_categories=3,
        images_per_category=2,
        unseen_fraction=0.0,
    )
    m1 = generate_dataset(SynthConfig(seed=1, **base), tmp_path / "s1")
    m2 = generate_dataset(SynthConfig(seed=2, **base), tmp_path / "s2")
    assert [r.attrs for r in m1.records] != [r.attrs for r in m2.records] or (
        (tmp_path / "s1" / m1.records[0].image).read_bytes()
        != (tmp_path / "s2" / m2.records[0].image).read_bytes()
    )
