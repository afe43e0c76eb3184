from pathlib import Path

import numpy as np
import pytest

from hybridwm.imgcore import SeedSpec, seeded_rng
from hybridwm.synth import (CLEAN_READS, CorruptionSpec, Manifest, ManifestParseException,
                            PlacementException, SynthException, add_gaussian_noise, build_corpus,
                            composite_watermark, draw_spec, make_sample, resample_pair,
                            _plan_jobs)
from tests.factories import constant_image, small_ranges, square_asset, write_images


def a_spec(**kwargs):
    values = dict(transparency=0.5, scale=0.25, coverage=0.0, position=(4, 6), watermark_index=0,
                  noise_sigma=0.0, footprint=(10, 10))
    values.update(kwargs)
    return CorruptionSpec(**values)


def test_composite_inside_footprint_only(an_image):
    asset = square_asset(10, (1.0, 1.0, 1.0))
    out = composite_watermark(an_image, asset, a_spec())
    expected = 0.5 * 1.0 + 0.5 * an_image.pixels[4:14, 6:16]
    assert np.allclose(out.pixels[4:14, 6:16], expected, atol=1e-6)
    untouched = np.ones(an_image.shape[:2], dtype=bool)
    untouched[4:14, 6:16] = False
    assert np.array_equal(out.pixels[untouched], an_image.pixels[untouched])


def test_composite_hand_value():
    black = constant_image(0.0, 32, 32)
    out = composite_watermark(black, square_asset(10, (1.0, 1.0, 1.0)), a_spec(transparency=0.3))
    # 0.3 * 1 + 0.7 * 0
    assert np.all(out.pixels[4:14, 6:16] == np.float32(0.3))
    assert np.all(out.pixels[14:, :] == 0.0)



def test_composite_transparency_zero(an_image):
    out = composite_watermark(an_image, square_asset(10), a_spec(transparency=0.0))
    assert np.array_equal(out.pixels, an_image.pixels)


def test_composite_full_opacity_replaces(an_image):
    out = composite_watermark(an_image, square_asset(10, (0.2, 0.4, 0.6)), a_spec(transparency=1.0))
    assert np.allclose(out.pixels[4:14, 6:16], [0.2, 0.4, 0.6], atol=1e-6)


def test_composite_out_of_bounds(an_image):
    with pytest.raises(PlacementException):
        composite_watermark(an_image, square_asset(10), a_spec(position=(60, 0)))


def test_noise_sigma_zero_is_identity(an_image):
    out = add_gaussian_noise(an_image, 0, SeedSpec(0, 'a'))
    assert np.array_equal(out.pixels, an_image.pixels)


def test_noise_statistics():
    img = constant_image(0.5, 256, 256)
    out = add_gaussian_noise(img, 25, SeedSpec(0, 'a'))
    residual = out.pixels - img.pixels
    assert abs(residual.mean()) < 2e-3
    assert residual.std() == pytest.approx(25 / 255, rel=0.02)


def test_noise_is_not_clamped():
    out = add_gaussian_noise(constant_image(1.0, 64, 64), 50, SeedSpec(0, 'a'))
    assert out.pixels.max() > 1.0


def test_noise_deterministic(an_image):
    a = add_gaussian_noise(an_image, 15, SeedSpec(7, 'x'))
    b = add_gaussian_noise(an_image, 15, SeedSpec(7, 'x'))
    assert np.array_equal(a.pixels, b.pixels)


def test_negative_sigma(an_image):
    with pytest.raises(SynthException):
        add_gaussian_noise(an_image, -1, SeedSpec(0))


def test_draw_spec_respects_bounds(some_assets):
    ranges = small_ranges(coverage_max=0.05)
    for index in range(20):
        spec = draw_spec(seeded_rng(SeedSpec(index)), (64, 64, 3), some_assets, ranges)
        h, w = spec.footprint
        assert spec.coverage <= 0.05
        assert spec.position[0] + h <= 64 and spec.position[1] + w <= 64
        assert 0.2 <= spec.scale <= 0.3


def test_draw_spec_gives_up(some_assets):
    ranges = small_ranges(scale_interval=(0.9, 1.0), coverage_max=0.01, max_placement_tries=5)
    with pytest.raises(PlacementException):
        draw_spec(seeded_rng(SeedSpec(0)), (64, 64, 3), some_assets, ranges)


def test_make_sample_literal_pairing(an_image, some_assets, some_ranges):
    sample = make_sample(an_image, some_assets, some_ranges, SeedSpec(1, 'x'))
    spec, extra = sample.spec, sample.extra_spec
    assert spec.noise_sigma == 15
    assert extra.noise_sigma == 0
    # y_w is x_w with one more mark: equal wherever the extra mark is not
    outside = np.ones(an_image.shape[:2], dtype=bool)
    outside[extra.window()] = False
    assert np.array_equal(sample.y_w.pixels[outside], sample.x_w.pixels[outside])


def test_make_sample_without_extra_mark(an_image, some_assets):
    ranges = small_ranges(sigmas=(0,), extra_transparencies=(0.0,))
    sample = make_sample(an_image, some_assets, ranges, SeedSpec(1, 'x'))
    assert np.array_equal(sample.y_w.pixels, sample.x_w.pixels)
    assert np.array_equal(sample.x_wn.pixels, sample.x_w.pixels)


def test_make_sample_independent_pairing(an_image, some_assets):
    ranges = small_ranges(pairing_mode='independent')
    sample = make_sample(an_image, some_assets, ranges, SeedSpec(1, 'x'))
    outside = np.ones(an_image.shape[:2], dtype=bool)
    outside[sample.extra_spec.window()] = False
    assert np.array_equal(sample.y_w.pixels[outside], an_image.pixels[outside])



def test_pinned_sample_is_fully_determined():
    """transparency 0.3, sigma 25, one asset at a fixed position: every pixel
    of the sample can be written down without the synthesizer"""
    black = constant_image(0.0, 64, 64, id='black')
    mark = square_asset(16, (1.0, 1.0, 1.0), 'white')
    ranges = small_ranges(transparencies=(0.3,), sigmas=(25,), scale_interval=(0.25, 0.25),
                          fixed_position=(8, 12))
    seed = SeedSpec(7, 'black')
    sample = make_sample(black, [mark], ranges, seed)

    assert sample.spec.position == (8, 12)
    assert sample.spec.footprint == (16, 16)
    x_w = np.zeros((64, 64, 3), dtype=np.float32)
    x_w[8:24, 12:28] = np.float32(0.3)
    assert np.array_equal(sample.x_w.pixels, x_w)

    noise = seeded_rng(seed.child('noise')).standard_normal((64, 64, 3), dtype=np.float32)
    assert np.array_equal(sample.x_wn.pixels, x_w + noise * np.float32(25 / 255.0))

    (row, col), (h, w) = sample.extra_spec.position, sample.extra_spec.footprint
    y_w = x_w.copy()
    y_w[row:row + h, col:col + w] = np.clip(np.float32(0.3) * np.float32(1.0)
                                            + np.float32(0.7) * x_w[row:row + h, col:col + w],
                                            0.0, 1.0)
    assert np.allclose(sample.y_w.pixels, y_w, atol=1e-7)

    again = make_sample(black, [mark], ranges, seed)
    for name in ('x_wn', 'x_w', 'y_w'):
        assert getattr(again, name).pixels.tobytes() == getattr(sample, name).pixels.tobytes()



def test_clean_reads_are_counted(an_image, some_assets, some_ranges):
    sample = make_sample(an_image, some_assets, some_ranges, SeedSpec(1, 'x'))
    pair = sample.training_pair()
    assert not hasattr(pair, 'y_clean')
    assert CLEAN_READS.count == 0
    sample.y_clean
    assert CLEAN_READS.count == 1


def test_suspended_reads_are_kept_apart(an_image, some_assets, some_ranges):
    sample = make_sample(an_image, some_assets, some_ranges, SeedSpec(1, 'x'))
    with CLEAN_READS.suspended():
        sample.y_clean
        with CLEAN_READS.suspended():
            sample.y_clean
    assert CLEAN_READS.count == 0
    assert CLEAN_READS.suspended_count == 2
    sample.y_clean
    assert CLEAN_READS.count == 1


def test_resample_pair_varies_per_epoch(a_train_corpus, some_assets, some_ranges):
    record = a_train_corpus[0]
    x_w = record.load(a_train_corpus.root, 'x_w')
    first = resample_pair(x_w, record, some_assets, some_ranges, seed=1, epoch=0)
    again = resample_pair(x_w, record, some_assets, some_ranges, seed=1, epoch=0)
    other = resample_pair(x_w, record, some_assets, some_ranges, seed=1, epoch=1)
    assert np.array_equal(first.x_wn.pixels, again.x_wn.pixels)
    assert not np.array_equal(first.x_wn.pixels, other.x_wn.pixels)
    assert first.x_w is x_w


def test_test_split_plan_size():
    paths = [Path(f"img{i:02d}.png") for i in range(21)]
    jobs = _plan_jobs(paths, 12, small_ranges(sigmas=(25,), transparencies=(0.5,)), 'test', 1)
    assert len(jobs) == 252
    assert len({job.sample_id for job in jobs}) == 252
    assert jobs[0].sample_id == 'img00_w00_s25_a0.5'
    assert jobs[0].ranges.asset_indices == (0,)


def test_test_split_plan_covers_conditions():
    jobs = _plan_jobs([Path('a.png')], 2, small_ranges(sigmas=(0, 50), transparencies=(0.3, 1.0)),
                      'test', 1)
    assert len(jobs) == 2 * 2 * 2


def test_build_train_corpus(a_train_corpus):
    assert len(a_train_corpus) == 4
    record = a_train_corpus[0]
    assert record.id == 'clean00_v00'
    assert not record.has_clean
    assert (a_train_corpus.root / 'manifest.jsonl').exists()
    assert (a_train_corpus.root / record.paths['x_wn']).exists()
    assert not (a_train_corpus.root / 'train' / 'y_clean').exists()


def test_build_test_corpus(a_test_corpus):
    assert len(a_test_corpus) == 2 * 2
    assert all(r.has_clean for r in a_test_corpus)
    assert {r.spec.watermark_index for r in a_test_corpus} == {0, 1}
    assert all(r.sigma == 15 and r.alpha_w == 0.5 for r in a_test_corpus)


def test_stored_sample_matches_synthesis(a_test_corpus):
    record = a_test_corpus[0]
    sample = record.load_sample(a_test_corpus.root)
    assert sample.x_wn.pixels.min() >= -1.0
    # x_wn is stored over (-1, 2), so noise outside [0, 1] survives
    residual = sample.x_wn.pixels - sample.x_w.pixels
    assert residual.std() == pytest.approx(15 / 255, rel=0.15)
    assert CLEAN_READS.count == 0
    assert sample.y_clean.shape == sample.x_w.shape
    assert CLEAN_READS.count == 1


def test_rebuild_is_identical(tmp_path, an_image_dir, some_assets, some_ranges):
    first = build_corpus(an_image_dir, some_assets, some_ranges, tmp_path / 'a', seed=9)
    second = build_corpus(an_image_dir, some_assets, some_ranges, tmp_path / 'b', seed=9, workers=2)
    assert first.to_text() == second.to_text()
    assert first.digest() == second.digest()
    third = build_corpus(an_image_dir, some_assets, some_ranges, tmp_path / 'c', seed=10)
    assert third.digest() != first.digest()


def test_manifest_read(a_train_corpus):
    read = Manifest.read(a_train_corpus.root)
    assert read.to_text() == a_train_corpus.to_text()
    assert read.split('test').records == []


def test_manifest_read_broken(tmp_path):
    (tmp_path / 'manifest.jsonl').write_text('{"id": "x"}\n')
    with pytest.raises(ManifestParseException):
        Manifest.read(tmp_path)
    (tmp_path / 'manifest.jsonl').write_text('not json\n')
    with pytest.raises(ManifestParseException):
        Manifest.read(tmp_path)


def test_build_without_images(tmp_path, some_assets, some_ranges):
    (tmp_path / 'empty').mkdir()
    with pytest.raises(SynthException):
        build_corpus(tmp_path / 'empty', some_assets, some_ranges, tmp_path / 'out', seed=0)


def test_build_too_small_image(tmp_path, some_assets):
    write_images(tmp_path / 'tiny', n=1, height=8, width=8)
    ranges = small_ranges(scale_interval=(0.9, 1.0), coverage_max=0.05, max_placement_tries=3)
    with pytest.raises(PlacementException):
        build_corpus(tmp_path / 'tiny', some_assets, ranges, tmp_path / 'out', seed=0)
    assert not (tmp_path / 'out' / 'manifest.jsonl').exists()
