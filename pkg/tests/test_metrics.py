import math

import numpy as np
import pytest

from regsynth.errors import EmptyMaskError, ParameterError, ValidationError
from regsynth.metrics import (
    CaseMetrics,
    evaluate_case,
    evaluate_dataset,
    mae_masked,
    psnr_masked,
    ssim_map,
    ssim_masked,
    summarize,
    write_metrics_csv,
    write_summary_json,
)
from regsynth.phantom import PhantomConfig, write_dataset, load_phantom_pair
from regsynth.volumes import Mask, Units, Volume, save_volume


def vol(arr):
    return Volume(np.asarray(arr, np.float32))


def full_mask(dims):
    return Mask(np.ones(dims, np.uint8))


def smooth_hu_volume(seed, dims=(16, 16, 16), lo=-200.0, hi=400.0):
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    x = gaussian_filter(rng.standard_normal(dims), 1.5)
    x = (x - x.min()) / (x.max() - x.min())
    return vol(lo + (hi - lo) * x)


def ssim_reference_at(pred, ref, voxel, data_range):
    """Single-voxel SSIM from an explicitly built 11-tap Gaussian window."""
    sigma, radius = 1.5, 5
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    kernel = np.einsum("i,j,k->ijk", taps, taps, taps)

    dims = pred.shape
    z, y, x = voxel
    weights = []
    samples_a = []
    samples_b = []
    for dz in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                zz, yy, xx = z + dz, y + dy, x + dx
                if 0 <= zz < dims[0] and 0 <= yy < dims[1] and 0 <= xx < dims[2]:
                    weights.append(kernel[dz + radius, dy + radius, dx + radius])
                    samples_a.append(float(pred[zz, yy, xx]))
                    samples_b.append(float(ref[zz, yy, xx]))
    w = np.array(weights) / np.sum(weights)
    a = np.array(samples_a)
    b = np.array(samples_b)
    mu_a, mu_b = (w * a).sum(), (w * b).sum()
    var_a = (w * a * a).sum() - mu_a**2
    var_b = (w * b * b).sum() - mu_b**2
    cov = (w * a * b).sum() - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )


class TestMae:
    def test_identical_is_zero(self):
        v = smooth_hu_volume(0)
        assert mae_masked(v, v, full_mask(v.dims)) == 0.0

    def test_constant_offset(self):
        ref = smooth_hu_volume(1)
        pred = vol(ref.voxels + 20.0)
        assert abs(mae_masked(pred, ref, full_mask(ref.dims)) - 20.0) < 1e-4

    def test_only_mask_counts(self):
        ref = smooth_hu_volume(2)
        corrupted = ref.voxels.copy()
        corrupted[0] = 999.0
        mask = np.ones(ref.dims, np.uint8)
        mask[0] = 0
        assert mae_masked(vol(corrupted), ref, Mask(mask)) == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(ParameterError):
            mae_masked(smooth_hu_volume(3), smooth_hu_volume(3, dims=(8, 16, 16)),
                       full_mask((16, 16, 16)))

    def test_units_mismatch(self):
        a = smooth_hu_volume(4)
        b = Volume(np.zeros(a.dims, np.float32), units=Units.NORMALIZED)
        with pytest.raises(ValidationError):
            mae_masked(a, b, full_mask(a.dims))

    def test_empty_mask(self):
        a = smooth_hu_volume(5)
        with pytest.raises(EmptyMaskError):
            mae_masked(a, a, Mask(np.zeros(a.dims, np.uint8)))


class TestPsnr:
    def test_identical_is_inf(self):
        v = smooth_hu_volume(6)
        assert psnr_masked(v, v, full_mask(v.dims)) == math.inf

    def test_constant_offset_20_hu_is_40_db(self):
        ref = smooth_hu_volume(7)
        pred = vol(ref.voxels + 20.0)
        psnr = psnr_masked(pred, ref, full_mask(ref.dims))
        assert abs(psnr - 40.0) < 1e-6

    def test_data_range_guard(self):
        v = smooth_hu_volume(8)
        with pytest.raises(ParameterError):
            psnr_masked(v, v, full_mask(v.dims), data_range=0.0)

    def test_higher_noise_lower_psnr(self):
        ref = smooth_hu_volume(9)
        rng = np.random.default_rng(10)
        small = vol(ref.voxels + rng.normal(0, 5, ref.dims))
        large = vol(ref.voxels + rng.normal(0, 50, ref.dims))
        m = full_mask(ref.dims)
        assert psnr_masked(small, ref, m) > psnr_masked(large, ref, m)


class TestSsim:
    def test_identical_is_one(self):
        v = smooth_hu_volume(11)
        assert abs(ssim_masked(v, v, full_mask(v.dims)) - 1.0) < 1e-6

    def test_constant_images_closed_form(self):
        # zero-variance images: score reduces to (2*mu_a*mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
        a = vol(np.zeros((12, 12, 12)))
        b = vol(np.full((12, 12, 12), 20.0))
        expected = (0.0 + 400.0) / (400.0 + 400.0)
        got = ssim_masked(a, b, full_mask((12, 12, 12)))
        assert abs(got - expected) < 1e-9

    def test_matches_single_voxel_reference(self):
        pred = smooth_hu_volume(12, dims=(14, 14, 14))
        ref = smooth_hu_volume(13, dims=(14, 14, 14))
        smap = ssim_map(pred.voxels, ref.voxels, 2000.0)
        for voxel in [(7, 7, 7), (0, 0, 0), (13, 2, 11)]:
            expected = ssim_reference_at(pred.voxels, ref.voxels, voxel, 2000.0)
            assert abs(smap[voxel] - expected) < 1e-9, voxel

    def test_symmetry(self):
        a = smooth_hu_volume(14)
        b = smooth_hu_volume(15)
        m = full_mask(a.dims)
        assert abs(ssim_masked(a, b, m) - ssim_masked(b, a, m)) < 1e-12

    def test_blur_reduces_ssim(self):
        from scipy.ndimage import gaussian_filter

        ref = smooth_hu_volume(16)
        blurred = vol(gaussian_filter(ref.voxels, 2.0))
        m = full_mask(ref.dims)
        assert ssim_masked(blurred, ref, m) < ssim_masked(ref, ref, m)

    def test_mask_restricts_scoring(self):
        ref = smooth_hu_volume(17)
        pred = ref.voxels.copy()
        pred[0:4] += 300.0  # damage only outside the mask
        mask = np.ones(ref.dims, np.uint8)
        # scores are taken at mask-center voxels, whose 11-tap windows reach
        # 5 voxels out, so keep a margin of window radius past the damage
        mask[0:9] = 0
        score = ssim_masked(vol(pred), ref, Mask(mask))
        assert abs(score - 1.0) < 1e-6


class TestSummaries:
    def test_two_case_mean_and_sample_std(self):
        cases = [
            CaseMetrics("a", 10.0, 30.0, 0.8),
            CaseMetrics("b", 14.0, 34.0, 0.9),
        ]
        s = summarize(cases)
        assert s.count == 2
        assert s.mae_mean == 12.0
        assert abs(s.mae_std - np.std([10.0, 14.0], ddof=1)) < 1e-12
        assert abs(s.ssim_mean - 0.85) < 1e-12

    def test_single_case_std_zero(self):
        s = summarize([CaseMetrics("a", 5.0, 20.0, 0.7)])
        assert s.mae_std == 0.0 and s.psnr_std == 0.0 and s.ssim_std == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            summarize([])

    def test_csv_and_json_round_trip(self, tmp_path):
        import csv as csvmod
        import json

        cases = [CaseMetrics("a", 1.5, 30.25, 0.875), CaseMetrics("b", 2.5, 28.0, 0.75)]
        write_metrics_csv(cases, tmp_path / "metrics.csv")
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csvmod.DictReader(fh))
        assert [r["case"] for r in rows] == ["a", "b"]
        assert float(rows[0]["mae_hu"]) == 1.5
        write_summary_json(summarize(cases), tmp_path / "summary.json")
        payload = json.loads((tmp_path / "summary.json").read_text())
        assert payload["count"] == 2
        assert payload["mae"]["mean"] == 2.0


class TestEvaluateDataset:
    def make_dataset(self, tmp_path, count=2):
        cfg = PhantomConfig(dims=(16, 16, 16), misalign_amplitude=1.5, misalign_sigma=4.0)
        ref_dir = tmp_path / "ref"
        write_dataset(ref_dir, cfg, count=count, seed=3)
        pred_dir = tmp_path / "pred"
        pred_dir.mkdir()
        for i in range(count):
            pair = load_phantom_pair(ref_dir, f"case{i:04d}")
            save_volume(pair.target_misaligned, pred_dir / f"case{i:04d}_pred.mivol")
        return pred_dir, ref_dir

    def test_scores_whole_cohort(self, tmp_path):
        pred_dir, ref_dir = self.make_dataset(tmp_path)
        cases, summary = evaluate_dataset(pred_dir, ref_dir, tmp_path / "out")
        assert len(cases) == 2
        assert summary.count == 2
        assert summary.mae_mean > 0
        assert (tmp_path / "out" / "metrics.csv").is_file()
        assert (tmp_path / "out" / "summary.json").is_file()

    def test_missing_prediction(self, tmp_path):
        pred_dir, ref_dir = self.make_dataset(tmp_path)
        (pred_dir / "case0001_pred.mivol").unlink()
        with pytest.raises(ParameterError):
            evaluate_dataset(pred_dir, ref_dir)

    def test_perfect_prediction_reports_inf_psnr(self, tmp_path):
        pred_dir, ref_dir = self.make_dataset(tmp_path, count=1)
        pair = load_phantom_pair(ref_dir, "case0000")
        save_volume(pair.target_aligned, pred_dir / "case0000_pred.mivol")
        cases, _ = evaluate_dataset(pred_dir, ref_dir)
        assert cases[0].psnr == math.inf
        assert cases[0].mae == 0.0
