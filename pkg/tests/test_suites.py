import numpy as np
import pytest

from graspfield.grids import SdfGrid
from graspfield.metrics import voxel_iou
from graspfield.objectives import ni_loss
from graspfield.suites import (ABLATION_SAMPLER, ablation_run, build_suite,
                               conditioned_library, energy_tail_nonincreasing,
                               evidence_fn, final_losses, format_selftest,
                               make_distractor, mask_mismatch, noisy_contacts,
                               proximity_bump, run_entry, selftest)
from graspfield.touch import build_touch_tensor


@pytest.fixture(scope="module")
def small_suite():
    return build_suite(n_scenes=2, resolution=32, mask_size=64)


def test_suite_deterministic(small_suite):
    again = build_suite(n_scenes=2, resolution=32, mask_size=64)
    for a, b in zip(small_suite, again):
        assert np.array_equal(a.lib.latents, b.lib.latents)
        assert np.array_equal(a.true_grid.values, b.true_grid.values)


def test_rung_zero_is_truth(small_suite):
    for e in small_suite:
        assert np.array_equal(e.rung_grids[0].values, e.true_grid.values)


def test_ladder_monotone(small_suite):
    for e in small_suite:
        ious = [voxel_iou(g, e.true_grid) for g in e.rung_grids]
        assert all(a >= b for a, b in zip(ious, ious[1:]))
        nis = [ni_loss(g, e.scene.hand_sdf, e.tau)[0] for g in e.rung_grids]
        assert all(a <= b + 1e-12 for a, b in zip(nis, nis[1:]))


def test_proximity_bump_range(small_suite):
    hand = small_suite[0].scene.hand_sdf
    w = proximity_bump(hand, 0.4)
    assert w.min() >= 0.0 and w.max() <= 1.0
    assert np.all(w[hand.values <= 0.0] == 1.0)
    assert np.all(w[hand.values >= 0.4] == 0.0)
    with pytest.raises(ValueError):
        proximity_bump(hand, 0.0)


def test_distractor_only_inflates(small_suite):
    e = small_suite[0]
    dis = make_distractor(e.scene.object_sdf, e.scene.hand_sdf, 0.1, 0.4)
    assert np.all(dis.values <= e.scene.object_sdf.values + 1e-15)
    far = e.scene.hand_sdf.values >= 0.4
    assert np.array_equal(dis.values[far], e.scene.object_sdf.values[far])


def test_mask_mismatch_zero_for_truth(small_suite):
    e = small_suite[0]
    assert mask_mismatch(e.true_grid, e.scene.hand_sdf, e.vis_gt) == 0.0


def test_noise_scaling_coupled(small_suite):
    e = small_suite[0]
    p0 = e.scene.contacts.points
    d3 = noisy_contacts(e, 3.0).points - p0
    d5 = noisy_contacts(e, 5.0).points - p0
    assert np.allclose(d5, d3 * (5.0 / 3.0), atol=1e-12)
    assert np.array_equal(noisy_contacts(e, 0.0).points, p0)


def test_raster_invariant_at_3mm_default_resolution():
    # at the default suite resolution the 3mm radius is under half a cell
    suite = build_suite(n_scenes=1)
    e = suite[0]
    R = e.true_grid.resolution
    C0 = build_touch_tensor(e.scene.contacts, R).C
    C3 = build_touch_tensor(noisy_contacts(e, 3.0), R).C
    assert np.array_equal(C0, C3)


def test_evidence_fn_needs_contact_grid(small_suite):
    e = small_suite[0]
    with pytest.raises(ValueError, match="contact"):
        evidence_fn(e.codec, e.scene, e.vis_gt, "full", e.tau)
    with pytest.raises(ValueError, match="cond_mode"):
        evidence_fn(e.codec, e.scene, e.vis_gt, "nope", e.tau)


def test_conditioning_weights(small_suite):
    for e in small_suite:
        w_vo = conditioned_library(e, "vision-only").weights
        w_nt = conditioned_library(e, "no-touch").weights
        for w in (w_vo, w_nt):
            assert w.shape == (len(e.rung_grids),)
            assert abs(w.sum() - 1.0) < 1e-12 and w.min() >= 0.0
        # penetration evidence is zero only at the true rung, so it can
        # only promote it
        assert w_nt[0] >= w_vo[0] - 1e-12


def test_run_entry_rejects_unknown_guidance(small_suite):
    with pytest.raises(ValueError, match="guidance"):
        run_entry(small_suite[0], "full", "both", ABLATION_SAMPLER, seed=0)


def test_run_entry_deterministic(small_suite):
    e = small_suite[0]
    _, g1, _ = run_entry(e, "no-touch", "ni-only", ABLATION_SAMPLER, seed=4)
    _, g2, _ = run_entry(e, "no-touch", "ni-only", ABLATION_SAMPLER, seed=4)
    assert np.array_equal(g1.values, g2.values)
    ni, c = final_losses(e, g1)
    assert ni >= 0.0 and c >= 0.0


def test_ablation_run_repeatable(small_suite):
    a = ablation_run(small_suite, "vision-only")
    b = ablation_run(small_suite, "vision-only")
    assert a == b
    assert a["mode"] == "vision-only" and len(a["per_scene"]) == 2


def test_energy_tail():
    assert energy_tail_nonincreasing([3.0, 2.0, 1.0, 1.0])
    assert not energy_tail_nonincreasing([3, 2, 1, 1, 1, 1, 1, 2])
    assert energy_tail_nonincreasing([5.0])
    assert energy_tail_nonincreasing([])


def test_selftest_subset_and_format():
    rows = selftest(names=["flow-identities", "emd-bruteforce"])
    assert [r[0] for r in rows] == ["flow-identities", "emd-bruteforce"]
    assert all(ok for _, ok, _, _ in rows)
    text = format_selftest(rows)
    assert "PASS" in text and "2/2" in text


def test_selftest_unknown_name():
    with pytest.raises(ValueError):
        selftest(names=["not-a-check"])
