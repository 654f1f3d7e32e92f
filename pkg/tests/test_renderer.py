import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialforge import phantom as ph
from trialforge import renderer as rd
from trialforge.errors import RenderError
from trialforge.voxgrid import HUVolume, LabelVolume, Spacing


@pytest.fixture(scope="module")
def composed(cohort):
    p = cohort[0]
    v = np.array(p.anatomy.voxels)
    for m in p.nodule_masks:
        v[m.voxels != 0] = ph.NODULE
    return LabelVolume(v, p.spacing)


def test_zero_noise_piecewise_constant(composed):
    params = rd.RenderParams({k: (m, 0.0) for k, (m, _) in rd.DEFAULT_HU_TABLE.items()})
    hu = rd.render(composed, params).voxels
    for lab in np.unique(composed.voxels):
        vals = np.unique(hu[composed.voxels == lab])
        assert vals.tolist() == [int(rd.DEFAULT_HU_TABLE[int(lab)][0])]


def test_same_seed_identical(composed):
    a = rd.render(composed, seed=3)
    assert a == rd.render(composed, seed=3)
    assert a != rd.render(composed, seed=4)
    assert a.voxels.dtype == np.int16


def test_nodule_roi_mean_in_band(composed):
    hu = rd.render(composed).voxels
    roi = hu[composed.voxels == ph.NODULE]
    assert roi.size > 0
    assert -700.0 <= roi.mean() <= -500.0


def test_noise_keyed_by_voxel(composed):
    """Editing labels in one place leaves every other voxel's value unchanged."""
    v = np.array(composed.voxels)
    v[:4, :4, :4] = ph.BODY
    a = rd.render(composed, seed=1).voxels
    b = rd.render(LabelVolume(v, composed.spacing), seed=1).voxels
    same = np.ones(v.shape, bool)
    same[:4, :4, :4] = False
    assert np.array_equal(a[same], b[same])


def test_unknown_label_and_bad_params(composed):
    v = np.array(composed.voxels)
    v[0, 0, 0] = 200
    with pytest.raises(RenderError):
        rd.render(LabelVolume(v, composed.spacing))
    with pytest.raises(RenderError):
        rd.RenderParams({1: (5000.0, 1.0)})
    with pytest.raises(RenderError):
        rd.RenderParams({1: (0.0, -1.0)})


def test_clipped_to_hu_range():
    lab = LabelVolume(np.full((8, 8, 8), 1, np.uint8), Spacing.iso(1.0))
    hu = rd.render(lab, rd.RenderParams({1: (3000.0, 500.0)})).voxels
    assert hu.max() <= 3071 and hu.min() >= -1024


def test_qc(composed, cohort):
    assert rd.qc_check(composed)
    erased = np.array(composed.voxels)
    erased[erased == ph.NODULE] = ph.RUL
    r = rd.qc_check(LabelVolume(erased, composed.spacing))
    assert not r and r.reason == "empty_label_23"
    host_only = cohort[1].anatomy
    assert not rd.qc_check(host_only)
    assert rd.qc_check(host_only, lesion_free=True)
    no_lobe = np.array(composed.voxels)
    no_lobe[no_lobe == ph.RML] = ph.BODY
    assert rd.qc_check(LabelVolume(no_lobe, composed.spacing)).reason.startswith("missing_lobes")


def test_lesion_free_manifest_path(profiles, hosts, cohort):
    """A prevalence-zero manifest yields host-only volumes that pass QC only through the flag."""
    from trialforge import trialengine as te

    m = te.build(te.TrialSpec(n=3, pi=0.0), profiles, hosts)
    pmap = {p.patient_id: p for p in cohort}
    for row in m.rows:
        anat = pmap[row.host_patient].anatomy
        assert rd.qc_check(anat).reason == "empty_label_23"
        assert rd.qc_check(anat, lesion_free=True)


def test_window_values():
    assert rd.window(-600.0) == 0.5
    assert rd.window(-1350.0) == 0.0
    assert rd.window(150.0) == 1.0
    assert rd.window(-5000.0) == 0.0 and rd.window(4000.0) == 1.0


@given(st.lists(st.floats(-3000, 4000), min_size=2, max_size=30))
@settings(max_examples=100, deadline=None)
def test_window_monotone_idempotent(xs):
    xs = sorted(xs)
    w = rd.window(xs)
    assert np.all(np.diff(w) >= 0)
    # already clipped values map to themselves under the unit window
    assert np.allclose(rd.window(w, width=1.0, level=0.5), w)


def test_extract_slices_and_clamp():
    v = np.arange(6 * 5 * 4, dtype=np.int16).reshape(6, 5, 4) - 600
    hu = HUVolume(v, Spacing.iso(2.0))
    pack = rd.extract_slices(hu, (4.0, 2.0, 4.0))
    assert pack.index == (2, 1, 2) and not pack.clamped
    assert np.allclose(pack.axial[1], rd.window(v[:, :, 2]))
    assert np.allclose(pack.axial[0], rd.window(v[:, :, 1]))
    assert np.allclose(pack.coronal, rd.window(v[:, 1, :]))
    assert np.allclose(pack.sagittal, rd.window(v[2, :, :]))
    edge = rd.extract_slices(hu, (0.0, 0.0, 0.0))
    assert edge.clamped
    assert np.allclose(edge.axial[1], rd.window(v[:, :, 1]))
    with pytest.raises(RenderError):
        rd.extract_slices(hu, (100.0, 0.0, 0.0))


def test_body_recovery(composed):
    hu = rd.render(composed)
    assert rd.body_recovery(hu, composed) >= 0.95


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((7, 5))
    rd.write_pgm(img, tmp_path / "a.pgm")
    back = rd.read_pgm(tmp_path / "a.pgm")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-12
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n65535\n")
    # payload bytes that look like whitespace must survive the header parse
    edge = np.full((3, 2), 0x0A0A / 65535.0)
    rd.write_pgm(edge, tmp_path / "b.pgm")
    assert np.allclose(rd.read_pgm(tmp_path / "b.pgm"), edge)


def test_write_slices_names(tmp_path):
    hu = HUVolume(np.zeros((4, 4, 4), np.int16), Spacing.iso(1.0))
    paths = rd.write_slices(rd.extract_slices(hu, (1, 1, 1)), tmp_path, "r0007")
    assert sorted(p.name for p in paths) == sorted(
        f"r0007_{k}.pgm" for k in ("axial_prev", "axial", "axial_next", "coronal", "sagittal"))
