import numpy as np
import pytest

from probcell import (
    CoordSet,
    NmsConfig,
    SynthSpec,
    detect_peaks,
    generate_coords,
    generate_structures,
    hungarian_match,
    oracle_regress,
    render_dm,
    score_detection,
)
from probcell.errors import EmptyStructure, PackingInfeasible
from probcell.spatial import distance_transform
from probcell.synth import replace


class TestGenerateCoords:
    def test_zero_count_empty(self):
        spec = SynthSpec(shape=(16, 16, 16), n_cells=0)
        assert len(generate_coords(spec)) == 0

    def test_min_separation_holds(self):
        spec = SynthSpec(shape=(128, 128, 128), n_cells=50, min_separation_um=8.0, seed=4)
        coords = generate_coords(spec).coords
        assert len(coords) == 50
        diffs = coords[:, None, :] - coords[None, :, :]
        dist = np.linalg.norm(diffs, axis=2)
        dist[np.diag_indices(50)] = np.inf
        assert dist.min() >= 8.0

    def test_same_seed_identical(self):
        spec = SynthSpec(shape=(48, 48, 48), n_cells=20, seed=9)
        a = generate_coords(spec).coords
        b = generate_coords(spec).coords
        assert np.array_equal(a, b)

    def test_infeasible_packing_raises(self):
        spec = SynthSpec(shape=(8, 8, 8), n_cells=100, min_separation_um=8.0)
        with pytest.raises(PackingInfeasible):
            generate_coords(spec)


class TestOracleRegress:
    def test_zero_noise_no_distractors_equals_gt(self):
        spec = SynthSpec(shape=(32, 32, 32), n_cells=8, noise_sd=0.0, n_distractors=0, seed=2)
        coords = generate_coords(spec)
        ro = oracle_regress(coords, spec)
        gt = render_dm(coords, spec.shape, spec.voxel_size, spec.kernel())
        assert np.array_equal(ro.dm.data, gt.data)
        assert not ro.epistemic.data.any()

    def test_noise_adds_proposals_without_losing_cells(self):
        spec = SynthSpec(
            shape=(48, 48, 48), n_cells=10, noise_sd=0.05, n_distractors=0,
            margin_um=6.0, seed=5,
        )
        coords = generate_coords(spec)
        ro = oracle_regress(coords, spec)
        peaks = detect_peaks(ro.dm, NmsConfig(4.0, 0.0))
        assert len(peaks) >= len(coords)
        report = score_detection(coords, CoordSet(peaks.coords), 4.0)
        assert report.recall == 1.0

    def test_aleatoric_is_the_noise_amplitude_field(self):
        base = SynthSpec(shape=(24, 24, 24), n_cells=5, noise_sd=0.04, seed=11)
        doubled = replace(base, noise_sd=0.08)
        ua1 = oracle_regress(generate_coords(base), base).aleatoric.data
        ua2 = oracle_regress(generate_coords(doubled), doubled).aleatoric.data
        assert np.allclose(ua2, 2.0 * ua1)
        lo, hi = base.amp_field_range
        assert ua1.min() >= lo * base.noise_sd - 1e-6
        assert ua1.max() <= hi * base.noise_sd + 1e-6

    def test_determinism_and_epistemic_at_distractors(self):
        spec = SynthSpec(
            shape=(48, 48, 48), n_cells=6, n_distractors=6, noise_sd=0.02,
            distractor_amp_range=(0.3, 0.9), margin_um=6.0, seed=13,
        )
        coords = generate_coords(spec)
        a = oracle_regress(coords, spec)
        b = oracle_regress(coords, spec)
        assert np.array_equal(a.dm.data, b.dm.data)
        assert np.array_equal(a.epistemic.data, b.epistemic.data)
        # epistemic is elevated where the two draws disagree (distractors)
        peaks = detect_peaks(a.dm, NmsConfig(4.0, 0.0))
        labels = np.zeros(len(peaks), dtype=bool)
        for _, pj, d in hungarian_match(coords, peaks):
            if d <= 4.0:
                labels[pj] = True
        ue = a.epistemic
        vals = []
        for i, c in enumerate(peaks.coords):
            idx = tuple(np.floor(c).astype(int))
            vals.append(ue.data[idx])
        vals = np.asarray(vals)
        if labels.any() and (~labels).any():
            assert vals[~labels].mean() > vals[labels].mean()


class TestGenerateStructures:
    def test_zero_tubes_empty_structure(self):
        spec = SynthSpec(shape=(24, 24, 24), n_cells=0, n_tubes=0)
        structure, tissue = generate_structures(spec)
        assert not structure.data.any()
        with pytest.raises(EmptyStructure):
            distance_transform(structure)

    def test_structure_inside_tissue_and_tissue_is_ellipsoid(self):
        spec = SynthSpec(shape=(32, 32, 32), n_cells=0, n_tubes=2, tube_radius_um=3.0, seed=3)
        structure, tissue = generate_structures(spec)
        assert structure.data.sum() > 0
        assert not (structure.data.astype(bool) & ~tissue.data.astype(bool)).any()
        centers = (np.arange(32) + 0.5 - 16.0) / 16.0
        zz, yy, xx = np.meshgrid(centers, centers, centers, indexing="ij")
        inside = zz**2 + yy**2 + xx**2 <= 1.0
        assert np.array_equal(tissue.data.astype(bool), inside)

    def test_tube_radius_controls_thickness(self):
        thin = SynthSpec(shape=(40, 40, 40), n_cells=0, n_tubes=1, tube_radius_um=2.0, seed=6)
        thick = replace(thin, tube_radius_um=5.0)
        s_thin, _ = generate_structures(thin)
        s_thick, _ = generate_structures(thick)
        assert s_thick.data.sum() > s_thin.data.sum()

    def test_same_seed_identical(self):
        spec = SynthSpec(shape=(24, 24, 24), n_cells=0, n_tubes=1, seed=8)
        a, _ = generate_structures(spec)
        b, _ = generate_structures(spec)
        assert np.array_equal(a.data, b.data)


class TestFidelityKnob:
    def test_f1_improves_as_noise_vanishes(self):
        medians = []
        for noise in (0.25, 0.08, 0.0):
            f1s = []
            for seed in range(5):
                spec = SynthSpec(
                    shape=(40, 40, 40), n_cells=8, noise_sd=noise,
                    n_distractors=0, margin_um=6.0, seed=100 + seed,
                )
                coords = generate_coords(spec)
                ro = oracle_regress(coords, spec)
                peaks = detect_peaks(ro.dm, NmsConfig(4.0, 0.0))
                f1s.append(score_detection(coords, CoordSet(peaks.coords), 4.0).f1)
            medians.append(float(np.median(f1s)))
        assert medians[2] == 1.0
        assert medians[0] <= medians[1] <= medians[2]
