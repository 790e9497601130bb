import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msls.enclosure import (
    AcmParameters,
    Direction,
    EnclosureConfig,
    EnclosureGenerationError,
    EnclosureModel,
    acm_response,
    bandpass_magnitude,
    coherence,
    coherence_matrix,
    direction_response,
    enclosure_from_dict,
    enclosure_to_dict,
    generate_enclosure,
    helmholtz_frequency,
    load_enclosure,
    max_off_diagonal,
    probe_responses,
    save_enclosure,
    speaker_layout,
    stage_parameters,
)
from msls.spectra import GridMismatchError, MagnitudeSpectrum, StftConfig

from oracles import helmholtz_hz

GRID = StftConfig()
P = GRID.n_bins


def spec(v, grid=GRID.grid_id):
    return MagnitudeSpectrum(np.asarray(v, dtype=float), grid)


def acm(**over):
    base = dict(
        sector_id=0,
        cavity_volumes=(1e-3, 5e-4),
        layer_hole_area=(math.pi * 1e-4, 2e-4, 1e-4),
        layer_neck_length=(0.007 + 1.7 * 0.01, 0.012, 0.006),
        fill_ratios=(0.2, 0.3, 0.4),
    )
    base.update(over)
    return AcmParameters(**base)


class TestHelmholtz:
    def test_reference_value(self):
        f = helmholtz_frequency(math.pi * 0.01**2, 1e-3, 0.007 + 1.7 * 0.01)
        assert f == pytest.approx(197.5, abs=0.1)
        assert f == pytest.approx(helmholtz_hz(math.pi * 0.01**2, 1e-3, 0.024), rel=1e-12)

    @pytest.mark.parametrize("args", [(0, 1e-3, 0.01), (1e-4, -1, 0.01), (1e-4, 1e-3, 0)])
    def test_non_positive_geometry(self, args):
        with pytest.raises(ValueError):
            helmholtz_frequency(*args)

    def test_bandpass_peak_and_symmetry(self):
        f0, q = 1000.0, 5.0
        f = np.array([f0, f0 / 2, f0 * 2])
        h = bandpass_magnitude(f, f0, q)
        assert h[0] == pytest.approx(1.0)
        # log-symmetric around the resonance
        assert h[1] == pytest.approx(h[2])
        assert h[1] == pytest.approx(1 / math.sqrt(1 + (q * 1.5) ** 2))

    def test_stage_q_law(self):
        stages = stage_parameters(acm(), q0=4.0)
        assert [q for _, q in stages] == pytest.approx([4 / 0.2, 4 / 0.3])
        assert stages[0][0] == pytest.approx(helmholtz_hz(math.pi * 1e-4, 1e-3, 0.024))


class TestAcmResponse:
    def test_bounded_and_deterministic(self):
        a = acm_response(acm(), GRID)
        b = acm_response(acm(), GRID)
        assert a == b
        assert a.values.min() >= 0.05 and a.values.max() <= 1.0

    @given(
        st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.floats(1e-5, 1e-2),
        st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.2),
    )
    def test_clipping_contract(self, v0, v1, area, fill0, fill1, floor):
        a = acm(cavity_volumes=(v0, v1), layer_hole_area=(area, area, area), fill_ratios=(fill0, fill1, 0.5))
        h = acm_response(a, GRID, floor=floor).values
        assert np.all(h >= floor) and np.all(h <= 1.0)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            acm(cavity_volumes=(0.0, 1e-3))
        with pytest.raises(ValueError):
            acm(fill_ratios=(0.0, 0.2, 0.2))


class TestCoherence:
    def test_examples(self):
        g = "16000/1024/10-11"
        assert coherence(spec([1, 1], g), spec([1, 1], g)) == pytest.approx(1.0)
        assert coherence(spec([1, 0], g), spec([0, 1], g)) == 0.0
        assert coherence(spec([1, 1], g), spec([1, 0], g)) == pytest.approx(1 / math.sqrt(2), abs=1e-5)

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="undefined coherence"):
            coherence(spec(np.zeros(P)), spec(np.ones(P)))

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            coherence(spec(np.ones(P)), spec(np.ones(P), "16000/1024/8-321"))

    @given(
        arrays(np.float64, P, elements=st.floats(0.01, 10)),
        arrays(np.float64, P, elements=st.floats(0.01, 10)),
        st.floats(1e-3, 1e3),
    )
    def test_properties(self, a, b, alpha):
        x, y = spec(a), spec(b)
        assert coherence(x, x) == pytest.approx(1.0, abs=1e-12)
        assert coherence(x, y) == pytest.approx(coherence(y, x), abs=1e-15)
        assert coherence(spec(alpha * a), y) == pytest.approx(coherence(x, y), abs=1e-12)
        assert 0.0 <= coherence(x, y) <= 1.0 + 1e-12

    def test_matrix(self, rng):
        rs = [spec(rng.random(P) + 0.01) for _ in range(5)]
        mu = coherence_matrix(rs)
        assert np.array_equal(np.diag(mu), np.ones(5))
        assert np.array_equal(mu, mu.T)
        assert mu[1, 3] == pytest.approx(coherence(rs[1], rs[3]), abs=1e-14)
        with pytest.raises(ValueError):
            coherence_matrix(rs[:1])


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs, field",
        [
            (dict(shell_radii=(-0.24, 0.168, 0.072)), "shell_radii"),
            (dict(shell_radii=(0.1, 0.168, 0.072)), "shell_radii"),
            (dict(hole_radius_range=(0.001, 0.03)), "hole_radius_range"),
            (dict(hole_radius_range=(0.003, 0.2)), "hole_radius_range"),
            (dict(n_transverse_plates=0), "plate"),
            (dict(max_coherence_target=0.0), "max_coherence_target"),
            (dict(q0=-1), "q0"),
        ],
    )
    def test_invalid(self, kwargs, field):
        with pytest.raises(ValueError, match=field):
            EnclosureConfig(**kwargs)

    def test_default_sector_count(self):
        assert EnclosureConfig().n_sectors == 24


class TestLayout:
    def test_two_rings_of_eight(self):
        dirs = speaker_layout()
        assert len(dirs) == 16
        assert {d.distance for d in dirs[:8]} == {2.5}
        assert all(d.elevation == 0 for d in dirs[:8])
        assert all(11 < d.elevation < 13 for d in dirs[8:])
        assert dirs[8].distance == pytest.approx(math.hypot(4.5, 0.95))

    @pytest.mark.parametrize("kwargs", [dict(azimuth=360.0, elevation=0), dict(azimuth=0, elevation=91),
                                        dict(azimuth=0, elevation=0, distance=0)])
    def test_direction_ranges(self, kwargs):
        with pytest.raises(ValueError):
            Direction(**kwargs)


class TestGeneratedModel:
    def test_default_model(self, enclosure):
        assert len(enclosure.sectors) == 24
        assert enclosure.achieved_coherence <= 0.95
        mu = coherence_matrix(probe_responses(enclosure))
        assert max_off_diagonal(mu) == pytest.approx(enclosure.achieved_coherence)

    def test_deterministic(self, enclosure):
        again = generate_enclosure(EnclosureConfig(seed=0))
        assert again == enclosure
        assert generate_enclosure(EnclosureConfig(seed=1)) != enclosure

    def test_neck_at_least_shell_thickness(self, enclosure):
        t = enclosure.config.shell_thickness
        for s in enclosure.sectors:
            assert all(n >= th for n, th in zip(s.layer_neck_length, t))
            assert min(s.cavity_volumes) > 0 and min(s.layer_hole_area) > 0

    def test_partition_exhaustive(self, enclosure):
        part = enclosure.partition
        rng = np.random.default_rng(3)
        az = rng.uniform(0, 360, 10_000)
        el = np.degrees(np.arcsin(rng.uniform(0, 1, 10_000)))
        counts = np.zeros(part.n_sectors, dtype=int)
        for a, e in zip(az, el):
            s = part.locate(a, e)
            start, width, e0, e1 = part.sector_extent(s)
            assert (a - start) % 360.0 < width
            assert e0 <= e < e1 or (e == 90.0 and e1 == 90.0)
            counts[s] += 1
        assert counts.min() > 0
        total = sum(part.sector_solid_angle(s) for s in range(part.n_sectors))
        assert total == pytest.approx(2 * math.pi)

    def test_responses_bounded(self, enclosure):
        for h in probe_responses(enclosure):
            assert h.values.min() >= 0.05 and h.values.max() <= 1.0

    def test_same_sector_same_response(self, enclosure):
        part = enclosure.partition
        start, width, e0, e1 = part.sector_extent(3)
        a = Direction((start + 0.3 * width) % 360, e0 + 0.2 * (e1 - e0))
        b = Direction((start + 0.6 * width) % 360, e0 + 0.7 * (e1 - e0), distance=4.0)
        assert direction_response(enclosure, a) == direction_response(enclosure, b)

    def test_blend_on_boundary(self):
        model = generate_enclosure(EnclosureConfig(seed=0, blend=True))
        plain = EnclosureModel(replace(model.config, blend=False), model.sectors, model.partition, model.directions)
        part = model.partition
        start, width, e0, e1 = part.sector_extent(5)
        el = 0.5 * (e0 + e1)
        edge = Direction((start + width) % 360, el)
        s = part.locate(edge.azimuth, edge.elevation)
        assert s != 5
        h_s = direction_response(plain, edge).values
        h_o = direction_response(plain, Direction((start + 0.5 * width) % 360, el)).values
        h = direction_response(model, edge).values
        assert np.allclose(h, 0.5 * h_s + 0.5 * h_o, rtol=1e-12, atol=0)
        # at a wedge centre the blend weight vanishes
        centre = Direction((start + 0.5 * width) % 360, el)
        assert np.allclose(direction_response(model, centre).values, direction_response(plain, centre).values,
                           rtol=1e-9, atol=0)

    def test_retry_budget_exhausted(self):
        with pytest.raises(EnclosureGenerationError) as err:
            generate_enclosure(EnclosureConfig(seed=0, max_coherence_target=0.2, max_retries=2))
        assert err.value.attempts == 3
        assert err.value.best_coherence > 0.2

    def test_round_trip(self, enclosure, tmp_path):
        save_enclosure(enclosure, tmp_path / "e.json")
        loaded = load_enclosure(tmp_path / "e.json")
        assert loaded == enclosure
        assert enclosure_to_dict(enclosure_from_dict(enclosure_to_dict(enclosure))) == enclosure_to_dict(enclosure)
        for a, b in zip(probe_responses(loaded), probe_responses(enclosure)):
            assert a == b
