import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msls.dictionary import ColumnMeta, MeasurementMatrix, column_spectrum
from msls.recovery import (
    ObjectVector,
    VoteResult,
    fit_vspca,
    load_vspca,
    majority_vote,
    omp,
    reconstruct_sources,
    recover_frame,
    save_vspca,
    transform_dictionary,
    vspca_transform,
)
from msls.spectra import GridMismatchError, MagnitudeSpectrum, mix_ideal

from oracles import brute_force_supports, eig_pca, exact_recovery_condition, reference_omp


def ov(support, weights=None):
    weights = weights or [1.0] * len(support)
    return ObjectVector(tuple(support), tuple(weights), 0.0)


@st.composite
def omp_instance(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    d = draw(st.integers(2, 20))
    q = draw(st.integers(1, 25))
    k = draw(st.integers(1, q))
    atoms = rng.standard_normal((d, q))
    if draw(st.booleans()):
        atoms[:, rng.integers(q)] = 0.0
        if not atoms.any():
            atoms[0, 0] = 1.0
    y = rng.standard_normal(d) if draw(st.booleans()) else atoms @ (rng.standard_normal(q) * (rng.random(q) < 0.3))
    return atoms, y, k


class TestVspca:
    def test_basis_contract(self, street_dictionary, street_vspca):
        b = street_vspca.basis
        assert np.allclose(b @ b.T, np.eye(street_vspca.retained_dim), atol=1e-10)
        assert street_vspca.retained_dim <= min(street_dictionary.shape)
        assert street_vspca.retained_variance >= 0.99
        peaks = b[np.arange(len(b)), np.argmax(np.abs(b), axis=1)]
        assert np.all(peaks > 0)
        assert np.allclose(street_vspca.mean, street_dictionary.data.mean(axis=1), rtol=1e-14)

    def test_minimal_dimension(self, street_dictionary):
        full = fit_vspca(street_dictionary, 1.0)
        for thr in (0.5, 0.9, 0.99):
            m = fit_vspca(street_dictionary, thr)
            assert m.retained_variance >= thr
            if m.retained_dim > 1:
                fewer = np.sum(np.linalg.norm(full.basis[: m.retained_dim - 1] @ (
                    street_dictionary.data - full.mean[:, None]), axis=1) ** 2)
                total = np.sum((street_dictionary.data - full.mean[:, None]) ** 2)
                assert fewer / total < thr

    def test_eigen_oracle(self):
        rng = np.random.default_rng(4)
        data = rng.random((5, 8))
        model = fit_vspca(data, 1.0)
        s_ref, comps = eig_pca(data)
        _, s, _ = np.linalg.svd(data - data.mean(axis=1, keepdims=True))
        assert np.allclose(s[: len(s_ref)], s_ref, rtol=1e-9)
        assert model.retained_dim == len(s_ref) == 5
        for row, ref in zip(model.basis, comps):
            assert abs(abs(row @ ref) - 1.0) < 1e-9

    def test_full_threshold_preserves_geometry(self, rng):
        data = rng.random((40, 12))
        model = fit_vspca(data, 1.0)
        c = data - data.mean(axis=1, keepdims=True)
        t = transform_dictionary(model, data)
        assert np.allclose(t.T @ t, c.T @ c, rtol=1e-9, atol=1e-9 * np.abs(c.T @ c).max())

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="degenerate dictionary"):
            fit_vspca(np.ones((4, 2)), 0.9)
        for thr in (0.0, 1.2):
            with pytest.raises(ValueError):
                fit_vspca(rng.random((4, 3)), thr)
        with pytest.raises(ValueError):
            fit_vspca(rng.random((4, 1)), 0.9)
        model = fit_vspca(rng.random((4, 3)), 1.0)
        with pytest.raises(ValueError):
            vspca_transform(model, np.ones(5), 1)
        with pytest.raises(ValueError):
            vspca_transform(model, np.ones(4), 0)

    def test_transform_examples(self, street_dictionary, street_vspca):
        a = street_dictionary.data
        m = street_vspca
        assert np.allclose(vspca_transform(m, a[:, 5], 1), m.basis @ (a[:, 5] - m.mean), rtol=1e-15)
        pair = vspca_transform(m, a[:, 5] + a[:, 40], 2)
        mean = 0.5 * (vspca_transform(m, a[:, 5], 1) + vspca_transform(m, a[:, 40], 1))
        assert np.allclose(pair, mean, rtol=1e-12, atol=1e-12 * np.abs(mean).max())
        for k in (1, 3):
            assert np.allclose(vspca_transform(m, m.mean * k, k), 0.0, atol=1e-15)

    def test_grid_checked(self, street_dictionary, street_vspca):
        wrong = MagnitudeSpectrum(np.ones(314), "16000/1024/8-321")
        with pytest.raises(GridMismatchError):
            vspca_transform(street_vspca, wrong, 1)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_linearity_property(self, seed, k):
        rng = np.random.default_rng(seed)
        data = rng.random((30, 10)) * rng.uniform(0.1, 10)
        model = fit_vspca(data, 0.95)
        s = rng.choice(10, k, replace=False)
        got = vspca_transform(model, data[:, s].sum(axis=1), k)
        want = np.mean([vspca_transform(model, data[:, i], 1) for i in s], axis=0)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(want).max()))

    def test_round_trip(self, street_vspca, tmp_path):
        save_vspca(street_vspca, tmp_path / "v.json")
        loaded = load_vspca(tmp_path / "v.json")
        assert loaded == street_vspca
        assert loaded.basis.tobytes() == street_vspca.basis.tobytes()


class TestOmp:
    def test_identity(self):
        res = omp(np.eye(4), 3.0 * np.eye(4)[2], 1)
        assert res.support == (2,)
        assert res.weights == pytest.approx((3.0,))
        assert res.residual_norm == pytest.approx(0.0)

    def test_zero_observation(self):
        res = omp(np.eye(4), np.zeros(4), 2)
        assert res.support == () and res.residual_norm == 0.0

    def test_two_sparse_against_enumeration(self):
        rng = np.random.default_rng(2025)
        atoms = rng.standard_normal((8, 12))
        # this draw satisfies the exact recovery condition for {3, 7}
        assert exact_recovery_condition(atoms, (3, 7)) < 1.0
        y = 2 * atoms[:, 3] + atoms[:, 7]
        res = omp(atoms, y, 2)
        assert sorted(res.support) == [3, 7]
        w = dict(zip(res.support, res.weights))
        assert w[3] == pytest.approx(2.0, abs=1e-8) and w[7] == pytest.approx(1.0, abs=1e-8)
        ranked = brute_force_supports(atoms, y, 2)
        assert len(ranked) == 66
        assert ranked[0][1] == (3, 7)

    def test_errors(self):
        with pytest.raises(ValueError):
            omp(np.zeros((3, 3)), np.ones(3), 1)
        with pytest.raises(ValueError):
            omp(np.eye(3), np.ones(3), 4)
        with pytest.raises(ValueError):
            omp(np.eye(3), np.ones(4), 1)

    def test_zero_atoms_are_skipped(self):
        atoms = np.eye(3)
        atoms[:, 1] = 0.0
        res = omp(atoms, np.ones(3), 3)
        assert 1 not in res.support
        assert len(res.support) == 2

    @given(omp_instance())
    def test_invariants(self, inst):
        atoms, y, k = inst
        res = omp(atoms, y, k)
        assert len(res.support) <= k
        assert len(set(res.support)) == len(res.support)
        assert all(np.isfinite(res.weights))
        h = np.asarray(res.history)
        assert np.all(np.diff(h) <= 1e-12 * max(1.0, h[0]))
        if res.support:
            sub = atoms[:, list(res.support)]
            r = y - sub @ np.asarray(res.weights)
            assert np.linalg.norm(r) == pytest.approx(res.residual_norm, abs=1e-9 * max(1.0, np.linalg.norm(y)))
            for q in res.support:
                bound = 1e-8 * max(np.linalg.norm(r), 1e-12) * np.linalg.norm(atoms[:, q])
                assert abs(r @ atoms[:, q]) <= max(bound, 1e-10 * np.linalg.norm(y) * np.linalg.norm(atoms[:, q]))

    def test_matches_reference_pursuit(self):
        for i in range(300):
            rng = np.random.default_rng([11, i])
            d, q = int(rng.integers(4, 20)), int(rng.integers(5, 30))
            k = int(rng.integers(1, min(d, q) + 1))
            atoms = rng.standard_normal((d, q))
            y = rng.standard_normal(d)
            assert list(omp(atoms, y, k).support) == reference_omp(atoms, y, k)

    def test_matches_enumeration_when_recovery_is_guaranteed(self):
        checked = 0
        for i in range(400):
            rng = np.random.default_rng([13, i])
            d, q, k = int(rng.integers(8, 17)), int(rng.integers(10, 15)), int(rng.integers(1, 3))
            atoms = rng.standard_normal((d, q))
            s = tuple(sorted(rng.choice(q, k, replace=False)))
            if exact_recovery_condition(atoms, s) >= 1.0:
                continue
            y = atoms[:, s] @ (rng.uniform(1, 2, k) * rng.choice([-1, 1], k))
            best = brute_force_supports(atoms, y, k)[0][1]
            assert best == s
            assert tuple(sorted(omp(atoms, y, k).support)) == best
            checked += 1
        assert checked > 100


class TestRecoverFrame:
    def test_every_column_alone(self, street_dictionary, street_vspca):
        atoms = transform_dictionary(street_vspca, street_dictionary)
        for i in range(street_dictionary.shape[1]):
            res = recover_frame(street_dictionary, street_vspca, column_spectrum(street_dictionary, i), 1, atoms=atoms)
            assert res.support == (i,)

    def test_oversized_k(self, street_dictionary, street_vspca):
        frame = column_spectrum(street_dictionary, 17)
        res = recover_frame(street_dictionary, street_vspca, frame, 3)
        assert 17 in res.support

    def test_grid_mismatch(self, street_dictionary, street_vspca):
        with pytest.raises(GridMismatchError):
            recover_frame(street_dictionary, street_vspca, MagnitudeSpectrum(np.ones(314), "16000/1024/8-321"), 1)

    def test_exact_pairs_on_street_dictionary(self, street_dictionary, street_vspca):
        atoms = transform_dictionary(street_vspca, street_dictionary)
        pairs = list(itertools.combinations(range(street_dictionary.shape[1]), 2))
        hits = 0
        for i, j in pairs:
            y = mix_ideal([(column_spectrum(street_dictionary, i), 1.0), (column_spectrum(street_dictionary, j), 1.0)])
            hits += set(recover_frame(street_dictionary, street_vspca, y, 2, atoms=atoms).support) == {i, j}
        rate = hits / len(pairs)
        print(f"exact two-column recovery: {rate:.4f} of {len(pairs)} pairs")
        assert rate >= 0.99


class TestVoting:
    def test_plurality(self):
        frames = [ov([3, 7])] * 8 + [ov([3, 5])] * 2
        v = majority_vote(frames, 2)
        assert v.per_index_votes == {3: 10, 7: 8, 5: 2}
        assert set(v.final_support) == {3, 7}
        assert v.frames_used == 10

    def test_tie_lower_index(self):
        v = majority_vote([ov([7])] * 5 + [ov([3])] * 5, 1)
        assert v.final_support == (3,)

    def test_tie_weight_first(self):
        v = majority_vote([ov([3], [1.0]), ov([7], [-2.0])], 1)
        assert v.final_support == (7,)

    def test_single_frame(self):
        assert majority_vote([ov([4])], 1).final_support == (4,)

    def test_empty(self):
        with pytest.raises(ValueError):
            majority_vote([], 1)

    @given(st.lists(st.lists(st.integers(0, 9), max_size=3, unique=True), min_size=1, max_size=30),
           st.integers(1, 3), st.permutations(range(30)))
    def test_invariants(self, supports, k, perm):
        frames = [ov(s) for s in supports]
        v = majority_vote(frames, k)
        assert set(v.final_support) <= set(v.per_index_votes)
        assert len(v.final_support) <= k
        assert sum(v.per_index_votes.values()) <= len(frames) * 3
        shuffled = [frames[i] for i in perm if i < len(frames)]
        assert majority_vote(shuffled, k).final_support == v.final_support


class TestReconstruct:
    def meta(self):
        cols = [ColumnMeta(i, i // 2, i % 2) for i in range(4)]
        return MeasurementMatrix(np.ones((2, 4)), cols, "16000/1024/10-11")

    def test_examples(self):
        m = self.meta()
        assert reconstruct_sources(VoteResult({0: 1}, (0,), 1), m) == [(0, 0)]
        assert reconstruct_sources(VoteResult({3: 5, 1: 4, 2: 1}, (3, 1, 2), 5), m) == [(1, 1), (0, 1), (1, 0)]
        assert reconstruct_sources(VoteResult({}, (), 1), m) == []

    def test_dangling(self):
        with pytest.raises(IndexError):
            reconstruct_sources(VoteResult({9: 1}, (9,), 1), self.meta())
