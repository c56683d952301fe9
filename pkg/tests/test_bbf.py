import os

import numpy as np
import pytest

import bbfkit as bk
from bbfkit.bbf import _TAG_SELECT, derive_seed
from bbfkit.kernels import KernelAccessor


def full_rank_profile(clustering, epsilon, frob):
    return bk.RankProfile(
        epsilon=epsilon,
        ranks=clustering.sizes.copy(),
        r_max=int(clustering.sizes.max()),
        sigma_profiles=[np.empty(0)] * clustering.k,
        frob_estimate=frob,
        accuracy_risk=np.zeros(clustering.k, dtype=bool),
        sizes=clustering.sizes.copy(),
    )


def exact_frob2(X, spec):
    K = bk.kernel_cross(spec, X.points, X.points)
    return float((K**2).sum()), K


class TestEstimateFrobenius:
    def test_constant_limit(self):
        X = bk.synth_blobs(50, 3, 5, 0.1, seed=0)
        spec = bk.KernelSpec("gaussian", 1e6)
        acc = KernelAccessor(X, spec)
        est = bk.estimate_frobenius(acc, 50, 500, seed=1)
        assert est == pytest.approx(2500.0, rel=1e-9)

    def test_within_5pct_over_seeds(self):
        X = bk.synth_blobs(500, 4, 8, 0.15, seed=2)
        spec = bk.KernelSpec("gaussian", 0.8)
        exact, _ = exact_frob2(X, spec)
        hits = 0
        for t in range(20):
            acc = KernelAccessor(X, spec)
            est = bk.estimate_frobenius(acc, 500, 100 * 500, seed=t)
            hits += abs(est - exact) <= 0.05 * exact
        assert hits >= 19

    def test_exhaustive_is_exact(self):
        X = bk.synth_blobs(40, 3, 4, 0.2, seed=3)
        spec = bk.KernelSpec("laplacian", 1.0)
        exact, _ = exact_frob2(X, spec)
        acc = KernelAccessor(X, spec)
        est = bk.estimate_frobenius(acc, 40, 40 * 39, seed=4)
        assert est == pytest.approx(exact, rel=1e-12)

    def test_unbiasedness(self):
        # mean over many independent estimates approaches the exact value
        X = bk.synth_blobs(120, 3, 6, 0.2, seed=5)
        spec = bk.KernelSpec("gaussian", 0.5)
        exact, _ = exact_frob2(X, spec)
        acc = KernelAccessor(X, spec)
        ests = [bk.estimate_frobenius(acc, 120, 500, seed=t) for t in range(200)]
        assert np.mean(ests) == pytest.approx(exact, rel=0.02)


class TestEstimateRanks:
    def test_rank_one_limit(self):
        X = bk.synth_blobs(200, 3, 5, 0.1, seed=6)
        spec = bk.KernelSpec("gaussian", 1e5)
        c = bk.kmeans(X, 5, seed=0)
        prof = bk.estimate_ranks(X, spec, c, 1e-3, seed=1)
        assert (prof.ranks == 1).all()

    def test_zero_tolerance_limit(self):
        X = bk.synth_blobs(300, 4, 6, 0.2, seed=7)
        spec = bk.KernelSpec("gaussian", 0.5)
        c = bk.kmeans(X, 4, seed=2)
        prof = bk.estimate_ranks(X, spec, c, 1e-15, seed=3)
        np.testing.assert_array_equal(prof.ranks, c.sizes)

    def test_matches_exact_oracle_within_2(self):
        X = bk.synth_blobs(1000, 5, 10, 0.1, seed=8)
        spec = bk.KernelSpec("gaussian", 1.0)
        c = bk.kmeans(X, 10, seed=4)
        prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=5)
        acc = KernelAccessor(X, spec)
        from bbfkit.bbf import DEFAULT_RANK_SAFETY

        for i in range(c.k):
            members = c.members(i)
            block = acc.block(members, members)
            sv = np.linalg.svd(block, compute_uv=False)
            bf2 = float((block**2).sum())
            thr = (
                (members.size / X.n) ** 2
                * prof.frob_estimate
                * (DEFAULT_RANK_SAFETY * 1e-2) ** 2
            )
            tail = np.maximum(bf2 - np.cumsum(sv**2), 0.0)
            hit = np.flatnonzero(tail < thr)
            oracle = hit[0] + 1 if hit.size else members.size
            assert abs(int(prof.ranks[i]) - int(oracle)) <= 2

    def test_invariants_and_validation(self):
        X = bk.synth_blobs(150, 3, 5, 0.2, seed=9)
        spec = bk.KernelSpec("gaussian", 0.6)
        c = bk.kmeans(X, 5, seed=6)
        prof = bk.estimate_ranks(X, spec, c, 5e-2, r_max=20, seed=7)
        assert (prof.ranks >= 1).all()
        assert (prof.ranks <= np.minimum(c.sizes, 20)).all()
        with pytest.raises(ValueError):
            bk.estimate_ranks(X, spec, c, 0.0)
        with pytest.raises(ValueError):
            bk.estimate_ranks(X, spec, c, 1.0)

    def test_cap_sets_risk_flag(self):
        X = bk.synth_blobs(200, 4, 5, 0.3, seed=10)
        spec = bk.KernelSpec("gaussian", 0.05)  # nearly diagonal: high rank
        c = bk.kmeans(X, 2, seed=8)
        prof = bk.estimate_ranks(X, spec, c, 1e-3, r_max=5, seed=9)
        assert prof.accuracy_risk.any()
        assert (prof.ranks[prof.accuracy_risk] == 5).all()


class TestMemoryCost:
    def prof(self, sizes, ranks, eps=1e-2):
        sizes = np.asarray(sizes)
        ranks = np.asarray(ranks)
        return bk.RankProfile(
            epsilon=eps,
            ranks=ranks,
            r_max=int(ranks.max()),
            sigma_profiles=[np.empty(0)] * len(sizes),
            frob_estimate=1.0,
            accuracy_risk=np.zeros(len(sizes), dtype=bool),
            sizes=sizes,
        )

    def test_single_block(self):
        assert bk.memory_cost(self.prof([100], [7])) == 100 * 7 + 49

    def test_two_blocks(self):
        n, r = 100, 6
        assert bk.memory_cost(self.prof([n // 2, n // 2], [r, r])) == n * r + 4 * r**2

    def test_diagonal_only(self):
        k, r, n_i = 5, 3, 40
        skipped = {(i, j) for i in range(k) for j in range(k) if i != j}
        got = bk.memory_cost(self.prof([n_i] * k, [r] * k), skipped)
        assert got == k * n_i * r + k * r**2


class TestSelectK:
    def test_degenerate_range(self):
        X = bk.synth_blobs(200, 3, 5, 0.1, seed=11)
        spec = bk.KernelSpec("gaussian", 0.5)
        k, prof, c = bk.select_k(X, spec, 1e-2, 5, 5, seed=10)
        assert k == 5 and c.k == 5

    def test_blobs_vs_exhaustive_oracle(self):
        X = bk.synth_blobs(400, 5, 10, 0.02, seed=12)
        spec = bk.KernelSpec("gaussian", 0.3)
        k, prof, c = bk.select_k(X, spec, 1e-2, 1, 20, seed=11)
        assert 8 <= k <= 12
        best = np.inf
        for kk in range(1, 21):
            ds = derive_seed(11, _TAG_SELECT, kk)
            cc = bk.kmeans(X, kk, seed=ds)
            pp = bk.estimate_ranks(X, spec, cc, 1e-2, seed=ds)
            best = min(best, bk.memory_cost(pp))
        assert bk.memory_cost(prof) <= 1.1 * best

    def test_loose_epsilon_returns_boundary(self):
        X = bk.synth_blobs(300, 3, 6, 0.1, seed=13)
        spec = bk.KernelSpec("gaussian", 3.0)  # huge h: globally low rank
        k, prof, c = bk.select_k(X, spec, 0.5, 2, 17, seed=12)
        assert k == 2
        assert (prof.ranks <= 2).all()

    def test_validation(self):
        X = bk.synth_blobs(100, 2, 4, 0.1, seed=14)
        spec = bk.KernelSpec("gaussian", 1.0)
        with pytest.raises(ValueError):
            bk.select_k(X, spec, 1e-2, 3, 2, seed=0)
        with pytest.raises(ValueError):
            bk.select_k(X, spec, 1e-2, 1, 50, seed=0)  # beyond ceil(sqrt(n))


class TestBuild:
    def test_full_rank_exact(self):
        X = bk.synth_blobs(256, 5, 10, 0.1, seed=15)
        spec = bk.KernelSpec("gaussian", 0.5)
        c = bk.kmeans(X, 4, seed=13)
        frob, K = exact_frob2(X, spec)
        prof = full_rank_profile(c, 1e-8, frob)
        f = bk.build_bbf(X, spec, c, prof, seed=14)
        assert len(f.skip_certificates) == 0
        err = np.linalg.norm(f.reconstruct_dense() - K) / np.linalg.norm(K)
        assert err <= 1e-6

    def test_cutoff_by_construction(self):
        rng = np.random.default_rng(16)
        a = rng.normal(0, 0.1, (60, 3))
        b = rng.normal(0, 0.1, (60, 3)) + np.array([5.0, 0, 0])
        X = bk.DataMatrix(np.vstack([a, b]))
        spec = bk.KernelSpec("gaussian", 0.1)
        c = bk.kmeans(X, 2, seed=15)
        prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=16)
        f = bk.build_bbf(X, spec, c, prof, seed=17)
        assert f.inner[0][1] is None and f.inner[1][0] is None
        ranks = f.ranks
        expected = float(np.dot(c.sizes, ranks) + (ranks**2).sum())
        assert f.memory_count() == expected

    def test_epsilon_accuracy_smoke(self):
        X = bk.synth_blobs(800, 5, 10, 0.1, seed=17)
        spec = bk.KernelSpec("gaussian", 0.5)
        _, K = exact_frob2(X, spec)
        hits = 0
        for t in range(5):
            s = derive_seed(99, t)
            k, prof, c = bk.select_k(X, spec, 1e-2, 1, 28, seed=s)
            f = bk.build_bbf(X, spec, c, prof, seed=s)
            hits += bk.relative_error(f, K) <= 3e-2
        assert hits >= 4

    def test_orthonormal_bases(self):
        X = bk.synth_blobs(300, 4, 6, 0.15, seed=18)
        spec = bk.KernelSpec("gaussian", 0.6)
        c = bk.kmeans(X, 5, seed=19)
        prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=20)
        f = bk.build_bbf(X, spec, c, prof, seed=21)
        for U in f.bases:
            r = U.shape[1]
            assert np.abs(U.T @ U - np.eye(r)).max() <= 1e-8

    def test_mirrored_inner_blocks(self):
        X = bk.synth_blobs(200, 3, 4, 0.2, seed=19)
        spec = bk.KernelSpec("gaussian", 0.8)
        c = bk.kmeans(X, 3, seed=22)
        prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=23)
        f = bk.build_bbf(X, spec, c, prof, seed=24)
        for i in range(3):
            for j in range(3):
                if f.inner[i][j] is not None:
                    np.testing.assert_array_equal(f.inner[i][j], f.inner[j][i].T)

    def test_determinism(self):
        X = bk.synth_blobs(150, 3, 5, 0.2, seed=20)
        spec = bk.KernelSpec("laplacian", 1.0)
        c = bk.kmeans(X, 4, seed=25)
        prof = bk.estimate_ranks(X, spec, c, 5e-2, seed=26)
        f1 = bk.build_bbf(X, spec, c, prof, seed=27)
        f2 = bk.build_bbf(X, spec, c, prof, seed=27)
        np.testing.assert_array_equal(f1.reconstruct_dense(), f2.reconstruct_dense())

    def test_rank_validation(self):
        X = bk.synth_blobs(100, 2, 4, 0.1, seed=21)
        spec = bk.KernelSpec("gaussian", 1.0)
        c = bk.kmeans(X, 4, seed=28)
        bad = full_rank_profile(c, 1e-2, 100.0)
        bad.ranks = bad.ranks + 100
        with pytest.raises(ValueError):
            bk.build_bbf(X, spec, c, bad, seed=29)


class TestApplyAndReconstruct:
    def build_small(self, n=300, seed=30):
        X = bk.synth_blobs(n, 4, 6, 0.15, seed=seed)
        spec = bk.KernelSpec("gaussian", 0.6)
        c = bk.kmeans(X, 5, seed=seed + 1)
        prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=seed + 2)
        f = bk.build_bbf(X, spec, c, prof, seed=seed + 3)
        return X, spec, f

    def test_zero_vector(self):
        _, _, f = self.build_small()
        np.testing.assert_array_equal(f.apply(np.zeros(f.n)), np.zeros(f.n))

    def test_apply_matches_dense(self):
        _, _, f = self.build_small()
        Kd = f.reconstruct_dense()
        rng = np.random.default_rng(31)
        for _ in range(10):
            v = rng.standard_normal(f.n)
            ref = Kd @ v
            assert np.linalg.norm(f.apply(v) - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_k1_full_rank_matches_kernel_matvec(self):
        X = bk.synth_blobs(200, 3, 5, 0.2, seed=32)
        spec = bk.KernelSpec("gaussian", 0.7)
        c = bk.kmeans(X, 1, seed=33)
        frob, K = exact_frob2(X, spec)
        f = bk.build_bbf(X, spec, c, full_rank_profile(c, 1e-8, frob), seed=34)
        v = np.random.default_rng(35).standard_normal(200)
        ref = K @ v
        assert np.linalg.norm(f.apply(v) - ref) <= 1e-6 * np.linalg.norm(ref)

    def test_linearity_exact(self):
        _, _, f = self.build_small()
        rng = np.random.default_rng(36)
        u, v = rng.standard_normal(f.n), rng.standard_normal(f.n)
        a, b = 1.7, -0.3
        lhs = f.apply(a * u + b * v)
        rhs = a * f.apply(u) + b * f.apply(v)
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())

    def test_reconstruct_symmetric(self):
        _, _, f = self.build_small()
        Kd = f.reconstruct_dense()
        assert np.abs(Kd - Kd.T).max() <= 1e-12

    def test_reconstruct_k1_structure(self):
        X = bk.synth_blobs(80, 2, 3, 0.2, seed=37)
        spec = bk.KernelSpec("gaussian", 0.9)
        c = bk.kmeans(X, 1, seed=38)
        prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=39)
        f = bk.build_bbf(X, spec, c, prof, seed=40)
        inner = f.bases[0] @ f.inner[0][0] @ f.bases[0].T
        pos = np.argsort(c.permutation)
        np.testing.assert_allclose(f.reconstruct_dense(), inner[np.ix_(pos, pos)])

    def test_reconstruct_matches_apply_on_basis_vectors(self):
        _, _, f = self.build_small(n=120, seed=41)
        Kd = f.reconstruct_dense()
        for p in range(0, 120, 17):
            e = np.zeros(120)
            e[p] = 1.0
            np.testing.assert_allclose(Kd[:, p], f.apply(e), atol=1e-12)

    def test_reconstruct_cap(self):
        _, _, f = self.build_small(n=100, seed=42)
        with pytest.raises(ValueError):
            f.reconstruct_dense(max_n=50)

    def test_apply_length_check(self):
        _, _, f = self.build_small(n=100, seed=43)
        with pytest.raises(ValueError):
            f.apply(np.zeros(99))

    def test_entries_at_matches_dense(self):
        _, _, f = self.build_small(n=150, seed=44)
        Kd = f.reconstruct_dense()
        rng = np.random.default_rng(45)
        a = rng.integers(0, 150, 200)
        b = rng.integers(0, 150, 200)
        np.testing.assert_allclose(f.entries_at(a, b), Kd[a, b], atol=1e-12)


class TestInvariants:
    def test_skipped_block_soundness(self):
        rng = np.random.default_rng(46)
        groups = [rng.normal(0, 0.1, (40, 3)) + center for center in
                  (np.zeros(3), np.array([4.0, 0, 0]), np.array([0, 5.0, 0]))]
        X = bk.DataMatrix(np.vstack(groups))
        for family, h in (("gaussian", 0.15), ("laplacian", 0.05)):
            spec = bk.KernelSpec(family, h)
            c = bk.kmeans(X, 3, seed=47)
            prof = bk.estimate_ranks(X, spec, c, 1e-2, seed=48)
            f = bk.build_bbf(X, spec, c, prof, seed=49)
            assert f.skip_certificates, "expected skipped blocks in this geometry"
            acc = KernelAccessor(X, spec)
            for (i, j), cert in f.skip_certificates.items():
                block = acc.block(c.members(i), c.members(j))
                assert block.max() <= cert.envelope_value
                assert cert.envelope_value <= cert.threshold

    def test_error_budget_composition(self):
        rng = np.random.default_rng(50)
        n = 100
        M = rng.standard_normal((n, n))
        sizes = [20, 30, 25, 25]
        offs = np.concatenate(([0], np.cumsum(sizes)))
        eps = 0.1
        fro2 = (M**2).sum()
        Mhat = M.copy()
        for i in range(4):
            for j in range(4):
                budget = sizes[i] * sizes[j] / n**2 * fro2 * eps**2
                G = rng.standard_normal((sizes[i], sizes[j]))
                G *= np.sqrt(budget) / np.linalg.norm(G)
                Mhat[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] += G
        rel = np.linalg.norm(Mhat - M) / np.linalg.norm(M)
        assert rel <= eps * (1 + 1e-9)
        assert rel == pytest.approx(eps, rel=1e-9)

    def test_linear_entry_count_when_n_doubles(self):
        spec = bk.KernelSpec("gaussian", 0.5)
        counts = []
        for n in (2000, 4000):
            X = bk.synth_blobs(n, 5, 10, 0.1, seed=51)
            acc = KernelAccessor(X, spec)
            c = bk.kmeans(X, 8, seed=52)
            prof = bk.fixed_rank_profile(c, 15, 1e-3, float(n))
            f = bk.build_bbf(X, spec, c, prof, seed=53, acc=acc)
            counts.append(f.build_entries)
        ratio = counts[1] / counts[0]
        assert 1.8 <= ratio <= 2.3

    def test_build_entry_budget(self):
        # entries <= alpha * n * k * (r+l)^2 + beta * n with small constants
        n, k, r, l = 1500, 6, 12, 10
        X = bk.synth_blobs(n, 4, 6, 0.1, seed=54)
        spec = bk.KernelSpec("gaussian", 0.5)
        acc = KernelAccessor(X, spec)
        c = bk.kmeans(X, k, seed=55)
        prof = bk.fixed_rank_profile(c, r, 1e-3, float(n))
        f = bk.build_bbf(X, spec, c, prof, seed=56, acc=acc)
        assert f.build_entries <= 2 * n * k * (r + l) ** 2 + 10 * n


class TestInnerFromSamples:
    def test_recovers_exact_inner(self):
        rng = np.random.default_rng(57)
        m, n, r1, r2 = 60, 50, 6, 5
        U = np.linalg.qr(rng.standard_normal((m, r1)))[0]
        V = np.linalg.qr(rng.standard_normal((n, r2)))[0]
        C = rng.standard_normal((r1, r2))
        M = U @ C @ V.T
        I = rng.choice(m, r1 + 5, replace=False)
        J = rng.choice(n, r2 + 5, replace=False)
        got = bk.inner_from_samples(U[I], M[np.ix_(I, J)], V[J])
        assert np.linalg.norm(got - C) <= 1e-10 * np.linalg.norm(C)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        X = bk.synth_blobs(180, 3, 5, 0.15, seed=58)
        spec = bk.KernelSpec("laplacian", 0.8)
        c = bk.kmeans(X, 4, seed=59)
        prof = bk.estimate_ranks(X, spec, c, 2e-2, seed=60)
        f = bk.build_bbf(X, spec, c, prof, seed=61)
        path = str(tmp_path / "model.bbf")
        bk.save_bbf(f, path)
        g = bk.load_bbf(path)
        assert g.n == f.n and g.k == f.k
        assert g.spec == f.spec
        np.testing.assert_array_equal(g.clustering.permutation, f.clustering.permutation)
        np.testing.assert_array_equal(g.clustering.assignment, f.clustering.assignment)
        for i in range(f.k):
            np.testing.assert_array_equal(g.bases[i], f.bases[i])
            for j in range(f.k):
                if f.inner[i][j] is None:
                    assert g.inner[i][j] is None
                else:
                    np.testing.assert_array_equal(g.inner[i][j], f.inner[i][j])
        # derived products may differ in the last ulp (BLAS alignment)
        np.testing.assert_allclose(
            g.reconstruct_dense(), f.reconstruct_dense(), atol=1e-12
        )
        v = np.random.default_rng(62).standard_normal(f.n)
        np.testing.assert_allclose(g.apply(v), f.apply(v), atol=1e-12)
        assert g.memory_count() == f.memory_count()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bbf"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="not a BBF container"):
            bk.load_bbf(str(path))

    def test_truncated(self, tmp_path):
        X = bk.synth_blobs(60, 2, 3, 0.2, seed=63)
        spec = bk.KernelSpec("gaussian", 0.7)
        c = bk.kmeans(X, 2, seed=64)
        prof = bk.estimate_ranks(X, spec, c, 5e-2, seed=65)
        f = bk.build_bbf(X, spec, c, prof, seed=66)
        path = str(tmp_path / "model.bbf")
        bk.save_bbf(f, path)
        data = open(path, "rb").read()
        open(path, "wb").write(data[: len(data) // 2])
        with pytest.raises(ValueError, match="truncated"):
            bk.load_bbf(path)
