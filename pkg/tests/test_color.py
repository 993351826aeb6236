import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist, squareform
from scipy.spatial.transform import Rotation
from skimage.color import rgb2lab

from repalign.color import (
    ColorQuantizer,
    Embedding3D,
    PixelPairSample,
    align_with_flip,
    classical_mds,
    color_pipeline,
    count_cooccurrences,
    gradient_corpus,
    kabsch_umeyama,
    mds_embed,
    pmi_dissimilarity,
    smacof,
    srgb_to_cielab,
    stress,
)
from repalign.core import ValidationError
from repalign.world import CooccurrenceTable


def solid(rgb, h=8, w=8):
    return np.tile(np.array(rgb, dtype=np.uint8), (h, w, 1))


def checkerboard(h, w, c0=(255, 0, 0), c1=(0, 0, 255)):
    mask = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(bool)
    im = np.empty((h, w, 3), dtype=np.uint8)
    im[~mask] = c0
    im[mask] = c1
    return im


def enumerate_pair_law(images, Q, S):
    """Exact pair distribution of the sampler: image, pixel, then a valid offset, all uniform."""
    offsets = S.offsets()
    acc = {}
    for im in images:
        h, w = im.shape[:2]
        bins = Q.index(im)
        for y in range(h):
            for x in range(w):
                valid = [(y + dy, x + dx) for dy, dx in offsets if 0 <= y + dy < h and 0 <= x + dx < w]
                for yy, xx in valid:
                    key = (bins[y, x], bins[yy, xx])
                    acc[key] = acc.get(key, 0.0) + 1.0 / (len(images) * h * w * len(valid))
    labels = sorted({k for pair in acc for k in pair})
    pos = {b: i for i, b in enumerate(labels)}
    P = np.zeros((len(labels), len(labels)))
    for (a, b), p in acc.items():
        P[pos[a], pos[b]] += p
    return (P + P.T) / 2, np.array(labels)


class TestQuantizer:
    def test_channel_exhaustive(self):
        Q = ColorQuantizer(8)
        v = np.arange(256)
        rgb = np.stack([v, np.zeros_like(v), np.zeros_like(v)], axis=1)
        idx = Q.index(rgb.astype(np.uint8))
        assert idx.tolist() == [(c // 32) * 64 for c in range(256)]

    @given(st.integers(1, 16), st.lists(st.integers(0, 255), min_size=3, max_size=3))
    def test_range(self, b, rgb):
        Q = ColorQuantizer(b)
        i = int(Q.index(np.array(rgb, dtype=np.uint8)))
        assert 0 <= i < Q.total_bins
        # the centre of the bin lands in the same bin
        assert int(Q.index(Q.centers(i).astype(np.uint8))) == i

    def test_distinct_bins(self):
        Q = ColorQuantizer(4)
        grid = np.stack(np.meshgrid(*[np.arange(0, 256, 64)] * 3, indexing="ij"), -1).reshape(-1, 3)
        assert sorted(Q.index(grid.astype(np.uint8)).tolist()) == list(range(64))

    def test_bad_bins(self):
        with pytest.raises(ValidationError):
            ColorQuantizer(0)


class TestSampling:
    def test_offsets(self):
        # lattice points in a radius-4 disc, less the origin
        brute = sum(1 for y in range(-4, 5) for x in range(-4, 5) if 0 < y * y + x * x <= 16)
        assert len(PixelPairSample(radius=4).offsets()) == brute == 48
        assert len(PixelPairSample(radius=1, metric="chebyshev").offsets()) == 8
        off = PixelPairSample(radius=3).offsets()
        assert ((off ** 2).sum(axis=1) <= 9).all() and not ((off == 0).all(axis=1)).any()

    def test_solid_red(self):
        Q = ColorQuantizer(8)
        C = count_cooccurrences([solid((255, 0, 0))], Q, PixelPairSample(1000, 4, 0))
        assert C.joint.tolist() == [[1.0]]
        assert C.labels.tolist() == [int(Q.index(np.array([255, 0, 0], dtype=np.uint8)))]

    def test_checkerboard_radius_one(self):
        C = count_cooccurrences([checkerboard(6, 6)], ColorQuantizer(2), PixelPairSample(5000, 1, 0))
        assert C.N == 2
        assert np.trace(C.joint) == 0.0
        assert C.joint[0, 1] == 0.5

    def test_matches_enumeration(self):
        images = [checkerboard(4, 5), gradient_corpus(1, 6, seed=3)[0]]
        Q, S = ColorQuantizer(2), PixelPairSample(400_000, 2, 5, metric="chebyshev")
        C = count_cooccurrences(images, Q, S)
        P, labels = enumerate_pair_law(images, Q, S)
        assert C.labels.tolist() == labels.tolist()
        assert np.abs(C.joint - P).sum() / 2 < 0.01
        diag = np.trace(P)
        assert 0 < diag < 1

    def test_table_invariants(self):
        C = count_cooccurrences(gradient_corpus(4, 16, 1), ColorQuantizer(4), PixelPairSample(20_000, 4, 2))
        assert np.array_equal(C.joint, C.joint.T)
        assert abs(C.joint.sum() - 1) < 1e-12
        np.testing.assert_allclose(C.marginal, C.joint.sum(axis=1), atol=1e-15)
        assert (C.marginal > 0).all()

    def test_deterministic_and_worker_independent(self):
        ims = gradient_corpus(6, 16, 2)
        Q, S = ColorQuantizer(4), PixelPairSample(120_000, 4, 7)
        a = count_cooccurrences(ims, Q, S)
        b = count_cooccurrences(ims, Q, S)
        c = count_cooccurrences(ims, Q, S, workers=3)
        assert np.array_equal(a.joint, b.joint) and np.array_equal(a.joint, c.joint)

    def test_pseudocount(self):
        ims = gradient_corpus(2, 16, 0)
        C = count_cooccurrences(ims, ColorQuantizer(4), PixelPairSample(5000, 4, 0), pseudocount=0.5)
        assert (C.joint > 0).all()

    def test_errors(self):
        Q, S = ColorQuantizer(), PixelPairSample(10)
        with pytest.raises(ValidationError, match="empty"):
            count_cooccurrences([], Q, S)
        with pytest.raises(ValidationError, match="image 0"):
            count_cooccurrences([np.zeros((4, 4), dtype=np.uint8)], Q, S)
        with pytest.raises(ValidationError, match="no pixel pair"):
            count_cooccurrences([solid((1, 2, 3), 1, 1)], Q, S)


class TestDissimilarity:
    def test_independent(self):
        D = pmi_dissimilarity(CooccurrenceTable(np.full((3, 3), 1 / 9)))
        np.testing.assert_allclose(D, 0.0, atol=1e-15)

    def test_two_by_two(self):
        D = pmi_dissimilarity(CooccurrenceTable([[0.4, 0.1], [0.1, 0.4]]))
        np.testing.assert_allclose(D, [[0.0, np.log(4)], [np.log(4), 0.0]], atol=1e-15)
        assert D[0, 1] == pytest.approx(1.3863, abs=1e-4)

    def test_min_zero_and_symmetric(self):
        C = count_cooccurrences(gradient_corpus(8, 16, 0), ColorQuantizer(3), PixelPairSample(50_000, 4, 0),
                                pseudocount=0.1)
        D = pmi_dissimilarity(C)
        assert D.min() == 0.0 and (D >= 0).all()
        assert np.array_equal(D, D.T)

    def test_masked(self):
        with pytest.raises(ValidationError, match="bins_per_channel"):
            pmi_dissimilarity(CooccurrenceTable([[0.0, 0.5], [0.5, 0.0]]))


class TestMds:
    def test_exact_configuration(self):
        X = np.random.default_rng(0).normal(size=(4, 3))
        D = squareform(pdist(X))
        emb = mds_embed(D, 3, restarts=5, seed=1)
        assert emb.stress < 1e-6
        np.testing.assert_allclose(squareform(pdist(emb.points)), D, atol=1e-4)

    def test_zero_matrix(self):
        emb = mds_embed(np.zeros((5, 5)), 3, restarts=3, seed=0)
        assert emb.stress == 0.0
        assert np.abs(pdist(emb.points)).max() == 0.0

    def noisy(self, M=12, seed=3):
        rng = np.random.default_rng(seed)
        D = squareform(pdist(rng.normal(size=(M, 5)))) + np.abs(rng.normal(0, 0.3, (M, M)))
        return 0.5 * (D + D.T) * (1 - np.eye(M))

    def test_more_restarts_never_worse(self):
        D = self.noisy()
        assert mds_embed(D, 3, 50, seed=4).stress <= mds_embed(D, 3, 1, seed=4).stress

    def test_histories_non_increasing(self):
        emb = mds_embed(self.noisy(), 3, 20, seed=5)
        assert len(emb.histories) == 21
        for h in emb.histories:
            assert all(b <= a for a, b in zip(h, h[1:]))
        assert emb.stress == min(h[-1] for h in emb.histories)
        assert emb.stress == pytest.approx(stress(emb.points, self.noisy()), rel=1e-12)

    def test_stress_oracle(self):
        X = np.random.default_rng(1).normal(size=(6, 3))
        D = self.noisy(6, 1)
        brute = sum((np.linalg.norm(X[i] - X[j]) - D[i, j]) ** 2 for i in range(6) for j in range(i + 1, 6))
        assert stress(X, D) == pytest.approx(brute, rel=1e-12)

    def test_classical_init_exact(self):
        X = np.random.default_rng(2).normal(size=(7, 3))
        D = squareform(pdist(X))
        np.testing.assert_allclose(squareform(pdist(classical_mds(D, 3))), D, atol=1e-10)

    def test_diagonal_ignored(self):
        D = self.noisy(8, 2)
        E = D + np.diag(np.full(8, 3.0))
        assert np.array_equal(mds_embed(D, 3, 4, seed=0).points, mds_embed(E, 3, 4, seed=0).points)

    def test_workers_deterministic(self):
        D = self.noisy(10, 6)
        a, b = mds_embed(D, 3, 8, seed=2), mds_embed(D, 3, 8, seed=2, workers=3)
        assert np.array_equal(a.points, b.points) and a.seed_of_best == b.seed_of_best

    def test_errors(self):
        with pytest.raises(ValidationError):
            mds_embed(np.zeros((3, 3)), 3)
        with pytest.raises(ValidationError):
            mds_embed(-np.ones((4, 4)), 2)
        with pytest.raises(ValidationError):
            mds_embed(np.triu(np.ones((4, 4))), 2)

    def test_smacof_stops_at_fixed_point(self):
        X = np.random.default_rng(0).normal(size=(5, 3))
        _, hist = smacof(squareform(pdist(X)), X)
        assert hist == [0.0]


def quaternion_oracle_rmsd(X, Y, seed=0):
    """Rigid (no scale) rmsd by random quaternion search then shrinking local refinement."""
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)

    def cost(q):
        R = Rotation.from_quat(q).as_matrix()
        return np.sqrt(((Xc @ R.T - Yc) ** 2).sum(1).mean())

    rng = np.random.default_rng(seed)
    cands = rng.normal(size=(20000, 4))
    costs = [cost(q) for q in cands]
    best = cands[int(np.argmin(costs))]
    cur = min(costs)
    step = 0.1
    while step > 1e-7:
        improved = False
        for _ in range(40):
            q = best + rng.normal(0, step, 4)
            c = cost(q)
            if c < cur:
                best, cur, improved = q, c, True
        if not improved:
            step /= 2
    return cur


class TestKabsch:
    pts = np.random.default_rng(7).normal(size=(10, 3))

    def test_identity(self):
        T, r = kabsch_umeyama(self.pts, self.pts)
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
        assert T.scale == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(T.translation, 0.0, atol=1e-12)
        assert r < 1e-12

    def test_exact_similarity(self):
        T, r = kabsch_umeyama(self.pts, 2 * self.pts + 1)
        assert T.scale == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(T.translation, [1, 1, 1], atol=1e-12)
        assert r < 1e-12

    def test_rotated(self):
        R = Rotation.from_euler("xyz", [0.3, -1.2, 2.0]).as_matrix()
        T, r = kabsch_umeyama(self.pts, 0.7 * self.pts @ R.T - 3)
        np.testing.assert_allclose(T.rotation, R, atol=1e-12)
        assert r < 1e-12

    @pytest.mark.parametrize("seed", [0, 1])
    def test_quaternion_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(15, 3))
        R = Rotation.random(random_state=seed).as_matrix()
        Y = X @ R.T + rng.normal(0, 0.3, X.shape)
        _, r = kabsch_umeyama(X, Y, allow_scale=False)
        assert r == pytest.approx(quaternion_oracle_rmsd(X, Y, seed), abs=1e-3)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_never_worse_than_identity(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        T, r = kabsch_umeyama(X, Y)
        assert r <= np.sqrt(((X - Y) ** 2).sum(1).mean()) + 1e-12
        assert np.abs(T.rotation.T @ T.rotation - np.eye(3)).max() < 1e-10
        assert abs(np.linalg.det(T.rotation) - 1) < 1e-10
        np.testing.assert_allclose(np.sqrt(((T.apply(X) - Y) ** 2).sum(1).mean()), r, rtol=1e-10)

    def test_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(ValidationError, match="degenerate"):
            kabsch_umeyama(line, self.pts[:5])
        with pytest.raises(ValidationError):
            kabsch_umeyama(self.pts[:2], self.pts[:2])


class TestFlip:
    pts = np.random.default_rng(8).normal(size=(12, 3))

    def test_mirror(self):
        mirror = self.pts * [1, 1, -1] + 2.0
        aligned, T = align_with_flip(Embedding3D(self.pts, 0.0, 0), mirror)
        assert T.flipped
        assert T.rmsd < 1e-12
        np.testing.assert_allclose(aligned, mirror, atol=1e-12)

    def test_self(self):
        _, T = align_with_flip(self.pts, self.pts)
        assert not T.flipped and T.rmsd < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_min_of_branches(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        _, r_plain = kabsch_umeyama(X, Y)
        _, r_flip = kabsch_umeyama(-X, Y)
        aligned, T = align_with_flip(X, Y)
        assert T.rmsd == min(r_plain, r_flip)
        assert T.flipped == (r_flip < r_plain)


class TestCielab:
    def test_white_black(self):
        np.testing.assert_allclose(srgb_to_cielab([255, 255, 255]), [100, 0, 0], atol=1e-9)
        np.testing.assert_allclose(srgb_to_cielab([0, 0, 0]), [0, 0, 0], atol=1e-12)

    def test_red_reference(self):
        ref = rgb2lab(np.array([[[1.0, 0.0, 0.0]]]))[0, 0]
        np.testing.assert_allclose(srgb_to_cielab([255, 0, 0]), ref, atol=0.1)
        np.testing.assert_allclose(srgb_to_cielab([255, 0, 0]), [53.24, 80.09, 67.20], atol=0.1)

    def test_grid_reference(self):
        v = np.arange(0, 256, 15)
        grid = np.stack(np.meshgrid(v, v, v, indexing="ij"), -1).reshape(-1, 3)
        ref = rgb2lab(grid[None] / 255.0)[0]
        lab = srgb_to_cielab(grid)
        np.testing.assert_allclose(lab, ref, atol=0.1)
        assert (lab[:, 0] >= -1e-9).all() and (lab[:, 0] <= 100 + 1e-9).all()


class TestPipeline:
    def test_gradient_corpus_beats_shuffles(self):
        ims = gradient_corpus(32, 24, 1)
        r = color_pipeline(ims, ColorQuantizer(4), PixelPairSample(100_000, 4, 1), restarts=5, seed=1,
                           pseudocount=0.01)
        assert r.spearman > 0
        assert r.spearman > np.percentile(r.shuffled, 95)
        assert len(r.shuffled) == 20
        assert r.report()["bins"] == r.table.N

    def test_single_colour(self):
        with pytest.raises(ValidationError, match="bin"):
            color_pipeline([solid((10, 200, 30))], restarts=1)

    def test_deterministic(self):
        ims = gradient_corpus(8, 16, 0)
        kw = dict(Q=ColorQuantizer(3), S=PixelPairSample(20_000, 4, 0), restarts=3, seed=0, pseudocount=0.1)
        a, b = color_pipeline(ims, **kw), color_pipeline(ims, **kw)
        assert np.array_equal(a.aligned, b.aligned) and a.report() == b.report()
