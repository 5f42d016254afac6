import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rigfit.fitting import FitConfig
from rigfit.geometry import PointCloud, scan_to_mesh_distance
from rigfit.losses import loss_vertex
from rigfit.rig import RigError
from rigfit.rigio import rig_schema
from rigfit.synth import (CorpusSpec, SkinningSample, ToyRigConfig, TransformCorpus, fit_weights_for_pose,
                          harvest_transform_corpus, load_corpus, make_identities, make_toy_rig, manifest_hash,
                          perturb_pose, random_pose, read_array, save_corpus, split_corpus, split_sizes,
                          synth_scan, synthesize_samples, weight_modes, write_array)

QUICK = FitConfig(stage1_pose_iters=20, stage1_weight_iters=10, stage1_cycles=1, weight_fit_max_iters=60,
                  root_warmup_iters=0)


class TestToyRig:
    def test_deterministic(self):
        a, b = make_toy_rig(ToyRigConfig(seed=4)), make_toy_rig(ToyRigConfig(seed=4))
        assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
        assert np.array_equal(a.weights.free_params, b.weights.free_params)
        assert np.array_equal(a.skeleton.bind_local, b.skeleton.bind_local)
        assert np.array_equal(a.expressions.deltas, b.expressions.deltas)

    def test_off_midline_joints_have_partners(self, toy_rig):
        pos = toy_rig.skeleton.joint_positions()
        for k, j in enumerate(toy_rig.skeleton.joints):
            if abs(pos[k, 0]) > 1e-9:
                assert j.symmetry_partner is not None
                assert np.allclose(pos[j.symmetry_partner], pos[k] * [-1, 1, 1], atol=1e-12)

    def test_rows_sum_to_one(self, toy_rig):
        assert np.allclose(toy_rig.weights.expand().sum(1), 1.0, atol=1e-6)

    def test_mesh_is_closed_and_large_enough(self, toy_rig):
        f = toy_rig.mesh.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert np.all(counts == 2)
        assert toy_rig.mesh.n_vertices >= 50

    def test_support_threshold(self):
        cfg = ToyRigConfig()
        r = make_toy_rig(cfg)
        assert cfg.support_threshold == 1e-3
        assert r.weights.n_classes < 3 * r.mesh.n_vertices

    def test_too_many_joints(self):
        with pytest.raises(RigError):
            make_toy_rig(ToyRigConfig(subdivision=0, joints=13))
        with pytest.raises(RigError):
            make_toy_rig(ToyRigConfig(joints=0))

    @pytest.mark.parametrize("joints", [1, 2, 3, 7, 20])
    def test_joint_counts(self, joints):
        r = make_toy_rig(ToyRigConfig(joints=joints, expressions=0))
        assert r.skeleton.K == joints
        assert r.n_expressions == 0
        assert np.allclose(r.weights.expand().sum(1), 1.0)

    def test_asymmetric(self):
        r = make_toy_rig(ToyRigConfig(symmetric=False))
        assert all(j.symmetry_partner is None for j in r.skeleton.joints)
        assert r.layout.size == 9 * r.skeleton.K

    def test_random_pose_within_limits(self, toy_rig, rng):
        lo, hi = toy_rig.layout.limits(toy_rig.skeleton)
        for _ in range(20):
            p = random_pose(toy_rig, rng, scale=1.0, root_scale=1.0)
            assert np.all(p >= lo) and np.all(p <= hi)

    def test_identities_follow_modes(self, toy_rig, rng):
        modes = weight_modes(toy_rig, 2, rng)
        ids = make_identities(toy_rig, 3, rng, modes=modes)
        assert ids.vertices.shape == (3, toy_rig.mesh.n_vertices, 3)
        assert not np.allclose(ids.free[0], ids.free[1])
        assert np.allclose(ids.vertices[1], toy_rig.deform(ids.poses[1], ids.free[1]))


class TestScan:
    def test_clean_scan_lies_on_mesh(self, toy_rig, rng):
        pose = random_pose(toy_rig, rng)
        cloud = synth_scan(toy_rig, pose, n_points=3000, rng=rng)
        posed = toy_rig.mesh.with_vertices(toy_rig.deform(pose))
        assert scan_to_mesh_distance(cloud, posed).max < 1e-9

    def test_noise_mean_distance(self, toy_rig):
        # per-axis sigma: the distance along the surface normal is |N(0, sigma)| near the surface
        sigma = 2e-3
        pose = toy_rig.layout.identity()
        cloud = synth_scan(toy_rig, pose, noise_sigma=sigma, n_points=10000, rng=np.random.default_rng(1))
        mean = scan_to_mesh_distance(cloud, toy_rig.mesh).mean
        assert abs(mean - sigma * np.sqrt(2 / np.pi)) < 0.1 * sigma * np.sqrt(2 / np.pi)

    def test_dropout_fraction(self, toy_rig, rng):
        cloud = synth_scan(toy_rig, toy_rig.layout.identity(), dropout_fraction=0.3, n_points=2000, rng=rng)
        assert len(cloud) == 1400

    def test_dropout_is_contiguous(self, toy_rig, rng):
        full = synth_scan(toy_rig, toy_rig.layout.identity(), n_points=2000, rng=np.random.default_rng(5))
        cut = synth_scan(toy_rig, toy_rig.layout.identity(), dropout_fraction=0.2, n_points=2000,
                         rng=np.random.default_rng(5))
        # the removed points form a ball around one of them
        kept = {tuple(p) for p in cut.points}
        removed = np.array([p for p in full.points if tuple(p) not in kept])
        assert len(removed) == 400
        ok = [np.linalg.norm(removed - c, axis=1).max() <= np.linalg.norm(cut.points - c, axis=1).min()
              for c in removed]
        assert any(ok)

    def test_dropout_one_rejected(self, toy_rig):
        with pytest.raises(ValueError):
            synth_scan(toy_rig, toy_rig.layout.identity(), dropout_fraction=1.0)

    def test_normals_unit(self, toy_rig, rng):
        c = synth_scan(toy_rig, random_pose(toy_rig, rng), n_points=100, rng=rng)
        assert isinstance(c, PointCloud) and np.allclose(np.linalg.norm(c.normals, axis=1), 1.0)


class TestCorpusSpec:
    def test_counting_example(self):
        assert CorpusSpec(snapshots_per_fit=4, cycles=2, perturb_copies=3).expected_poses(3) == 96

    def test_paper_scale_count(self):
        assert CorpusSpec(snapshots_per_fit=1, cycles=1, perturb_copies=3).expected_poses(8000) == 32000

    def test_split_must_sum_to_one(self):
        with pytest.raises(ValueError):
            CorpusSpec(split=(0.5, 0.2, 0.2))

    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 10), st.integers(0, 5))
    def test_formula(self, s, c, n, p):
        assert CorpusSpec(snapshots_per_fit=s, cycles=c, perturb_copies=p).expected_poses(n) == s * c * n * (1 + p)


class TestPerturb:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_exact_count_and_magnitude(self, seed):
        r = np.random.default_rng(seed)
        pose = r.normal(size=40)
        pose[r.integers(0, 40, size=5)] = 0.0
        spec = CorpusSpec()
        new, chosen = perturb_pose(pose, spec, r)
        changed = np.flatnonzero(new != pose)
        assert len(chosen) == min(int(round(0.2 * 40)), np.count_nonzero(pose))
        assert np.array_equal(changed, chosen)
        ratio = new[chosen] / pose[chosen]
        assert np.allclose(np.abs(ratio - 1.0), 0.05)

    def test_masked_dofs_untouched(self, toy_rig, rng):
        pose = random_pose(toy_rig, rng)
        new, _ = perturb_pose(pose, CorpusSpec(), rng)
        full = toy_rig.layout.unpack(new)
        assert np.array_equal(full[~toy_rig.layout.mask], toy_rig.layout.unpack(pose)[~toy_rig.layout.mask])


class TestSplit:
    def test_paper_sizes(self):
        assert split_sizes(32000, (0.906, 0.021, 0.073)).tolist() == [28992, 672, 2336]

    def test_disjoint_exhaustive_deterministic(self):
        a = split_corpus(500, (0.906, 0.021, 0.073), seed=3)
        b = split_corpus(500, (0.906, 0.021, 0.073), seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        allidx = np.concatenate(a)
        assert sorted(allidx.tolist()) == list(range(500))

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            split_corpus(10, (0.906, 0.021, 0.073), seed=0)

    @given(st.integers(1, 100000), st.floats(0.01, 0.98))
    def test_sizes_sum(self, n, a):
        b = (1 - a) / 2
        assert split_sizes(n, (a, b, 1 - a - b)).sum() == n


class TestWeightFits:
    def test_self_consistent_target(self, small_rig, rng):
        pose = random_pose(small_rig, rng)
        target = small_rig.deform(pose)
        s = fit_weights_for_pose(small_rig, pose, target, small_rig.weights.free_params, QUICK)
        assert s.loss < 1e-8

    def test_compensates_perturbed_pose(self, small_rig, rng):
        pose = random_pose(small_rig, rng)
        target = small_rig.deform(pose)
        bad, _ = perturb_pose(pose, CorpusSpec(perturb_sparsity=0.5), rng)
        before = loss_vertex(small_rig.deform(bad), target)
        free0 = small_rig.weights.free_params.copy()
        s = fit_weights_for_pose(small_rig, bad, target, free0, QUICK)
        assert s.loss < before
        assert not np.array_equal(s.params, free0)
        assert np.array_equal(free0, small_rig.weights.free_params)

    def test_pose_is_frozen(self, small_rig, rng):
        pose = random_pose(small_rig, rng)
        keep = pose.copy()
        fit_weights_for_pose(small_rig, pose, small_rig.deform(pose) * 1.01, small_rig.weights.free_params, QUICK)
        assert np.array_equal(pose, keep)


@pytest.fixture(scope="module")
def corpus():
    rig = make_toy_rig(ToyRigConfig(joints=5, expressions=0))
    rng = np.random.default_rng(0)
    scans = list(make_identities(rig, 3, rng, pose_scale=0.3).vertices)
    spec = CorpusSpec(snapshots_per_fit=4, cycles=2, perturb_copies=3)
    return rig, scans, spec, harvest_transform_corpus(rig, scans, spec, QUICK)


class TestCorpusPipeline:

    def test_harvest_count(self, corpus):
        rig, scans, spec, c = corpus
        assert len(c.poses) == 96 == spec.expected_poses(3)
        assert c.poses.shape[1] == rig.layout.size
        assert np.bincount(c.source).tolist() == [24] * 4

    def test_no_perturbation(self, corpus):
        rig, scans, _, _ = corpus
        c = harvest_transform_corpus(rig, scans, CorpusSpec(snapshots_per_fit=2, cycles=1, perturb_copies=0), QUICK)
        assert len(c.poses) == 6 and np.all(c.source == 0)

    def test_samples_reproduce_targets_and_are_worker_invariant(self, corpus):
        rig, scans, _, c = corpus
        sub = TransformCorpus(c.poses[::16], c.scan_index[::16], c.source[::16], c.learned_free)
        one = synthesize_samples(rig, sub, scans, QUICK, workers=1)
        two = synthesize_samples(rig, sub, scans, QUICK, workers=2)
        assert all(np.array_equal(a.params, b.params) for a, b in zip(one, two))
        for s, pose, i in zip(one, sub.poses, sub.scan_index):
            assert s.loss == pytest.approx(loss_vertex(rig.deform(pose, s.params), scans[i]), rel=1e-12)

    def test_directory_roundtrip(self, corpus, tmp_path):
        rig, scans, spec, c = corpus
        samples = [SkinningSample(c.learned_free + 0.01 * i, 0.1 * i, 5) for i in range(len(c.poses))]
        spec = CorpusSpec(snapshots_per_fit=4, cycles=2, perturb_copies=3, split=(0.8, 0.1, 0.1))
        save_corpus(tmp_path, c, samples, spec, extra={"schema": rig_schema(rig)})
        manifest, poses, S, lin = load_corpus(tmp_path)
        assert np.array_equal(poses, c.poses.astype(np.float32))
        assert np.allclose(S[3], c.learned_free + 0.03, atol=1e-6)
        assert manifest["n_samples"] == 96
        assert sum(len(v) for v in manifest["splits"].values()) == 96
        assert manifest["schema"]["pose_size"] == rig.layout.size
        assert len(manifest_hash(tmp_path)) == 64


def test_array_file_checks(tmp_path):
    write_array(tmp_path / "a.bin", np.arange(6.0).reshape(2, 3))
    assert read_array(tmp_path / "a.bin").tolist() == [[0, 1, 2], [3, 4, 5]]
    (tmp_path / "b.bin").write_bytes((tmp_path / "a.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_array(tmp_path / "b.bin")
