import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from rigfit import autodiff as ad
from rigfit.rig import (IDENTITY_DOF, ExpressionBasis, Joint, Rig, RigError, Skeleton, SkinningWeights,
                        apply_expressions, apply_lbs, compose_skinning_matrices, count_free_parameters,
                        identity_pose, local_transforms, symmetry_classes)
from rigfit.synth import random_pose

from oracles import lbs_loop, rotation


def translate(t):
    m = np.eye(4)
    m[:3, 3] = t
    return m


def chain(n=2):
    joints = [Joint("j0", None)]
    for k in range(1, n):
        joints.append(Joint(f"j{k}", k - 1, translate([2.0, 0, 0])))
    return Skeleton(joints)


class TestSkeleton:
    def test_parent_must_precede(self):
        with pytest.raises(RigError):
            Skeleton([Joint("a", None), Joint("b", 2), Joint("c", 0)])

    def test_single_root(self):
        with pytest.raises(RigError):
            Skeleton([Joint("a", None), Joint("b", None)])

    def test_symmetry_must_be_involutive(self):
        with pytest.raises(RigError):
            Skeleton([Joint("a", None), Joint("b", 0, symmetry_partner=2), Joint("c", 0, symmetry_partner=None)])

    def test_limits_ordered(self):
        lim = np.tile([0.0, 1.0], (9, 1))
        lim[4] = (1.0, 0.0)
        with pytest.raises(RigError):
            Joint("a", None, limits=lim)

    def test_singular_bind_rejected(self):
        with pytest.raises(RigError):
            Skeleton([Joint("a", None, np.diag([1.0, 0.0, 1.0, 1.0]))])

    def test_toy_skeleton_invariants(self, toy_rig):
        sk = toy_rig.skeleton
        for k, j in enumerate(sk.joints):
            assert j.parent is None or j.parent < k
            assert sk.partner(sk.partner(k)) == k
            assert np.all(j.limits[:, 0] <= j.limits[:, 1])


class TestCompose:
    def test_identity_pose_gives_identity(self, toy_rig):
        M = compose_skinning_matrices(toy_rig.skeleton, identity_pose(toy_rig.skeleton.K))
        assert np.allclose(M, np.eye(4), atol=1e-14)

    def test_root_translation_propagates(self, toy_rig):
        pose = identity_pose(toy_rig.skeleton.K)
        pose[0, 3:6] = (0, 0, 1)
        M = compose_skinning_matrices(toy_rig.skeleton, pose)
        assert np.allclose(M, translate([0, 0, 1]), atol=1e-14)

    def test_two_joint_chain_by_hand(self):
        sk = chain(2)
        pose = identity_pose(2)
        pose[0, 2] = np.pi / 2
        pose[1, 3] = 1.0
        M = compose_skinning_matrices(sk, pose)
        # Rz(90) @ T(2) @ T(1) @ inv(T(2)) = Rz(90) @ T(1)
        want = np.array([[0.0, -1, 0, 0], [1, 0, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]])
        assert np.allclose(M[1], want, atol=1e-15)
        assert np.allclose(M[0][:3, :3], want[:3, :3], atol=1e-15)

    def test_euler_order_is_zyx(self, rng):
        full = identity_pose(1)
        full[0, :3] = rng.uniform(-1, 1, size=3)
        full[0, 6:] = rng.uniform(0.5, 1.5, size=3)
        Q = local_transforms(full)[0]
        R = Rotation.from_euler("ZYX", full[0, [2, 1, 0]]).as_matrix()
        assert np.allclose(Q[:3, :3], R @ np.diag(full[0, 6:]), atol=1e-14)

    def test_gradient_matches_finite_differences(self, small_rig, rng):
        sk = small_rig.skeleton
        full = small_rig.layout.unpack(random_pose(small_rig, rng))
        C = rng.normal(size=(sk.K, 4, 4))
        err = ad.finite_difference_check(lambda p: (compose_skinning_matrices(sk, p) * C).sum(), full)
        assert err < 1e-6


class TestPoseLayout:
    def test_no_mask_no_symmetry_counts_9k(self):
        sk = chain(4)
        w = SkinningWeights(1, 4, [[0, 0]], [0], [1.0])
        assert count_free_parameters(sk, w) == (36, 1)

    def test_toy_counts(self, toy_rig):
        # 12 joints with all 9 DOFs free; the 3 mirrored pairs share slots -> 12 * 9 - 3 * 9 = 81
        assert toy_rig.layout.size == 81

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_pack_unpack_roundtrip(self, seed):
        rig = _cached_rig()
        p = np.random.default_rng(seed).normal(size=rig.layout.size)
        assert np.array_equal(rig.layout.pack(rig.layout.unpack(p)), p)
        full = rig.layout.unpack(p)
        assert np.array_equal(full[~rig.layout.mask], np.broadcast_to(IDENTITY_DOF, full.shape)[~rig.layout.mask])

    def test_identity_packs_to_identity(self, toy_rig):
        assert np.array_equal(toy_rig.layout.unpack(toy_rig.layout.identity()), identity_pose(toy_rig.skeleton.K))

    def test_mirrored_joints_are_mirror_images(self, toy_rig, rng):
        sk = toy_rig.skeleton
        full = toy_rig.layout.unpack(random_pose(toy_rig, rng))
        Q = local_transforms(full)
        F = np.diag([-1.0, 1, 1, 1])
        for k, j in enumerate(sk.joints):
            if j.symmetry_partner is not None:
                assert np.allclose(Q[j.symmetry_partner], F @ Q[k] @ F, atol=1e-14)

    def test_mirrored_pose_gives_mirrored_mesh(self, toy_rig, rng):
        p = random_pose(toy_rig, rng, root_scale=0.3)
        v = toy_rig.deform(p)
        vm = toy_rig.deform(toy_rig.layout.mirror(p))
        assert np.abs(vm - (v * [-1, 1, 1])[toy_rig.vertex_mirror]).max() < 1e-9


_RIG = []


def _cached_rig():
    if not _RIG:
        from rigfit.synth import make_toy_rig
        _RIG.append(make_toy_rig())
    return _RIG[0]


class TestWeights:
    def test_hand_counted_classes(self):
        # v0 on the midline, v1 <-> v2; joint 0 midline, 1 <-> 2. Orbits of the 9 cells:
        # {00}, {01,02}, {10,20}, {11,22}, {12,21} -> 5 classes
        cells, cls = symmetry_classes(np.ones((3, 3), bool), np.array([0, 2, 1]), np.array([0, 2, 1]))
        assert cls.max() + 1 == 5
        by = {tuple(c): int(k) for c, k in zip(cells, cls)}
        assert by[(0, 1)] == by[(0, 2)] and by[(1, 1)] == by[(2, 2)] and by[(1, 2)] == by[(2, 1)]
        assert by[(1, 1)] != by[(1, 2)]

    def test_outside_mask_is_zero(self, toy_rig):
        dense = toy_rig.weights.expand()
        assert np.all(dense[~toy_rig.weights.support_mask] == 0.0)

    def test_mirrored_vertices_share_rows(self, toy_rig):
        dense = toy_rig.weights.expand()
        jm = [toy_rig.skeleton.partner(k) for k in range(toy_rig.skeleton.K)]
        assert np.allclose(dense[toy_rig.vertex_mirror][:, jm], dense, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, seed):
        w = _cached_rig().weights
        free = np.random.default_rng(seed).uniform(0.01, 1.0, size=w.n_classes)
        assert np.allclose(w.expand(free).sum(1), 1.0, atol=1e-6)

    def test_empty_support_rejected(self):
        with pytest.raises(RigError):
            SkinningWeights(2, 1, [[0, 0]], [0], [1.0])

    def test_param_count_must_match(self):
        with pytest.raises(RigError):
            SkinningWeights(1, 1, [[0, 0]], [0], [1.0, 2.0])

    def test_expand_gradient(self, small_rig, rng):
        w = small_rig.weights
        C = rng.normal(size=(w.N, w.K))
        err = ad.finite_difference_check(lambda f: (w.expand(f) * C).sum(), w.free_params + 0.1)
        assert err < 1e-5


class TestLBS:
    def test_identity_matrices_reproduce_rest(self, toy_rig):
        v = apply_lbs(toy_rig.mesh, toy_rig.weights.expand(), np.tile(np.eye(4), (toy_rig.skeleton.K, 1, 1)))
        assert np.allclose(v, toy_rig.mesh.vertices, atol=1e-14)

    def test_half_weights_average_translations(self):
        m = np.stack([translate([1.0, 0, 0]), translate([0, 3.0, 0])])
        v = apply_lbs(np.zeros((1, 3)), [[0.5, 0.5]], m)
        assert np.allclose(v, [[0.5, 1.5, 0]], atol=1e-15)

    def test_random_pose_vs_loop(self, toy_rig, rng):
        M = compose_skinning_matrices(toy_rig.skeleton, toy_rig.layout.unpack(random_pose(toy_rig, rng)))
        W = toy_rig.weights.expand()
        got = apply_lbs(toy_rig.mesh, W, M)
        assert np.abs(got - lbs_loop(toy_rig.mesh.vertices, W, M)).max() < 1e-12

    def test_rigid_equivariance(self, toy_rig, rng):
        M = compose_skinning_matrices(toy_rig.skeleton, toy_rig.layout.unpack(random_pose(toy_rig, rng)))
        W = toy_rig.weights.expand()
        T = np.eye(4)
        T[:3, :3], T[:3, 3] = rotation(rng), rng.normal(size=3)
        a = apply_lbs(toy_rig.mesh, W, T @ M)
        b = apply_lbs(toy_rig.mesh, W, M) @ T[:3, :3].T + T[:3, 3]
        assert np.abs(a - b).max() < 1e-10

    def test_shape_mismatch(self, toy_rig):
        with pytest.raises(RigError):
            apply_lbs(toy_rig.mesh, np.ones((3, 2)), np.tile(np.eye(4), (2, 1, 1)))

    def test_deform_gradients(self, small_rig, rng):
        pose = random_pose(small_rig, rng)
        C = rng.normal(size=(small_rig.mesh.n_vertices, 3))
        coeffs = rng.uniform(0, 1, size=small_rig.n_expressions)
        f = small_rig.weights.free_params
        assert ad.finite_difference_check(lambda p: (small_rig.deform(p, None, coeffs) * C).sum(), pose) < 1e-6
        assert ad.finite_difference_check(lambda w: (small_rig.deform(pose, w) * C).sum(), f) < 1e-5
        assert ad.finite_difference_check(lambda c: (small_rig.deform(pose, None, c) * C).sum(), coeffs) < 1e-8


class TestExpressions:
    def basis(self, rng, E=2, N=5):
        return ExpressionBasis(rng.normal(size=(E, N, 3)))

    def test_zero_coeffs(self, rng):
        b, v = self.basis(rng), rng.normal(size=(5, 3))
        assert np.array_equal(apply_expressions(v, b, np.zeros(2)), v)

    def test_unit_coeff(self, rng):
        b, v = self.basis(rng), rng.normal(size=(5, 3))
        assert np.allclose(apply_expressions(v, b, [1.0, 0.0]), v + b.deltas[0], atol=1e-15)

    def test_superposition_vs_loop(self, rng):
        b, v = self.basis(rng), rng.normal(size=(5, 3))
        want = v.copy()
        for n in range(5):
            for j in range(3):
                want[n, j] += 0.5 * b.deltas[0, n, j] + 0.5 * b.deltas[1, n, j]
        assert np.abs(apply_expressions(v, b, [0.5, 0.5]) - want).max() < 1e-15

    def test_shape_mismatch(self, rng):
        with pytest.raises(RigError):
            apply_expressions(np.zeros((5, 3)), self.basis(rng), np.zeros(3))

    def test_rig_rejects_wrong_basis(self, toy_rig, rng):
        with pytest.raises(RigError):
            Rig(toy_rig.mesh, toy_rig.skeleton, toy_rig.weights, ExpressionBasis(np.zeros((1, 3, 3))))
