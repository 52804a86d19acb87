"""Minimal rigid-body world: kinematic grasping, ring-pass events, PBD thread.

The world is batched over n independent environments sharing one SceneSpec
(same object set, per-env poses). There is no cross-env coupling and no RNG
in stepping, so identical (state, inputs, dt) sequences produce bit-identical
states and envs may be partitioned across workers freely. Contacts are
simplified to a ground plane (rest on contact, velocity zeroed); grasping is
kinematic attachment, not friction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .so3 import (
    QUAT_IDENTITY,
    pose_compose,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_rotate,
)


class SimulationFault(RuntimeError):
    """World state went non-finite; aborts with diagnostics instead of propagating."""


@dataclass(frozen=True)
class Sphere:
    radius: float


@dataclass(frozen=True)
class Capsule:
    radius: float
    half_length: float


@dataclass(frozen=True)
class Box:
    half_extents: tuple[float, float, float]


@dataclass(frozen=True)
class CircularArc:
    """Suture-needle shape: an arc of `radius` spanning `arc_angle` radians,
    made of wire with circular cross-section `wire_radius`."""

    radius: float
    arc_angle: float
    wire_radius: float


CollisionShape = Sphere | Capsule | Box | CircularArc


def _validate_shape(shape: CollisionShape):
    dims = [v for v in vars(shape).values() if not isinstance(v, tuple)]
    for v in vars(shape).values():
        if isinstance(v, tuple):
            dims.extend(v)
    if any(d <= 0 for d in dims):
        raise ValueError(f"shape dimensions must be positive: {shape}")


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    shape: CollisionShape
    grasp_points: np.ndarray          # (k, 3) in body frame
    free: bool = True                 # subject to gravity when not grasped
    rest_height: float = 0.0          # frame-origin z when resting on the ground

    def __post_init__(self):
        _validate_shape(self.shape)
        object.__setattr__(self, "grasp_points", np.atleast_2d(np.asarray(self.grasp_points, dtype=np.float64)))


@dataclass(frozen=True)
class RingFixture:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(float(np.linalg.norm(n)) - 1.0) > 1e-9:
            raise ValueError("ring normal must be a unit vector")
        object.__setattr__(self, "normal", n)
        if self.radius <= 0:
            raise ValueError("ring radius must be positive")


@dataclass(frozen=True)
class RopeSpec:
    n_particles: int
    rest_length: float                # per-segment, meters
    iterations: int = 20
    damping: float = 0.995
    sor: float = 1.7                  # constraint over-relaxation factor
    # (particle index, object id or None for a fixed world anchor, point):
    # point is in the object's body frame, or a world point when id is None.
    attachments: tuple = ()

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("rope needs at least 2 particles")
        if self.rest_length <= 0:
            raise ValueError("rope rest_length must be positive")
        if not 0.0 < self.sor < 2.0:
            raise ValueError("sor must be in (0, 2)")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...] = ()
    ring: RingFixture | None = None
    rope: RopeSpec | None = None
    # Point whose swept segment triggers ring-pass events: (object id, body point).
    ring_probe: tuple[str, np.ndarray] | None = None
    arms: int = 1

    def object_index(self, obj_id: str) -> int:
        for i, spec in enumerate(self.objects):
            if spec.id == obj_id:
                return i
        raise KeyError(f"no object {obj_id!r} in scene")


def ring_pass_event(p0: np.ndarray, p1: np.ndarray, ring: RingFixture) -> np.ndarray:
    """Passed iff segment p0->p1 crosses the ring plane inside the radius.

    Batched over leading dims; returns bool array.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d0 = np.sum((p0 - ring.center) * ring.normal, axis=-1)
    d1 = np.sum((p1 - ring.center) * ring.normal, axis=-1)
    crossing = (d0 > 0.0) != (d1 > 0.0)
    denom = d0 - d1
    t = np.where(crossing, d0 / np.where(denom == 0.0, 1.0, denom), 0.0)
    x = p0 + t[..., None] * (p1 - p0)
    inside = np.sqrt(np.sum((x - ring.center) ** 2, axis=-1)) < ring.radius
    return crossing & inside


@dataclass
class GraspState:
    """Kinematic attachment captured at grasp time; `relative` never drifts."""

    arm: int
    object_id: str
    relative_pos: np.ndarray
    relative_quat: np.ndarray


class BatchWorld:
    """n independent copies of one scene, stepped together."""

    def __init__(self, scene: SceneSpec, n: int, config: dict):
        self.scene = scene
        self.n = n
        sim = config["sim"]
        self.dt_max = 0.05
        self.gravity = float(sim["gravity"])
        self.ground_z = float(sim["ground_z"])
        self.grasp_radius = float(sim["grasp_radius"])
        self.grasp_close_jaw = float(sim["grasp_close_jaw"])
        self.release_open_jaw = float(sim["release_open_jaw"])

        m = len(scene.objects)
        arms = scene.arms
        self.obj_pos = np.zeros((n, m, 3))
        self.obj_quat = np.tile(QUAT_IDENTITY, (n, m, 1))
        self.obj_vel = np.zeros((n, m, 3))
        self.att_obj = np.full((n, arms), -1, dtype=np.int64)
        self.att_rel_pos = np.zeros((n, arms, 3))
        self.att_rel_quat = np.tile(QUAT_IDENTITY, (n, arms, 1))
        self.att_stamp = np.zeros((n, arms), dtype=np.int64)
        self.step_count = 0

        if scene.rope is not None:
            k = scene.rope.n_particles
            self.rope_pos = np.zeros((n, k, 3))
            self.rope_vel = np.zeros((n, k, 3))
        else:
            self.rope_pos = None
            self.rope_vel = None

    # ------------------------------------------------------------------ reset

    def reset_envs(self, idx: np.ndarray, obj_pos: np.ndarray, obj_quat: np.ndarray,
                   rope_pos: np.ndarray | None = None):
        """Reset selected envs to the given object poses (and rope layout)."""
        self.obj_pos[idx] = obj_pos
        self.obj_quat[idx] = obj_quat
        self.obj_vel[idx] = 0.0
        self.att_obj[idx] = -1
        self.att_stamp[idx] = 0
        if self.rope_pos is not None:
            if rope_pos is None:
                raise ValueError("scene has a rope; reset needs rope positions")
            self.rope_pos[idx] = rope_pos
            self.rope_vel[idx] = 0.0

    # ------------------------------------------------------------------- step

    def step(self, gripper_pos: np.ndarray, gripper_quat: np.ndarray,
             jaw: np.ndarray, dt: float) -> dict:
        """Advance every env by dt. Returns event arrays
        {grasp (n,A), release (n,A), ring_pass (n,)}."""
        if not (0.0 < dt <= self.dt_max):
            raise ValueError(f"dt must be in (0, {self.dt_max}], got {dt}")
        scene = self.scene
        n, m, arms = self.n, len(scene.objects), scene.arms
        self.step_count += 1

        probe_before = self._probe_point() if scene.ring is not None else None

        grasp_ev = np.zeros((n, arms), dtype=bool)
        release_ev = np.zeros((n, arms), dtype=bool)

        # Releases first: an arm whose jaw opened past the threshold lets go.
        for a in range(arms):
            rel = (self.att_obj[:, a] >= 0) & (jaw[:, a] > self.release_open_jaw)
            release_ev[:, a] = rel
            self.att_obj[rel, a] = -1

        # Grasp attempts: closed jaw near some object's grasp point.
        if m > 0:
            for a in range(arms):
                trying = (self.att_obj[:, a] < 0) & (jaw[:, a] < self.grasp_close_jaw)
                if not np.any(trying):
                    continue
                best_d = np.full(n, np.inf)
                best_o = np.full(n, -1, dtype=np.int64)
                for o, spec in enumerate(scene.objects):
                    wp = self.obj_pos[:, o, None, :] + quat_rotate(
                        self.obj_quat[:, o, None, :], spec.grasp_points[None, :, :]
                    )
                    d = np.sqrt(np.sum((wp - gripper_pos[:, a, None, :]) ** 2, axis=-1))
                    dmin = np.min(d, axis=-1)
                    closer = dmin < best_d
                    best_d = np.where(closer, dmin, best_d)
                    best_o = np.where(closer, o, best_o)
                hit = trying & (best_d < self.grasp_radius)
                if np.any(hit):
                    o = best_o[hit]
                    gq_inv = quat_conj(gripper_quat[hit, a])
                    self.att_obj[hit, a] = o
                    self.att_rel_pos[hit, a] = quat_rotate(
                        gq_inv, self.obj_pos[hit, o] - gripper_pos[hit, a]
                    )
                    self.att_rel_quat[hit, a] = quat_mul(gq_inv, self.obj_quat[hit, o])
                    self.att_stamp[hit, a] = self.step_count
                    grasp_ev[:, a] = hit

        # Object update: held objects follow the earliest active grasp; free
        # objects integrate gravity (symplectic Euler) with a ground plane.
        for o, spec in enumerate(scene.objects):
            held = self.att_obj == o                                # (n, A)
            any_held = np.any(held, axis=1)
            # Earliest active grasp drives the pose; ties broken by arm index.
            key = np.where(held, self.att_stamp * arms + np.arange(arms), np.iinfo(np.int64).max)
            driver = np.argmin(key, axis=1)
            old_pos = self.obj_pos[:, o].copy()

            if np.any(any_held):
                ids = np.nonzero(any_held)[0]
                a = driver[ids]
                new_pos, new_quat = pose_compose(
                    gripper_pos[ids, a], gripper_quat[ids, a],
                    self.att_rel_pos[ids, a], self.att_rel_quat[ids, a],
                )
                self.obj_pos[ids, o] = new_pos
                self.obj_quat[ids, o] = new_quat
                self.obj_vel[ids, o] = (new_pos - old_pos[ids]) / dt

            if spec.free:
                free_ids = np.nonzero(~any_held)[0]
                if free_ids.size:
                    v = self.obj_vel[free_ids, o]
                    v = v + np.array([0.0, 0.0, -self.gravity]) * dt
                    p = self.obj_pos[free_ids, o] + v * dt
                    floor = self.ground_z + spec.rest_height
                    grounded = p[:, 2] < floor
                    p[grounded, 2] = floor
                    v[grounded] = 0.0
                    self.obj_pos[free_ids, o] = p
                    self.obj_vel[free_ids, o] = v

        if self.rope_pos is not None:
            self._step_rope(dt)

        ring_ev = np.zeros(n, dtype=bool)
        if scene.ring is not None and probe_before is not None:
            ring_ev = ring_pass_event(probe_before, self._probe_point(), scene.ring)

        if not (np.all(np.isfinite(self.obj_pos)) and
                (self.rope_pos is None or np.all(np.isfinite(self.rope_pos)))):
            raise SimulationFault(f"non-finite world state at step {self.step_count}")

        return {"grasp": grasp_ev, "release": release_ev, "ring_pass": ring_ev}

    def _probe_point(self) -> np.ndarray:
        obj_id, local = self.scene.ring_probe
        o = self.scene.object_index(obj_id)
        return self.obj_pos[:, o] + quat_rotate(self.obj_quat[:, o], local)

    def _anchor_points(self):
        """World positions of rope attachment anchors, (n, n_attach, 3)."""
        rope = self.scene.rope
        pts = []
        for (_, obj_id, local) in rope.attachments:
            local = np.asarray(local, dtype=np.float64)
            if obj_id is None:
                pts.append(np.broadcast_to(local, (self.n, 3)))
            else:
                o = self.scene.object_index(obj_id)
                pts.append(self.obj_pos[:, o] + quat_rotate(self.obj_quat[:, o], local))
        return pts

    def _step_rope(self, dt: float):
        rope = self.scene.rope
        x_old = self.rope_pos
        v = self.rope_vel * rope.damping
        v = v + np.array([0.0, 0.0, -self.gravity]) * dt
        x = x_old + v * dt

        attach_idx = [a[0] for a in rope.attachments]
        inv_mass = np.ones(rope.n_particles)
        inv_mass[attach_idx] = 0.0
        anchors = self._anchor_points()

        def correction(s: int) -> np.ndarray:
            d = x[:, s + 1] - x[:, s]
            length = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
            safe = np.where(length == 0.0, 1.0, length)
            return (length - rope.rest_length) * (d / safe)

        # Constraints are processed as mirror-image segment pairs from the
        # ends inward, Jacobi within a pair (both corrections computed before
        # either is applied, the shared middle particle averaged). The pair
        # operator commutes with mirroring, so a mirror-symmetric rope stays
        # symmetric to the bit instead of drifting with a sweep-direction
        # bias; over-relaxation (sor) tightens the per-step residual.
        k = rope.n_particles
        pairs = [(s, k - 2 - s) for s in range((k - 1 + 1) // 2)]
        omega = rope.sor
        for _ in range(rope.iterations):
            for (pi, _, _), anchor in zip(rope.attachments, anchors):
                x[:, pi] = anchor
            for a, b in pairs:
                segs = (a,) if a == b else (a, b)
                corrs = [correction(s) for s in segs]
                delta = np.zeros_like(x)
                for s, corr in zip(segs, corrs):
                    w0, w1 = inv_mass[s], inv_mass[s + 1]
                    wsum = w0 + w1
                    if wsum == 0.0:
                        continue
                    delta[:, s] += omega * (w0 / wsum) * corr
                    delta[:, s + 1] -= omega * (w1 / wsum) * corr
                if len(segs) == 2 and segs[1] == segs[0] + 1:
                    delta[:, segs[1]] *= 0.5
                x = x + delta

        self.rope_vel = (x - x_old) / dt
        self.rope_pos = x

    # -------------------------------------------------------------- observers

    def snapshot(self, env: int = 0) -> dict:
        """Immutable copy of one env's state for observers."""
        snap = {
            "objects": [
                {
                    "id": spec.id,
                    "position": self.obj_pos[env, o].tolist(),
                    "orientation": self.obj_quat[env, o].tolist(),
                }
                for o, spec in enumerate(self.scene.objects)
            ],
            "attachments": [
                {"arm": a, "object": self.scene.objects[int(self.att_obj[env, a])].id}
                for a in range(self.scene.arms)
                if self.att_obj[env, a] >= 0
            ],
        }
        if self.rope_pos is not None:
            snap["rope"] = self.rope_pos[env].tolist()
        return snap

    def grasp_state(self, env: int, arm: int) -> GraspState | None:
        o = int(self.att_obj[env, arm])
        if o < 0:
            return None
        return GraspState(
            arm=arm,
            object_id=self.scene.objects[o].id,
            relative_pos=self.att_rel_pos[env, arm].copy(),
            relative_quat=self.att_rel_quat[env, arm].copy(),
        )


def try_grasp(arm: int, gripper_pos: np.ndarray, gripper_quat: np.ndarray,
              jaw: float, world: BatchWorld, env: int = 0) -> GraspState | None:
    """Single-env grasp attempt; returns the captured GraspState or None.

    Mirrors the in-step grasp rule: jaw below the close threshold and some
    grasp point strictly inside the grasp radius.
    """
    if jaw >= world.grasp_close_jaw:
        return None
    best = (np.inf, -1)
    for o, spec in enumerate(world.scene.objects):
        wp = world.obj_pos[env, o] + quat_rotate(world.obj_quat[env, o], spec.grasp_points)
        d = float(np.min(np.sqrt(np.sum((wp - gripper_pos) ** 2, axis=-1))))
        if d < best[0]:
            best = (d, o)
    d, o = best
    if o < 0 or d >= world.grasp_radius:
        return None
    gq_inv = quat_conj(np.asarray(gripper_quat, dtype=np.float64))
    rel_pos = quat_rotate(gq_inv, world.obj_pos[env, o] - gripper_pos)
    rel_quat = quat_normalize(quat_mul(gq_inv, world.obj_quat[env, o]))
    world.att_obj[env, arm] = o
    world.att_rel_pos[env, arm] = rel_pos
    world.att_rel_quat[env, arm] = quat_mul(gq_inv, world.obj_quat[env, o])
    world.att_stamp[env, arm] = world.step_count
    return GraspState(arm, world.scene.objects[o].id, rel_pos, rel_quat)


def step_world(world: BatchWorld, gripper_pos: np.ndarray, gripper_quat: np.ndarray,
               jaw: np.ndarray, dt: float) -> dict:
    """Functional-style alias used by single-world callers (teleop, replay)."""
    return world.step(gripper_pos, gripper_quat, jaw, dt)
