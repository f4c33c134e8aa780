"""Procedural two-character base interactions.

Stand-ins for captured duet motion: four parameterized generators (circle,
hold, lean, lift) on a small 7-joint desk skeleton. Each generator is
deterministic for a fixed (kind, seed), produces smooth sinusoidal body
movement with rigid bones (exact template lengths), and keeps its declared
contact joint pairs within a kind-specific distance threshold by aiming the
reaching hand at its target every frame.

Skeleton roles are looked up by joint name, so alternative proportions work
as long as the seven role names exist.
"""

from __future__ import annotations

import numpy as np

from .core import BoneScaleVector, InteractionClip, Motion, Skeleton
from .errors import ConfigError

DESK_JOINT_NAMES = ("root", "spine", "head", "r_shoulder", "r_hand", "l_shoulder", "l_hand")
DESK_PARENTS = (-1, 0, 1, 1, 3, 1, 5)
DESK_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.0, 0.25, 0.0),
    (0.0, 0.20, 0.0),
    (0.18, 0.12, 0.0),
    (0.30, 0.0, 0.0),
    (-0.18, 0.12, 0.0),
    (-0.30, 0.0, 0.0),
)

GENERATOR_KINDS = ("circle", "hold", "lean", "lift")

# contact thresholds are generator contracts (meters)
CONTACT_THRESHOLDS = {"circle": 0.15, "hold": 0.15, "lean": 0.15, "lift": 0.25}
CONTACT_MIN_FRACTION = 0.8

DEFAULT_FRAME_RATE = 30.0


def desk_skeleton() -> Skeleton:
    return Skeleton(DESK_JOINT_NAMES, np.array(DESK_PARENTS), np.array(DESK_OFFSETS))


def desk_upper_body_bones(skeleton: Skeleton = None) -> tuple:
    """Bone indices of shoulders and hands, the single-bone scaling targets."""
    sk = skeleton if skeleton is not None else desk_skeleton()
    roles = _role_indices(sk)
    joints = ("r_shoulder", "r_hand", "l_shoulder", "l_hand")
    return tuple(int(sk.bone_of_child[roles[j]]) for j in joints)


def _role_indices(skeleton: Skeleton) -> dict:
    idx = {}
    for name in DESK_JOINT_NAMES:
        if name not in skeleton.joint_names:
            raise ConfigError(f"skeleton lacks required joint {name!r}")
        idx[name] = skeleton.joint_names.index(name)
    return idx


def _rot_y(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    r = np.zeros(theta.shape + (3, 3))
    r[..., 0, 0] = c
    r[..., 0, 2] = s
    r[..., 1, 1] = 1.0
    r[..., 2, 0] = -s
    r[..., 2, 2] = c
    return r


def _rot_z(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    r = np.zeros(theta.shape + (3, 3))
    r[..., 0, 0] = c
    r[..., 0, 1] = -s
    r[..., 1, 0] = s
    r[..., 1, 1] = c
    r[..., 2, 2] = 1.0
    return r


def _pose_body(skeleton: Skeleton, root: np.ndarray, yaw: np.ndarray, tilt: np.ndarray) -> np.ndarray:
    """Rigid upper body: every offset rotated by R_y(yaw) R_z(tilt)."""
    t = root.shape[0]
    rot = _rot_y(yaw) @ _rot_z(tilt)
    frames = np.empty((t, skeleton.n_joints, 3))
    frames[:, skeleton.root] = root
    for j in skeleton.topo_order[1:]:
        p = skeleton.parents[j]
        frames[:, j] = frames[:, p] + np.einsum("tij,j->ti", rot, skeleton.template_offsets[j])
    return frames


def _track_hand(frames: np.ndarray, skeleton: Skeleton, hand: int, target: np.ndarray) -> None:
    """Point the hand bone from its shoulder toward target, keeping its length."""
    p = skeleton.parents[hand]
    length = skeleton.template_bone_lengths[skeleton.bone_of_child[hand]]
    v = target - frames[:, p]
    n = np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-9)
    frames[:, hand] = frames[:, p] + length * v / n


def _reach_shift(frames: np.ndarray, skeleton: Skeleton, hands: tuple, targets: tuple) -> np.ndarray:
    """Translate the whole body so frame-0 shoulder-target gaps equal arm length."""
    shift = np.zeros(3)
    for hand, target in zip(hands, targets):
        p = skeleton.parents[hand]
        length = skeleton.template_bone_lengths[skeleton.bone_of_child[hand]]
        v = target[0] - frames[0, p]
        d = np.linalg.norm(v)
        shift += (d - length) * v / max(d, 1e-9) / len(hands)
    return frames + shift


def _sway(rng, t_axis, amp_lo, amp_hi):
    amp = rng.uniform(amp_lo, amp_hi)
    freq = rng.uniform(1.0, 2.5)
    phase = rng.uniform(0.0, 2 * np.pi)
    return amp * np.sin(freq * t_axis + phase)


def _base_height(rng):
    return rng.uniform(0.55, 0.65)


def _gen_hold(skeleton, t, rng):
    """A's right hand rests on B's spine while both sway in place."""
    roles = _role_indices(skeleton)
    ts = 2 * np.pi * np.arange(t) / t
    zeros = np.zeros(t)
    h = _base_height(rng)

    root_b = np.stack([_sway(rng, ts, 0.01, 0.03), h + _sway(rng, ts, 0.005, 0.015), _sway(rng, ts, 0.01, 0.03)], 1)
    fb = _pose_body(skeleton, root_b, zeros, _sway(rng, ts, 0.02, 0.06))

    root_a = np.stack([-0.45 + _sway(rng, ts, 0.005, 0.02), h + _sway(rng, ts, 0.005, 0.015), _sway(rng, ts, 0.005, 0.02)], 1)
    fa = _pose_body(skeleton, root_a, zeros, _sway(rng, ts, 0.02, 0.05))
    target = fb[:, roles["spine"]]
    fa = _reach_shift(fa, skeleton, (roles["r_hand"],), (target,))
    _track_hand(fa, skeleton, roles["r_hand"], target)
    return fa, fb, ((roles["r_hand"], roles["spine"]),)


def _gen_circle(skeleton, t, rng):
    """Both characters orbit a common center holding right hands.

    A static frame-0 reach correction would break as the pair rotates, so
    instead the orbit radius is solved (bisection) to make the rest reach
    equal the arm length; the co-rotating geometry then keeps it there.
    """
    roles = _role_indices(skeleton)
    ts = 2 * np.pi * np.arange(t) / t
    h = _base_height(rng)
    cycles = rng.uniform(0.5, 1.0)
    phi0 = rng.uniform(0.0, 2 * np.pi)
    theta_a = phi0 + cycles * ts
    theta_b = theta_a + np.pi
    bob_a, bob_b = _sway(rng, ts, 0.005, 0.015), _sway(rng, ts, 0.005, 0.015)
    tilt_a, tilt_b = _sway(rng, ts, 0.01, 0.03), _sway(rng, ts, 0.01, 0.03)

    def orbit_body(theta, bob, tilt, radius):
        root = np.stack([radius * np.cos(theta), h + bob, radius * np.sin(theta)], 1)
        return _pose_body(skeleton, root, np.pi - theta, tilt)

    arm = skeleton.template_bone_lengths[skeleton.bone_of_child[roles["r_hand"]]]

    def reach_gap(radius):
        fa = orbit_body(theta_a[:1], bob_a[:1], tilt_a[:1], radius)
        fb = orbit_body(theta_b[:1], bob_b[:1], tilt_b[:1], radius)
        sh = fa[0, skeleton.parents[roles["r_hand"]]]
        return float(np.linalg.norm(fb[0, roles["r_hand"]] - sh)) - arm

    lo, hi = 0.3, 1.2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if reach_gap(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    radius = 0.5 * (lo + hi)

    fa = orbit_body(theta_a, bob_a, tilt_a, radius)
    fb = orbit_body(theta_b, bob_b, tilt_b, radius)
    target = fb[:, roles["r_hand"]]
    _track_hand(fa, skeleton, roles["r_hand"], target)
    return fa, fb, ((roles["r_hand"], roles["r_hand"]),)


def _gen_lean(skeleton, t, rng):
    """B tilts toward A; A's right hand supports B's near shoulder."""
    roles = _role_indices(skeleton)
    ts = 2 * np.pi * np.arange(t) / t
    zeros = np.zeros(t)
    h = _base_height(rng)

    tilt_b = rng.uniform(0.15, 0.25) + _sway(rng, ts, 0.04, 0.10)
    root_b = np.stack([_sway(rng, ts, 0.005, 0.02), h + _sway(rng, ts, 0.005, 0.01), _sway(rng, ts, 0.005, 0.02)], 1)
    fb = _pose_body(skeleton, root_b, zeros, tilt_b)

    root_a = np.stack([-0.5 + _sway(rng, ts, 0.005, 0.02), h + _sway(rng, ts, 0.005, 0.01), _sway(rng, ts, 0.005, 0.02)], 1)
    fa = _pose_body(skeleton, root_a, zeros, _sway(rng, ts, 0.01, 0.04))
    target = fb[:, roles["l_shoulder"]]
    fa = _reach_shift(fa, skeleton, (roles["r_hand"],), (target,))
    _track_hand(fa, skeleton, roles["r_hand"], target)
    return fa, fb, ((roles["r_hand"], roles["l_shoulder"]),)


def _gen_lift(skeleton, t, rng):
    """A grips B's hips with both hands while B bobs vertically."""
    roles = _role_indices(skeleton)
    ts = 2 * np.pi * np.arange(t) / t
    zeros = np.zeros(t)
    h = _base_height(rng)

    bob = rng.uniform(0.04, 0.08) * 0.5 * (1.0 + np.sin(rng.uniform(1.0, 2.0) * ts + rng.uniform(0, 2 * np.pi)))
    root_b = np.stack([_sway(rng, ts, 0.005, 0.015), h + bob, _sway(rng, ts, 0.005, 0.015)], 1)
    fb = _pose_body(skeleton, root_b, zeros, _sway(rng, ts, 0.01, 0.03))

    root_a = np.stack([-0.3 + _sway(rng, ts, 0.003, 0.01), h + _sway(rng, ts, 0.003, 0.01), _sway(rng, ts, 0.003, 0.01)], 1)
    # arms fore-aft (yaw 90 deg) so both hands flank B's root
    fa = _pose_body(skeleton, root_a, zeros + np.pi / 2, _sway(rng, ts, 0.01, 0.03))
    grip_y = rng.uniform(0.10, 0.14)
    tr = fb[:, roles["root"]] + np.array([0.0, grip_y, -0.06])
    tl = fb[:, roles["root"]] + np.array([0.0, grip_y, 0.06])
    fa = _reach_shift(fa, skeleton, (roles["r_hand"], roles["l_hand"]), (tr, tl))
    _track_hand(fa, skeleton, roles["r_hand"], tr)
    _track_hand(fa, skeleton, roles["l_hand"], tl)
    return fa, fb, ((roles["r_hand"], roles["root"]), (roles["l_hand"], roles["root"]))


_GENERATORS = {
    "circle": _gen_circle,
    "hold": _gen_hold,
    "lean": _gen_lean,
    "lift": _gen_lift,
}


def gen_base_clip(kind: str, skeleton: Skeleton = None, t: int = 64, seed: int = 0) -> InteractionClip:
    """Generate one template interaction clip; bitwise deterministic in (kind, seed)."""
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown interaction kind {kind!r}; known: {sorted(_GENERATORS)}")
    sk = skeleton if skeleton is not None else desk_skeleton()
    rng = np.random.default_rng(np.random.SeedSequence([hash_kind(kind), int(seed)]))
    fa, fb, key_pairs = _GENERATORS[kind](sk, int(t), rng)
    return InteractionClip(
        skeleton_A=sk,
        skeleton_B=sk,
        motion_A=Motion(fa, DEFAULT_FRAME_RATE),
        motion_B=Motion(fb, DEFAULT_FRAME_RATE),
        interaction_kind=kind,
        scale_B=BoneScaleVector.ones(sk.n_bones),
        key_pairs=key_pairs,
    )


def hash_kind(kind: str) -> int:
    """Stable small integer per kind (python's hash() is salted per process)."""
    return int.from_bytes(kind.encode(), "little") % (2**31)


def key_pair_distances(clip: InteractionClip) -> np.ndarray:
    """[T, n_pairs] distances between each declared contact pair."""
    out = []
    for a, b in clip.key_pairs:
        out.append(np.linalg.norm(clip.motion_A.frames[:, a] - clip.motion_B.frames[:, b], axis=-1))
    return np.stack(out, axis=1) if out else np.zeros((clip.n_frames, 0))


def contact_fraction(clip: InteractionClip, threshold: float) -> float:
    """Fraction of frames where every declared contact pair is within threshold."""
    d = key_pair_distances(clip)
    if d.shape[1] == 0:
        return 1.0
    return float(np.mean(np.all(d <= threshold, axis=1)))
