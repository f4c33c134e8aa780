"""Skeleton and motion data model.

Conventions used throughout the package:

- joint positions are world-space meters, float64, shaped [T, N, 3]
- a skeleton with N joints has n = N - 1 bones; bones are indexed by their
  child joint, ascending
- all data objects are immutable after construction (arrays are marked
  read-only), so they are safe to share across worker processes
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._compensated import add_exact, sub_with_residual
from .errors import DomainError, ShapeError

ROOT_PARENT = -1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Skeleton:
    """Joint tree with rest-pose offsets.

    Attributes
    ----------
    joint_names : tuple[str]
        One name per joint, length N.
    parents : np.ndarray
        Parent joint index per joint, shape [N]; the single root has -1.
    template_offsets : np.ndarray
        Rest offset from parent in meters, shape [N, 3]. Every non-root
        offset must have strictly positive length.
    """

    joint_names: tuple
    parents: np.ndarray
    template_offsets: np.ndarray

    def __post_init__(self):
        names = tuple(str(s) for s in self.joint_names)
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.template_offsets, dtype=np.float64)
        n_joints = len(names)
        if parents.shape != (n_joints,):
            raise ShapeError(f"parents shape {parents.shape} != ({n_joints},)")
        if offsets.shape != (n_joints, 3):
            raise ShapeError(f"template_offsets shape {offsets.shape} != ({n_joints}, 3)")
        roots = np.flatnonzero(parents == ROOT_PARENT)
        if len(roots) != 1:
            raise DomainError(f"expected exactly one root, found {len(roots)}")
        if np.any((parents < ROOT_PARENT) | (parents >= n_joints)):
            raise DomainError("parent index out of range")
        order = _topological_order(parents, int(roots[0]))
        if len(order) != n_joints:
            raise DomainError("parents do not form a single connected tree")
        bones = np.flatnonzero(parents != ROOT_PARENT)
        lengths = np.linalg.norm(offsets[bones], axis=1)
        if np.any(~np.isfinite(offsets)):
            raise DomainError("template offsets must be finite")
        if np.any(lengths <= 0.0):
            raise DomainError("every non-root template offset needs positive length")
        object.__setattr__(self, "joint_names", names)
        object.__setattr__(self, "parents", _readonly(parents))
        object.__setattr__(self, "template_offsets", _readonly(offsets))
        object.__setattr__(self, "_root", int(roots[0]))
        object.__setattr__(self, "_topo_order", _readonly(np.asarray(order, dtype=np.int64)))
        object.__setattr__(self, "_bones", _readonly(bones))
        object.__setattr__(self, "_template_bone_lengths", _readonly(lengths))
        bone_of_child = np.full(n_joints, -1, dtype=np.int64)
        bone_of_child[bones] = np.arange(len(bones))
        object.__setattr__(self, "_bone_of_child", _readonly(bone_of_child))

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_bones(self) -> int:
        return self.n_joints - 1

    @property
    def root(self) -> int:
        return self._root

    @property
    def topo_order(self) -> np.ndarray:
        """Joint indices ordered root first, every parent before its children."""
        return self._topo_order

    @property
    def bones(self) -> np.ndarray:
        """Child joint index of each bone, ascending."""
        return self._bones

    @property
    def bone_of_child(self) -> np.ndarray:
        """Bone index for each joint (-1 for the root)."""
        return self._bone_of_child

    @property
    def template_bone_lengths(self) -> np.ndarray:
        return self._template_bone_lengths

    def content_hash(self) -> str:
        """Stable hash of names/topology/offsets, used to pin checkpoints."""
        h = hashlib.sha256()
        h.update("|".join(self.joint_names).encode())
        h.update(self.parents.tobytes())
        h.update(self.template_offsets.tobytes())
        return h.hexdigest()


def _topological_order(parents: np.ndarray, root: int) -> list:
    children = [[] for _ in range(len(parents))]
    for j, p in enumerate(parents):
        if p != ROOT_PARENT:
            children[p].append(j)
    order, stack = [], [root]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    return order


@dataclass(frozen=True)
class BoneScaleVector:
    """Per-bone multiplicative scales relative to the template skeleton."""

    scales: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=np.float64)
        if s.ndim != 1:
            raise ShapeError("scales must be a 1-d vector")
        if np.any(~np.isfinite(s)) or np.any(s <= 0.0):
            raise DomainError("bone scales must be finite and > 0")
        object.__setattr__(self, "scales", _readonly(s))

    @classmethod
    def ones(cls, n_bones: int) -> "BoneScaleVector":
        return cls(np.ones(n_bones))

    @classmethod
    def uniform(cls, n_bones: int, scale: float) -> "BoneScaleVector":
        return cls(np.full(n_bones, float(scale)))

    @classmethod
    def single_bone(cls, n_bones: int, bone: int, scale: float) -> "BoneScaleVector":
        s = np.ones(n_bones)
        s[bone] = float(scale)
        return cls(s)

    @property
    def n_bones(self) -> int:
        return len(self.scales)

    @property
    def is_template(self) -> bool:
        return bool(np.all(self.scales == 1.0))

    def label(self) -> str:
        """Canonical human-readable label, stable across runs."""
        s = self.scales
        if self.is_template:
            return "template"
        if np.all(s == s[0]):
            return f"uniform-{s[0]:.2f}"
        off = np.flatnonzero(s != 1.0)
        if len(off) == 1:
            return f"bone{off[0]}-{s[off[0]]:.2f}"
        return "custom-" + hashlib.sha256(s.tobytes()).hexdigest()[:8]


@dataclass(frozen=True)
class Motion:
    """World-space joint-position sequence for one character."""

    frames: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise ShapeError(f"frames must be [T, N, 3], got {f.shape}")
        if f.shape[0] < 2:
            raise DomainError("a motion needs at least 2 frames")
        if not np.all(np.isfinite(f)):
            raise DomainError("motion coordinates must be finite")
        if not self.frame_rate > 0:
            raise DomainError("frame_rate must be positive")
        object.__setattr__(self, "frames", _readonly(f))
        object.__setattr__(self, "frame_rate", float(self.frame_rate))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MotionDelta:
    """Per-frame, per-joint positional offsets from a reference motion.

    ``residual`` carries the float64 rounding error of the subtraction that
    produced ``deltas``, so ``add_delta`` can reconstruct the original
    motion bit-for-bit. It is zero for hand-built deltas.
    """

    deltas: np.ndarray
    residual: np.ndarray = None

    def __post_init__(self):
        d = np.asarray(self.deltas, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ShapeError(f"deltas must be [T, N, 3], got {d.shape}")
        r = self.residual
        r = np.zeros_like(d) if r is None else np.asarray(r, dtype=np.float64)
        if r.shape != d.shape:
            raise ShapeError("residual shape must match deltas")
        object.__setattr__(self, "deltas", _readonly(d))
        object.__setattr__(self, "residual", _readonly(r))


@dataclass(frozen=True)
class InteractionClip:
    """Paired motions of characters A and B plus contact metadata.

    ``scale_B`` records how B's bones are scaled relative to the shared
    template skeleton; both ``skeleton_A`` and ``skeleton_B`` store template
    geometry.  ``key_pairs`` lists (joint on A, joint on B) contact pairs.
    """

    skeleton_A: Skeleton
    skeleton_B: Skeleton
    motion_A: Motion
    motion_B: Motion
    interaction_kind: str
    scale_B: BoneScaleVector
    key_pairs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.motion_A.n_frames != self.motion_B.n_frames:
            raise ShapeError("motion_A and motion_B must share T")
        if self.motion_A.frame_rate != self.motion_B.frame_rate:
            raise DomainError("motion_A and motion_B must share frame_rate")
        if self.motion_A.n_joints != self.skeleton_A.n_joints:
            raise ShapeError("motion_A joint count != skeleton_A")
        if self.motion_B.n_joints != self.skeleton_B.n_joints:
            raise ShapeError("motion_B joint count != skeleton_B")
        if self.scale_B.n_bones != self.skeleton_B.n_bones:
            raise ShapeError("scale_B length != skeleton_B bone count")
        pairs = tuple((int(a), int(b)) for a, b in self.key_pairs)
        for a, b in pairs:
            if not (0 <= a < self.skeleton_A.n_joints and 0 <= b < self.skeleton_B.n_joints):
                raise DomainError(f"key pair ({a}, {b}) out of range")
        object.__setattr__(self, "key_pairs", pairs)

    @property
    def n_frames(self) -> int:
        return self.motion_A.n_frames

    @property
    def is_template(self) -> bool:
        return self.scale_B.is_template

    @property
    def clip_id(self) -> str:
        return f"{self.interaction_kind}:{self.scale_B.label()}"


def bone_lengths(frames: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Euclidean bone lengths, ordered by child joint ascending.

    Accepts a single frame [N, 3] or any leading batch shape [..., N, 3]
    and returns [..., n].
    """
    f = np.asarray(frames, dtype=np.float64)
    if f.shape[-2] != skeleton.n_joints or f.shape[-1] != 3:
        raise ShapeError(f"frame shape {f.shape} does not match skeleton N={skeleton.n_joints}")
    child = f[..., skeleton.bones, :]
    parent = f[..., skeleton.parents[skeleton.bones], :]
    return np.linalg.norm(child - parent, axis=-1)


def apply_bone_scales(motion: Motion, skeleton: Skeleton, scales: BoneScaleVector) -> Motion:
    """Re-pose a motion on a scaled skeleton.

    Per frame, joints are traversed root to leaf; each child is placed at
    ``new_parent + scale * (old_child - old_parent)``, so bone directions
    are preserved exactly and the root trajectory is unchanged.
    """
    if scales.n_bones != skeleton.n_bones:
        raise ShapeError("scale vector length != bone count")
    if motion.n_joints != skeleton.n_joints:
        raise ShapeError("motion joint count != skeleton")
    if scales.is_template:
        return motion
    old = motion.frames
    new = np.empty_like(old)
    new[:, skeleton.root] = old[:, skeleton.root]
    parents = skeleton.parents
    s = scales.scales
    for j in skeleton.topo_order[1:]:
        p = parents[j]
        new[:, j] = new[:, p] + s[skeleton.bone_of_child[j]] * (old[:, j] - old[:, p])
    return Motion(new, motion.frame_rate)


def delta(motion: Motion, template: Motion) -> MotionDelta:
    """Elementwise offsets of ``motion`` from ``template``."""
    if motion.frames.shape != template.frames.shape:
        raise ShapeError("motion and template shapes differ")
    d, r = sub_with_residual(motion.frames, template.frames)
    return MotionDelta(d, r)


def add_delta(template: Motion, d: MotionDelta) -> Motion:
    """Inverse of :func:`delta`: bit-exact reconstruction of the motion."""
    if d.deltas.shape != template.frames.shape:
        raise ShapeError("delta and template shapes differ")
    return Motion(add_exact(template.frames, d.deltas, d.residual), template.frame_rate)


def adjacency(skeleton: Skeleton) -> np.ndarray:
    """Symmetric 0/1 joint adjacency with zero diagonal."""
    n = skeleton.n_joints
    a = np.zeros((n, n), dtype=np.int64)
    for j in skeleton.bones:
        p = skeleton.parents[j]
        a[j, p] = 1
        a[p, j] = 1
    return a


def velocity(motion: Motion) -> np.ndarray:
    """Forward differences frame[t+1] - frame[t], shape [T-1, N, 3]."""
    if motion.n_frames < 2:
        raise DomainError("velocity needs T >= 2")
    f = motion.frames
    return f[1:] - f[:-1]
