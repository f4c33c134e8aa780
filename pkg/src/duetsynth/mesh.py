"""Optimization-based interaction retargeting.

The interaction between two characters is encoded by a dense mesh joining
every joint of A to every joint of B (plus both skeletons' bone edges).
Retargeting deforms a source clip so that character B attains target bone
lengths while the per-frame Laplacian coordinates of that mesh, and the
frame-to-frame dynamics, stay as close to the source as possible.

The state being optimized is the stacked joint-position tensor
X [T, N_A + N_B, 3] (A's joints first). The energy is

    E(X) = w_L * sum_t ||L^t X^t - delta_src^t||^2
         + w_B * sum_t ||bone_len(X^t) - target_len||^2   (both characters)
         + w_T * sum_t ||(X^{t+1} - X^t) - (S^{t+1} - S^t)||^2

with L^t = I - W^t and W^t the row-normalized mesh weights computed on
source frame t. The gradient is analytic; descent uses backtracking line
search, so the energy trace over accepted iterates is non-increasing. A
final per-frame parent-chain projection makes bone lengths match their
targets exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BoneScaleVector,
    InteractionClip,
    Motion,
    Skeleton,
    apply_bone_scales,
    bone_lengths,
)
from .errors import DivergenceError, DomainError, ShapeError

DIST_CLAMP = 1e-4


@dataclass(frozen=True)
class InteractionMesh:
    """Dense inter-character graph with per-frame Laplacian weights.

    ``weights`` is [T, V, V], V = n_a + n_b, row-normalized over each
    vertex's neighbors (all joints of the other character plus skeletal
    neighbors on its own character); zero elsewhere.
    """

    n_a: int
    n_b: int
    weights: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.n_a + self.n_b

    @property
    def n_frames(self) -> int:
        return self.weights.shape[0]


def _mesh_edges(skeleton_A: Skeleton, skeleton_B: Skeleton) -> np.ndarray:
    """0/1 neighbor mask [V, V]: complete bipartite cross edges + bone edges."""
    na, nb = skeleton_A.n_joints, skeleton_B.n_joints
    v = na + nb
    mask = np.zeros((v, v), dtype=bool)
    mask[:na, na:] = True
    mask[na:, :na] = True
    for sk, off in ((skeleton_A, 0), (skeleton_B, na)):
        for j in sk.bones:
            p = sk.parents[j]
            mask[off + j, off + p] = True
            mask[off + p, off + j] = True
    return mask


def build_interaction_mesh(
    clip: InteractionClip,
    weight_mode: str = "inverse_distance",
    dist_clamp: float = DIST_CLAMP,
) -> InteractionMesh:
    """Build the mesh for a clip, weights taken from the clip's own frames.

    ``inverse_distance`` weights emphasize close (contact) pairs;
    ``uniform`` gives every neighbor equal pull.
    """
    if weight_mode not in ("inverse_distance", "uniform"):
        raise DomainError(f"unknown weight_mode {weight_mode!r}")
    mask = _mesh_edges(clip.skeleton_A, clip.skeleton_B)
    x = np.concatenate([clip.motion_A.frames, clip.motion_B.frames], axis=1)
    t, v = x.shape[0], x.shape[1]
    if weight_mode == "uniform":
        w = np.broadcast_to(mask.astype(np.float64), (t, v, v)).copy()
    else:
        diff = x[:, :, None, :] - x[:, None, :, :]
        dist = np.maximum(np.linalg.norm(diff, axis=-1), dist_clamp)
        w = np.where(mask, 1.0 / dist, 0.0)
    w /= w.sum(axis=2, keepdims=True)
    return InteractionMesh(clip.skeleton_A.n_joints, clip.skeleton_B.n_joints, w)


def laplacian_coords(
    frame_a: np.ndarray, frame_b: np.ndarray, mesh: InteractionMesh, t: int = 0
) -> np.ndarray:
    """delta_i = p_i - sum_j w_ij p_j for one frame pair, using frame t's weights."""
    fa = np.asarray(frame_a, dtype=np.float64)
    fb = np.asarray(frame_b, dtype=np.float64)
    if fa.shape != (mesh.n_a, 3) or fb.shape != (mesh.n_b, 3):
        raise ShapeError("frame shapes do not match mesh")
    p = np.concatenate([fa, fb], axis=0)
    return p - mesh.weights[t] @ p


@dataclass(frozen=True)
class MeshWeights:
    """Energy term weights; the bone term dominates by default."""

    laplacian: float = 1.0
    bone: float = 10.0
    temporal: float = 0.1

    def __post_init__(self):
        if min(self.laplacian, self.bone, self.temporal) < 0:
            raise DomainError("energy weights must be nonnegative")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 5000
    step_init: float = 0.05
    tol: float = 1e-4

    def __post_init__(self):
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if self.step_init <= 0 or self.tol <= 0:
            raise DomainError("step_init and tol must be positive")


@dataclass(frozen=True)
class RetargetProblem:
    source: InteractionClip
    target_scales: BoneScaleVector
    target_scales_A: BoneScaleVector = None
    weights: MeshWeights = field(default_factory=MeshWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weight_mode: str = "inverse_distance"

    def __post_init__(self):
        if self.target_scales.n_bones != self.source.skeleton_B.n_bones:
            raise ShapeError("target_scales length != B bone count")
        ta = self.target_scales_A
        if ta is None:
            ta = BoneScaleVector.ones(self.source.skeleton_A.n_bones)
            object.__setattr__(self, "target_scales_A", ta)
        if ta.n_bones != self.source.skeleton_A.n_bones:
            raise ShapeError("target_scales_A length != A bone count")


@dataclass(frozen=True)
class RetargetDiagnostics:
    energy_trace: tuple
    iterations: int
    converged: bool
    final_grad_inf: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "energy_trace": list(self.energy_trace),
                "iterations": self.iterations,
                "converged": self.converged,
                "final_grad_inf": self.final_grad_inf,
            },
            sort_keys=True,
        )


class _EnergyModel:
    """Precomputed source quantities; energy/gradient over X [T, V, 3]."""

    def __init__(self, problem: RetargetProblem):
        clip = problem.source
        self.na = clip.skeleton_A.n_joints
        self.mesh = build_interaction_mesh(clip, problem.weight_mode)
        self.w = problem.weights
        src = np.concatenate([clip.motion_A.frames, clip.motion_B.frames], axis=1)
        self.src = src
        self.delta_src = src - np.einsum("tvu,tuc->tvc", self.mesh.weights, src)
        self.src_vel = src[1:] - src[:-1]
        # bone child/parent indices into the stacked vertex axis
        child, parent, target = [], [], []
        for sk, scales, off in (
            (clip.skeleton_A, problem.target_scales_A, 0),
            (clip.skeleton_B, problem.target_scales, self.na),
        ):
            child.extend(off + j for j in sk.bones)
            parent.extend(off + p for p in sk.parents[sk.bones])
            target.extend(scales.scales * sk.template_bone_lengths)
        self.child = np.asarray(child)
        self.parent = np.asarray(parent)
        self.target_len = np.asarray(target)

    def laplacian_all(self, x: np.ndarray) -> np.ndarray:
        return x - np.einsum("tvu,tuc->tvc", self.mesh.weights, x)

    def energy(self, x: np.ndarray) -> float:
        e = 0.0
        if self.w.laplacian > 0:
            r = self.laplacian_all(x) - self.delta_src
            e += self.w.laplacian * float(np.sum(r * r))
        if self.w.bone > 0:
            bv = x[:, self.child] - x[:, self.parent]
            rl = np.linalg.norm(bv, axis=-1) - self.target_len
            e += self.w.bone * float(np.sum(rl * rl))
        if self.w.temporal > 0:
            dv = (x[1:] - x[:-1]) - self.src_vel
            e += self.w.temporal * float(np.sum(dv * dv))
        return e

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.zeros_like(x)
        if self.w.laplacian > 0:
            r = self.laplacian_all(x) - self.delta_src
            g += 2.0 * self.w.laplacian * (r - np.einsum("tuv,tuc->tvc", self.mesh.weights, r))
        if self.w.bone > 0:
            bv = x[:, self.child] - x[:, self.parent]
            ln = np.maximum(np.linalg.norm(bv, axis=-1), 1e-12)
            coef = (2.0 * self.w.bone * (ln - self.target_len) / ln)[..., None] * bv
            np.add.at(g, (slice(None), self.child), coef)
            np.subtract.at(g, (slice(None), self.parent), coef)
        if self.w.temporal > 0:
            dv = (x[1:] - x[:-1]) - self.src_vel
            g[1:] += 2.0 * self.w.temporal * dv
            g[:-1] -= 2.0 * self.w.temporal * dv
        return g


def project_bone_lengths(frames: np.ndarray, skeleton: Skeleton, target: np.ndarray) -> np.ndarray:
    """Per frame, rescale each parent-chain bone to its exact target length.

    Traversal is root to leaf, so every bone direction is preserved and the
    output lengths equal ``target`` to float precision.
    """
    out = np.empty_like(frames)
    out[:, skeleton.root] = frames[:, skeleton.root]
    for j in skeleton.topo_order[1:]:
        p = skeleton.parents[j]
        v = frames[:, j] - frames[:, p]
        ln = np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
        out[:, j] = out[:, p] + target[skeleton.bone_of_child[j]] * v / ln
    return out


def energy(candidate: InteractionClip, problem: RetargetProblem) -> float:
    """Retargeting energy of a candidate clip against the problem's source."""
    src = problem.source
    if candidate.motion_A.frames.shape != src.motion_A.frames.shape:
        raise ShapeError("candidate A shape != source")
    if candidate.motion_B.frames.shape != src.motion_B.frames.shape:
        raise ShapeError("candidate B shape != source")
    model = _EnergyModel(problem)
    x = np.concatenate([candidate.motion_A.frames, candidate.motion_B.frames], axis=1)
    return model.energy(x)


def retarget_optimize(problem: RetargetProblem) -> tuple:
    """Minimize the retargeting energy; returns (clip, diagnostics).

    Starts from the naively re-scaled source, takes monotone backtracking
    descent steps until the gradient sup-norm drops below tolerance or the
    iteration budget runs out, then hard-projects bone lengths onto their
    targets.
    """
    clip = problem.source
    model = _EnergyModel(problem)
    a0 = apply_bone_scales(clip.motion_A, clip.skeleton_A, problem.target_scales_A)
    b0 = apply_bone_scales(clip.motion_B, clip.skeleton_B, problem.target_scales)
    x = np.concatenate([a0.frames, b0.frames], axis=1)

    e = model.energy(x)
    if not np.isfinite(e):
        raise DivergenceError("non-finite energy at initialization", trace=[e])
    trace = [e]
    step = problem.solver.step_init
    grad_inf = np.inf
    converged = False
    iters = 0
    x_prev = g_prev = None
    for iters in range(1, problem.solver.max_iters + 1):
        g = model.gradient(x)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at iteration {iters}", trace=trace)
        grad_inf = float(np.max(np.abs(g)))
        if grad_inf < problem.solver.tol:
            converged = True
            break
        # Barzilai-Borwein trial step, Armijo-safeguarded below so the
        # accepted energies stay monotone
        if x_prev is not None:
            s = x - x_prev
            y = g - g_prev
            sy = float(np.sum(s * y))
            if sy > 0:
                step = min(max(float(np.sum(s * s)) / sy, 1e-8), 1e3)
        x_prev, g_prev = x, g
        g_sq = float(np.sum(g * g))
        accepted = False
        for _ in range(60):
            x_new = x - step * g
            e_new = model.energy(x_new)
            if np.isfinite(e_new) and e_new <= e - 1e-4 * step * g_sq:
                x, e = x_new, e_new
                trace.append(e)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # line search stalled at float resolution; best iterate stands
            break

    frames_a = project_bone_lengths(
        x[:, : model.na], clip.skeleton_A, problem.target_scales_A.scales * clip.skeleton_A.template_bone_lengths
    )
    frames_b = project_bone_lengths(
        x[:, model.na :], clip.skeleton_B, problem.target_scales.scales * clip.skeleton_B.template_bone_lengths
    )
    out = InteractionClip(
        skeleton_A=clip.skeleton_A,
        skeleton_B=clip.skeleton_B,
        motion_A=Motion(frames_a, clip.motion_A.frame_rate),
        motion_B=Motion(frames_b, clip.motion_B.frame_rate),
        interaction_kind=clip.interaction_kind,
        scale_B=problem.target_scales,
        key_pairs=clip.key_pairs,
    )
    diag = RetargetDiagnostics(
        energy_trace=tuple(trace),
        iterations=iters,
        converged=converged,
        final_grad_inf=grad_inf,
    )
    return out, diag
