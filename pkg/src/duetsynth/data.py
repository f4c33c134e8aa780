"""Dataset construction, normalization, split protocols, persistence.

A dataset is a flat list of interaction clips: exactly one template clip
(all bone scales 1) per interaction kind plus retargeted variations labeled
with their bone-scale vectors. Variations are produced by the mesh
retargeting optimizer from each kind's template, over a scale grid and one
or both scaling modes (uniform full-body, single upper-body bone).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._compensated import add_exact, sub_with_residual
from .clipio import load_clip, save_clip
from .core import BoneScaleVector, InteractionClip, Motion, Skeleton
from .errors import ConfigError, DivergenceError, DomainError, FormatError
from .generators import desk_skeleton, desk_upper_body_bones, gen_base_clip
from .mesh import MeshWeights, RetargetProblem, SolverConfig, retarget_optimize

log = logging.getLogger(__name__)

MODE_UNIFORM = "uniform-full-body"
MODE_SINGLE_BONE = "single-upper-body-bone"
SCALING_MODES = (MODE_UNIFORM, MODE_SINGLE_BONE)

SPLIT_KINDS = ("random", "cross-scale", "cross-interaction", "cross-scale-interaction")


@dataclass(frozen=True)
class DatasetSpec:
    base_kinds: tuple = ("circle", "hold", "lean", "lift")
    scale_min: float = 0.75
    scale_max: float = 1.25
    scale_step: float = 0.05
    scaling_modes: tuple = (MODE_UNIFORM,)
    n_frames: int = 64
    seed: int = 0
    single_bones: tuple = None
    mesh_weights: MeshWeights = field(default_factory=MeshWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.base_kinds:
            raise ConfigError("base_kinds must not be empty")
        for m in self.scaling_modes:
            if m not in SCALING_MODES:
                raise ConfigError(f"unknown scaling mode {m!r}; known: {SCALING_MODES}")
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if self.scale_step <= 0 or self.scale_max < self.scale_min:
            raise ConfigError("invalid scale grid bounds")
        if not np.any(np.isclose(self.grid(), 1.0, atol=1e-9)):
            raise ConfigError("scale grid must contain 1.0 (the template)")
        object.__setattr__(self, "base_kinds", tuple(self.base_kinds))
        object.__setattr__(self, "scaling_modes", tuple(self.scaling_modes))
        if self.single_bones is not None:
            object.__setattr__(self, "single_bones", tuple(int(b) for b in self.single_bones))

    def grid(self) -> np.ndarray:
        """Scale grid values; entries within 1e-9 of 1.0 are snapped to 1.0 exactly."""
        n = int(math.floor((self.scale_max - self.scale_min) / self.scale_step + 0.5)) + 1
        vals = self.scale_min + self.scale_step * np.arange(n)
        vals = np.round(vals, 12)
        vals[np.isclose(vals, 1.0, atol=1e-9)] = 1.0
        return vals


@dataclass(frozen=True)
class Dataset:
    """Clips plus the labels of variations dropped during generation."""

    clips: tuple
    failures: tuple = ()

    def __post_init__(self):
        clips = tuple(self.clips)
        if not clips:
            raise DomainError("dataset must contain at least one clip")
        t0, fr0 = clips[0].n_frames, clips[0].motion_A.frame_rate
        per_kind = {}
        for c in clips:
            if c.n_frames != t0 or c.motion_A.frame_rate != fr0:
                raise DomainError("all clips in a dataset must share T and frame_rate")
            if c.is_template:
                per_kind[c.interaction_kind] = per_kind.get(c.interaction_kind, 0) + 1
        for kind in sorted({c.interaction_kind for c in clips}):
            if per_kind.get(kind, 0) != 1:
                raise DomainError(f"kind {kind!r} needs exactly one template clip")
        object.__setattr__(self, "clips", clips)
        object.__setattr__(self, "failures", tuple(tuple(f) for f in self.failures))

    @property
    def n_clips(self) -> int:
        return len(self.clips)

    @property
    def n_frames(self) -> int:
        return self.clips[0].n_frames

    @property
    def kinds(self) -> tuple:
        return tuple(sorted({c.interaction_kind for c in self.clips}))

    @property
    def templates(self) -> dict:
        return {c.interaction_kind: c for c in self.clips if c.is_template}

    @property
    def variations(self) -> tuple:
        return tuple(c for c in self.clips if not c.is_template)

    def template_for(self, kind: str) -> InteractionClip:
        for c in self.clips:
            if c.is_template and c.interaction_kind == kind:
                return c
        raise ConfigError(f"no template for kind {kind!r}")


def _scale_vectors(spec: DatasetSpec, skeleton: Skeleton) -> list:
    grid = spec.grid()
    out = []
    for mode in spec.scaling_modes:
        if mode == MODE_UNIFORM:
            out.extend(
                BoneScaleVector.uniform(skeleton.n_bones, s) for s in grid if s != 1.0
            )
        else:
            bones = spec.single_bones
            if bones is None:
                bones = desk_upper_body_bones(skeleton)
            for b in bones:
                out.extend(
                    BoneScaleVector.single_bone(skeleton.n_bones, b, s)
                    for s in grid
                    if s != 1.0
                )
    return out


def gen_variations(base: InteractionClip, spec: DatasetSpec) -> Dataset:
    """Retarget a template clip onto every grid scale; drop non-converged runs."""
    if not base.is_template:
        raise DomainError("gen_variations needs a template clip (all scales 1)")
    clips = [base]
    failures = []
    for sv in _scale_vectors(spec, base.skeleton_B):
        label = f"{base.interaction_kind}:{sv.label()}"
        problem = RetargetProblem(
            source=base, target_scales=sv, weights=spec.mesh_weights, solver=spec.solver
        )
        try:
            clip, diag = retarget_optimize(problem)
        except DivergenceError as e:
            log.warning("dropping %s: diverged (%s)", label, e)
            failures.append((label, "diverged"))
            continue
        if not diag.converged:
            log.warning("dropping %s: not converged after %d iters", label, diag.iterations)
            failures.append((label, "not-converged"))
            continue
        clips.append(clip)
    return Dataset(tuple(clips), tuple(failures))


def gen_dataset(spec: DatasetSpec, skeleton: Skeleton = None) -> Dataset:
    """Generate bases for every kind and expand each across the scale grid."""
    sk = skeleton if skeleton is not None else desk_skeleton()
    clips, failures = [], []
    for kind in spec.base_kinds:
        base = gen_base_clip(kind, sk, spec.n_frames, seed=spec.seed)
        ds = gen_variations(base, spec)
        clips.extend(ds.clips)
        failures.extend(ds.failures)
    return Dataset(tuple(clips), tuple(failures))


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitProtocol:
    kind: str
    test_fraction: float = 0.2
    train_band: tuple = (0.95, 1.05)
    test_bands: tuple = ((0.75, 0.85), (1.15, 1.25))

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ConfigError(f"unknown split protocol {self.kind!r}; known: {SPLIT_KINDS}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")


def _in_band(scales: np.ndarray, band: tuple) -> np.ndarray:
    return (scales >= band[0] - 1e-9) & (scales <= band[1] + 1e-9)


def _all_in_train_band(sv: BoneScaleVector, protocol: SplitProtocol) -> bool:
    return bool(np.all(_in_band(sv.scales, protocol.train_band)))


def _all_in_test_bands(sv: BoneScaleVector, protocol: SplitProtocol) -> bool:
    ok = np.zeros(len(sv.scales), dtype=bool)
    for band in protocol.test_bands:
        ok |= _in_band(sv.scales, band)
    return bool(np.all(ok))


def _kind_groups(kinds: tuple) -> tuple:
    """Lexicographic first half trains, second half tests."""
    ordered = tuple(sorted(kinds))
    cut = math.ceil(len(ordered) / 2)
    return ordered[:cut], ordered[cut:]


def split(dataset: Dataset, protocol: SplitProtocol, seed: int = 0) -> tuple:
    """Deterministic (train, test) split.

    Templates go to both sides: they are conditioning inputs, never
    supervision targets. Disjointness applies to the variation clips.
    Clips in neither region of a band protocol are dropped.
    """
    templates = [c for c in dataset.clips if c.is_template]
    variations = [c for c in dataset.clips if not c.is_template]
    train_v, test_v = [], []
    if protocol.kind == "random":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(variations))
        n_test = int(round(protocol.test_fraction * len(variations)))
        test_idx = set(perm[:n_test].tolist())
        for i, c in enumerate(variations):
            (test_v if i in test_idx else train_v).append(c)
    elif protocol.kind == "cross-scale":
        for c in variations:
            if _all_in_train_band(c.scale_B, protocol):
                train_v.append(c)
            elif _all_in_test_bands(c.scale_B, protocol):
                test_v.append(c)
    elif protocol.kind == "cross-interaction":
        train_kinds, test_kinds = _kind_groups(dataset.kinds)
        for c in variations:
            if c.interaction_kind in train_kinds:
                train_v.append(c)
            elif c.interaction_kind in test_kinds:
                test_v.append(c)
    else:  # cross-scale-interaction
        train_kinds, test_kinds = _kind_groups(dataset.kinds)
        for c in variations:
            if c.interaction_kind in train_kinds and _all_in_train_band(c.scale_B, protocol):
                train_v.append(c)
            elif c.interaction_kind in test_kinds and _all_in_test_bands(c.scale_B, protocol):
                test_v.append(c)
    if not train_v or not test_v:
        raise ConfigError(f"protocol {protocol.kind!r} leaves train or test empty")
    return (
        Dataset(tuple(templates + train_v), dataset.failures),
        Dataset(tuple(templates + test_v), dataset.failures),
    )


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizationRecord:
    """Offset subtracted from every joint plus subtraction rounding residuals.

    The residuals make denormalization reproduce the original frames
    bit-for-bit.
    """

    offset: np.ndarray
    residual_A: np.ndarray
    residual_B: np.ndarray


def normalize(clip: InteractionClip, offset: np.ndarray = None) -> tuple:
    """Center the clip on the frame-0 midpoint of the two root trajectories.

    Pass ``offset`` to reuse another clip's centering (e.g. its template's).
    """
    if offset is None:
        ra = clip.motion_A.frames[0, clip.skeleton_A.root]
        rb = clip.motion_B.frames[0, clip.skeleton_B.root]
        offset = 0.5 * (ra + rb)
    offset = np.asarray(offset, dtype=np.float64)
    da, res_a = sub_with_residual(clip.motion_A.frames, offset)
    db, res_b = sub_with_residual(clip.motion_B.frames, offset)
    out = InteractionClip(
        clip.skeleton_A,
        clip.skeleton_B,
        Motion(da, clip.motion_A.frame_rate),
        Motion(db, clip.motion_B.frame_rate),
        clip.interaction_kind,
        clip.scale_B,
        clip.key_pairs,
    )
    return out, NormalizationRecord(offset, res_a, res_b)


def denormalize(clip: InteractionClip, record: NormalizationRecord) -> InteractionClip:
    """Exact inverse of :func:`normalize` (bitwise)."""
    fa = add_exact(record.offset, clip.motion_A.frames, record.residual_A)
    fb = add_exact(record.offset, clip.motion_B.frames, record.residual_B)
    return InteractionClip(
        clip.skeleton_A,
        clip.skeleton_B,
        Motion(fa, clip.motion_A.frame_rate),
        Motion(fb, clip.motion_B.frame_rate),
        clip.interaction_kind,
        clip.scale_B,
        clip.key_pairs,
    )


# ---------------------------------------------------------------- persistence


MANIFEST_NAME = "manifest.json"


def save_dataset(dataset: Dataset, path, spec: DatasetSpec = None) -> Path:
    """Write manifest.json + clips/NNNN_<id>.json under ``path``."""
    root = Path(path)
    clip_dir = root / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, clip in enumerate(dataset.clips):
        name = f"{i:04d}_{clip.interaction_kind}_{clip.scale_B.label()}.json"
        save_clip(clip, clip_dir / name)
        files.append(name)
    manifest = {
        "format_version": 1,
        "n_clips": dataset.n_clips,
        "kinds": list(dataset.kinds),
        "clip_files": files,
        "failures": [list(f) for f in dataset.failures],
    }
    if spec is not None:
        manifest["spec"] = asdict(spec)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest in {root}") from e
    for key in ("format_version", "n_clips", "clip_files"):
        if key not in manifest:
            raise FormatError(f"manifest missing field {key!r}")
    if manifest["format_version"] != 1:
        raise FormatError(f"unsupported dataset format_version {manifest['format_version']!r}")
    if len(manifest["clip_files"]) != manifest["n_clips"]:
        raise FormatError("manifest clip count does not match its file list")
    clips = tuple(load_clip(root / "clips" / name) for name in manifest["clip_files"])
    failures = tuple(tuple(f) for f in manifest.get("failures", []))
    return Dataset(clips, failures)
