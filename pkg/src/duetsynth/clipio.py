"""Serialization for interaction clips.

Three formats, all deterministic byte-for-byte given the same clip:

- clip JSON (``format_version`` 1): full round trip including skeleton,
  scales and key pairs. Both characters share the template skeleton, so a
  single skeleton block is stored.
- CSV: one row per (frame, character, joint) with x, y, z. Lossy with
  respect to metadata; positions round-trip exactly (floats are written
  with shortest-repr precision).
- bvh-lite (``BVHLITE 1``): minimal text hierarchy plus per-frame root
  position and root-relative joint positions, one character block per
  character. Export only.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .core import BoneScaleVector, InteractionClip, Motion, Skeleton
from .errors import FormatError

FORMAT_VERSION = 1
CSV_COLUMNS = ("frame", "character", "joint", "x", "y", "z")


def clip_to_dict(clip: InteractionClip) -> dict:
    sk = clip.skeleton_A
    return {
        "format_version": FORMAT_VERSION,
        "skeleton": {
            "joint_names": list(sk.joint_names),
            "parents": sk.parents.tolist(),
            "template_offsets": sk.template_offsets.tolist(),
        },
        "frame_rate": clip.motion_A.frame_rate,
        "frames_A": clip.motion_A.frames.tolist(),
        "frames_B": clip.motion_B.frames.tolist(),
        "interaction_kind": clip.interaction_kind,
        "scale_B": clip.scale_B.scales.tolist(),
        "key_pairs": [list(p) for p in clip.key_pairs],
    }


def clip_from_dict(d: dict) -> InteractionClip:
    try:
        version = d["format_version"]
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported clip format_version {version!r}")
        sk = Skeleton(
            joint_names=tuple(d["skeleton"]["joint_names"]),
            parents=np.asarray(d["skeleton"]["parents"], dtype=np.int64),
            template_offsets=np.asarray(d["skeleton"]["template_offsets"], dtype=np.float64),
        )
        fr = float(d["frame_rate"])
        return InteractionClip(
            skeleton_A=sk,
            skeleton_B=sk,
            motion_A=Motion(np.asarray(d["frames_A"], dtype=np.float64), fr),
            motion_B=Motion(np.asarray(d["frames_B"], dtype=np.float64), fr),
            interaction_kind=str(d["interaction_kind"]),
            scale_B=BoneScaleVector(np.asarray(d["scale_B"], dtype=np.float64)),
            key_pairs=tuple(tuple(p) for p in d["key_pairs"]),
        )
    except KeyError as e:
        raise FormatError(f"clip dict missing field {e.args[0]!r}") from e


def dumps_clip(clip: InteractionClip) -> str:
    return json.dumps(clip_to_dict(clip), sort_keys=True, separators=(",", ":")) + "\n"


def save_clip(clip: InteractionClip, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_clip(clip))
    return path


def load_clip(path) -> InteractionClip:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"not valid clip JSON: {path}") from e
    if not isinstance(d, dict):
        raise FormatError(f"clip JSON must be an object: {path}")
    return clip_from_dict(d)


def clip_to_csv(clip: InteractionClip) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for label, motion in (("A", clip.motion_A), ("B", clip.motion_B)):
        f = motion.frames
        for t in range(f.shape[0]):
            for j in range(f.shape[1]):
                x, y, z = f[t, j]
                w.writerow([t, label, j, repr(float(x)), repr(float(y)), repr(float(z))])
    return buf.getvalue()


def save_csv(clip: InteractionClip, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(clip_to_csv(clip))
    return path


def read_csv_frames(path) -> tuple:
    """Parse a clip CSV back into (frames_A, frames_B) float64 arrays."""
    rows = {"A": {}, "B": {}}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise FormatError(f"unexpected CSV header {header!r}")
        for row in reader:
            t, label, j = int(row[0]), row[1], int(row[2])
            if label not in rows:
                raise FormatError(f"unknown character label {label!r}")
            rows[label][(t, j)] = (float(row[3]), float(row[4]), float(row[5]))
    out = []
    for label in ("A", "B"):
        cells = rows[label]
        if not cells:
            raise FormatError(f"CSV contains no rows for character {label}")
        n_t = max(t for t, _ in cells) + 1
        n_j = max(j for _, j in cells) + 1
        if len(cells) != n_t * n_j:
            raise FormatError(f"CSV rows for character {label} are not a full grid")
        arr = np.empty((n_t, n_j, 3), dtype=np.float64)
        for (t, j), xyz in cells.items():
            arr[t, j] = xyz
        out.append(arr)
    return out[0], out[1]


def clip_to_bvh_lite(clip: InteractionClip) -> str:
    lines = [f"BVHLITE {FORMAT_VERSION}"]
    for label, sk, motion in (
        ("A", clip.skeleton_A, clip.motion_A),
        ("B", clip.skeleton_B, clip.motion_B),
    ):
        lines.append(f"CHARACTER {label}")
        lines.append(f"JOINTS {sk.n_joints}")
        for j, name in enumerate(sk.joint_names):
            ox, oy, oz = sk.template_offsets[j]
            lines.append(f"JOINT {name} {sk.parents[j]} {ox!r} {oy!r} {oz!r}")
        lines.append(f"FRAMES {motion.n_frames} FRAME_TIME {1.0 / motion.frame_rate!r}")
        root = motion.frames[:, sk.root]
        rel = motion.frames - root[:, None, :]
        for t in range(motion.n_frames):
            vals = [repr(float(v)) for v in root[t]]
            for j in range(sk.n_joints):
                if j == sk.root:
                    continue
                vals.extend(repr(float(v)) for v in rel[t, j])
            lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def save_bvh_lite(clip: InteractionClip, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(clip_to_bvh_lite(clip))
    return path
