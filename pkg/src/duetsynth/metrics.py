"""Evaluation suite: position error, bone-length error, key-pair distance
error, feature-distribution distance, and the retarget/generate harness.

All reported aggregates are per-joint values averaged over both characters.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import InteractionClip, Motion, Skeleton, adjacency, bone_lengths
from .data import Dataset
from .errors import ConfigError, DomainError, ShapeError
from .net import InteractionModel, STGCNLayer, retarget_clip, sample_scales

log = logging.getLogger(__name__)

COV_RIDGE = 1e-6
FEATURE_DIM = 64
WINDOW = 32


def e_r(pred: Motion, gt: Motion) -> float:
    """Mean per-joint Euclidean distance between two motions."""
    p, g = np.asarray(pred.frames), np.asarray(gt.frames)
    if p.shape != g.shape:
        raise ShapeError(f"e_r shapes differ: {p.shape} vs {g.shape}")
    return float(np.linalg.norm(p - g, axis=-1).mean())


def e_b(pred: Motion, skeleton: Skeleton, target_scales) -> float:
    """Mean absolute gap between per-frame bone lengths and their targets."""
    scales = np.asarray(getattr(target_scales, "scales", target_scales), dtype=np.float64)
    if scales.shape != (skeleton.n_bones,):
        raise ShapeError(f"target_scales shape {scales.shape} != ({skeleton.n_bones},)")
    measured = bone_lengths(pred.frames, skeleton)
    target = scales * skeleton.template_bone_lengths
    return float(np.abs(measured - target).mean())


def _pair_distances(clip: InteractionClip) -> np.ndarray:
    fa, fb = clip.motion_A.frames, clip.motion_B.frames
    return np.stack(
        [np.linalg.norm(fa[:, a] - fb[:, b], axis=-1) for a, b in clip.key_pairs], axis=1
    )


def jpd(pred_clip: InteractionClip, gt_clip: InteractionClip) -> float:
    """Mean absolute error of the key joint-pair distances."""
    if not pred_clip.key_pairs:
        raise DomainError("clip declares no key joint pairs")
    if pred_clip.key_pairs != gt_clip.key_pairs:
        raise DomainError("clips declare different key joint pairs")
    if pred_clip.n_frames != gt_clip.n_frames:
        raise ShapeError("jpd clips have different frame counts")
    return float(np.abs(_pair_distances(pred_clip) - _pair_distances(gt_clip)).mean())


# ------------------------------------------------------------------ FID


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _gaussian_stats(feats: np.ndarray):
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"feature set must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise DomainError(f"need at least 2 feature rows, got {x.shape[0]}")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return mu, cov


def fid_details(set_p: np.ndarray, set_q: np.ndarray):
    """Frechet distance between Gaussian fits; returns (value, ridged)."""
    mu_p, cov_p = _gaussian_stats(set_p)
    mu_q, cov_q = _gaussian_stats(set_q)
    ridged = False
    floor = 1e-10 * max(1.0, float(np.trace(cov_p) + np.trace(cov_q)))
    if np.linalg.eigvalsh(cov_p).min() < floor or np.linalg.eigvalsh(cov_q).min() < floor:
        ridged = True
        eye = np.eye(cov_p.shape[0])
        cov_p = cov_p + COV_RIDGE * eye
        cov_q = cov_q + COV_RIDGE * eye
        log.warning("rank-deficient feature covariance; ridge %g added", COV_RIDGE)
    root_p = _psd_sqrt(cov_p)
    cross = _psd_sqrt(root_p @ cov_q @ root_p)
    value = float(
        ((mu_p - mu_q) ** 2).sum() + np.trace(cov_p) + np.trace(cov_q) - 2.0 * np.trace(cross)
    )
    return max(value, 0.0), ridged


def fid(set_p: np.ndarray, set_q: np.ndarray) -> float:
    return fid_details(set_p, set_q)[0]


# ------------------------------------------------------- feature extractor


class FeatureExtractor(nn.Module):
    """Small interaction-kind classifier; features are its penultimate layer.

    Two graph-conv layers with temporal stride 2 each, global average
    pooling, then two dense layers. Inputs are two-character windows in a
    common frame (centered at A's root), so the features see the pair's
    relative geometry rather than each pose in isolation.
    """

    def __init__(self, skeleton: Skeleton, kinds, window: int = WINDOW):
        super().__init__()
        self.kinds = tuple(kinds)
        self.window = int(window)
        self.skeleton = skeleton
        single = adjacency(skeleton)
        n = skeleton.n_joints
        pair = np.zeros((2 * n, 2 * n), dtype=single.dtype)
        pair[:n, :n] = single
        pair[n:, n:] = single
        self.register_buffer("adj", torch.as_tensor(pair, dtype=torch.get_default_dtype()))
        self.layer1 = STGCNLayer(3, 32, stride=2, kernel=3, dropout=0.0)
        self.layer2 = STGCNLayer(32, FEATURE_DIM, stride=2, kernel=3, dropout=0.0)
        self.dense = nn.Linear(FEATURE_DIM, FEATURE_DIM)
        self.classify = nn.Linear(FEATURE_DIM, len(self.kinds))

    def forward(self, x: torch.Tensor):
        y = self.layer2(self.layer1(x, self.adj), self.adj)
        pooled = y.mean(dim=(1, 2))
        feats = torch.relu(self.dense(pooled))
        return feats, self.classify(feats)


def _window_starts(t: int, window: int):
    w = min(window, t)
    w -= w % 4  # the extractor's two stride-2 layers need divisibility by 4
    if w < 4:
        raise DomainError(f"motion too short for feature windows: T={t}")
    starts = list(range(0, t - w + 1, max(w // 2, 1)))
    if starts[-1] != t - w:
        starts.append(t - w)
    return starts, w


def motion_windows(frames: np.ndarray, skeleton: Skeleton, window: int = WINDOW) -> np.ndarray:
    """Root-centered sliding windows [k, w, N, 3] of one character's motion."""
    starts, w = _window_starts(frames.shape[0], window)
    out = []
    for s in starts:
        win = frames[s : s + w].copy()
        win -= win[0, skeleton.root]
        out.append(win)
    return np.stack(out)


def interaction_windows(clip: InteractionClip, window: int = WINDOW) -> np.ndarray:
    """Sliding windows [k, w, 2N, 3] over both characters' stacked joints.

    Every window is translated so A's root sits at the origin on the
    window's first frame; B keeps its offset from A, which is what carries
    the interaction geometry.
    """
    fa, fb = clip.motion_A.frames, clip.motion_B.frames
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError("characters have different joint counts")
    stacked = np.concatenate([fa, fb], axis=1)
    starts, w = _window_starts(stacked.shape[0], window)
    out = []
    for s in starts:
        win = stacked[s : s + w].copy()
        win -= win[0, clip.skeleton_A.root]
        out.append(win)
    return np.stack(out)


def clip_features(extractor: FeatureExtractor, clip: InteractionClip) -> np.ndarray:
    """Feature rows for every two-character window of the clip."""
    dtype = next(extractor.parameters()).dtype
    wins = interaction_windows(clip, extractor.window)
    with torch.no_grad():
        feats, _ = extractor(torch.tensor(wins, dtype=dtype))
    return feats.double().numpy()


def train_feature_extractor(
    dataset: Dataset, window: int = WINDOW, epochs: int = 80, lr: float = 1e-3, seed: int = 0
) -> FeatureExtractor:
    """Fit the kind classifier on the given clips and freeze it."""
    kinds = dataset.kinds
    if len(kinds) < 2:
        raise ConfigError("feature extractor needs at least 2 interaction kinds")
    skeleton = dataset.clips[0].skeleton_B
    torch.manual_seed(seed)
    extractor = FeatureExtractor(skeleton, kinds, window)
    xs, ys = [], []
    for clip in dataset.clips:
        label = kinds.index(clip.interaction_kind)
        wins = interaction_windows(clip, window)
        xs.append(wins)
        ys.extend([label] * len(wins))
    x = torch.tensor(np.concatenate(xs), dtype=torch.get_default_dtype())
    y = torch.tensor(ys)
    opt = torch.optim.Adam(extractor.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    batch = 64
    extractor.train()
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            _, logits = extractor(x[idx])
            loss = nn.functional.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    extractor.eval()
    extractor.requires_grad_(False)
    return extractor


# ------------------------------------------------------------- the harness

EVAL_MODES = ("retarget", "generate")
CSV_COLUMNS = ("clip_id", "kind", "scale_label", "mode", "E_r", "E_b", "JPD")


@dataclass(frozen=True)
class MetricReport:
    protocol: str
    mode: str
    rows: tuple
    aggregates: dict
    by_scale: dict
    fid_by_kind: dict = None
    fid_ridged: bool = False
    stochastic: dict = None

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "mode": self.mode,
            "aggregates": self.aggregates,
            "by_scale": self.by_scale,
            "fid": self.fid_by_kind,
            "fid_ridged": self.fid_ridged,
            "stochastic": self.stochastic,
            "n_clips": len(self.rows),
        }


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _aggregate(rows, per_char):
    agg = {
        "E_r": _mean([r["E_r"] for r in rows]),
        "E_b": _mean([r["E_b"] for r in rows]),
        "JPD": _mean([r["JPD"] for r in rows]),
    }
    for key in ("E_r_A", "E_r_B", "E_b_A", "E_b_B"):
        agg[key] = _mean([r[key] for r in per_char])
    return agg


def _retarget_rows(model, dataset, z_rng=None):
    rows, per_char, clips = [], [], []
    ones = None
    for clip in dataset.variations:
        template = dataset.template_for(clip.interaction_kind)
        sk = clip.skeleton_B
        if ones is None:
            from .core import BoneScaleVector

            ones = BoneScaleVector.ones(sk.n_bones)
        z_b = z_a = None
        if z_rng is not None:
            z_b = torch.randn(
                1, model.config.n_joints, model.config.latent_dim, generator=z_rng,
                dtype=next(model.parameters()).dtype,
            )
            z_a = torch.randn(
                1, model.config.n_joints, model.config.latent_dim, generator=z_rng,
                dtype=next(model.parameters()).dtype,
            )
        pred = retarget_clip(model, template, clip.scale_B, z_b=z_b, z_a=z_a)
        er_a = e_r(pred.motion_A, clip.motion_A)
        er_b = e_r(pred.motion_B, clip.motion_B)
        eb_a = e_b(pred.motion_A, clip.skeleton_A, ones)
        eb_b = e_b(pred.motion_B, sk, clip.scale_B)
        rows.append(
            {
                "clip_id": clip.clip_id,
                "kind": clip.interaction_kind,
                "scale_label": clip.scale_B.label(),
                "mode": "retarget",
                "E_r": 0.5 * (er_a + er_b),
                "E_b": 0.5 * (eb_a + eb_b),
                "JPD": jpd(pred, clip),
            }
        )
        per_char.append({"E_r_A": er_a, "E_r_B": er_b, "E_b_A": eb_a, "E_b_B": eb_b})
        clips.append(pred)
    return rows, per_char, clips


def _generate_rows(model, dataset, n_generate, seed):
    from .core import BoneScaleVector

    rows, per_char, clips = [], [], []
    for k, kind in enumerate(dataset.kinds):
        template = dataset.template_for(kind)
        sk = template.skeleton_B
        ones = BoneScaleVector.ones(sk.n_bones)
        scales = sample_scales(model, n_generate, seed=seed + k)
        for i, b_s in enumerate(scales):
            pred = retarget_clip(model, template, b_s)
            eb_a = e_b(pred.motion_A, pred.skeleton_A, ones)
            eb_b = e_b(pred.motion_B, sk, b_s)
            rows.append(
                {
                    "clip_id": f"{kind}:gen-{i:03d}",
                    "kind": kind,
                    "scale_label": b_s.label(),
                    "mode": "generate",
                    "E_r": None,
                    "E_b": 0.5 * (eb_a + eb_b),
                    "JPD": jpd(pred, template),
                }
            )
            per_char.append({"E_r_A": None, "E_r_B": None, "E_b_A": eb_a, "E_b_B": eb_b})
            clips.append(pred)
    return rows, per_char, clips


def evaluate(
    model: InteractionModel,
    dataset_test: Dataset,
    mode: str,
    protocol: str = "random",
    extractor: FeatureExtractor = None,
    n_generate: int = 10,
    seed: int = 0,
    z_samples: int = 0,
) -> MetricReport:
    """Run the model over a test split and collect the metric table.

    Retargeting conditions on each test clip's ground-truth scales and
    decodes at the latent mode; generation samples scale vectors from the
    prior. FID per kind is computed when an extractor is supplied
    (generation only). ``z_samples`` > 0 additionally reports mean and std
    of the retargeting metrics over that many sampled-latent decodes.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if not dataset_test.variations and mode == "retarget":
        raise ConfigError("test split has no variation clips to retarget")

    if mode == "retarget":
        rows, per_char, _ = _retarget_rows(model, dataset_test)
    else:
        rows, per_char, gen_clips = _generate_rows(model, dataset_test, n_generate, seed)

    by_scale = {}
    for label in sorted({r["scale_label"] for r in rows}):
        sub = [r for r in rows if r["scale_label"] == label]
        by_scale[label] = {
            "E_r": _mean([r["E_r"] for r in sub]),
            "E_b": _mean([r["E_b"] for r in sub]),
            "JPD": _mean([r["JPD"] for r in sub]),
            "n": len(sub),
        }

    fid_by_kind = None
    ridged = False
    if mode == "generate" and extractor is not None:
        fid_by_kind = {}
        for kind in dataset_test.kinds:
            gt_feats = np.concatenate(
                [
                    clip_features(extractor, c)
                    for c in dataset_test.clips
                    if c.interaction_kind == kind
                ]
            )
            gen_feats = np.concatenate(
                [
                    clip_features(extractor, c)
                    for c, r in zip(gen_clips, rows)
                    if r["kind"] == kind
                ]
            )
            if len(gt_feats) < 2 or len(gen_feats) < 2:
                # a Gaussian fit needs two rows per side; short clips at a
                # wide window can starve a single kind, the pooled FID below
                # still carries the signal
                log.warning("too few feature rows for per-kind FID of %r", kind)
                fid_by_kind[kind] = None
                continue
            value, r = fid_details(gt_feats, gen_feats)
            fid_by_kind[kind] = value
            ridged = ridged or r
        pooled_gt = np.concatenate(
            [clip_features(extractor, c) for c in dataset_test.clips]
        )
        pooled_gen = np.concatenate([clip_features(extractor, c) for c in gen_clips])
        value, r = fid_details(pooled_gt, pooled_gen)
        fid_by_kind["pooled"] = value
        ridged = ridged or r

    stochastic = None
    if z_samples > 0 and mode == "retarget":
        samples = []
        for s in range(z_samples):
            z_rng = torch.Generator().manual_seed(seed + 1000 + s)
            s_rows, s_chars, _ = _retarget_rows(model, dataset_test, z_rng=z_rng)
            samples.append(_aggregate(s_rows, s_chars))
        stochastic = {}
        for key in ("E_r", "E_b", "JPD"):
            vals = [s[key] for s in samples]
            stochastic[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}

    return MetricReport(
        protocol=protocol,
        mode=mode,
        rows=tuple(rows),
        aggregates=_aggregate(rows, per_char),
        by_scale=by_scale,
        fid_by_kind=fid_by_kind,
        fid_ridged=ridged,
        stochastic=stochastic,
    )


def write_metrics_csv(reports, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for report in reports:
            for row in report.rows:
                out = dict(row)
                out["E_r"] = "" if row["E_r"] is None else repr(row["E_r"])
                out["E_b"] = repr(row["E_b"])
                out["JPD"] = repr(row["JPD"])
                writer.writerow(out)
    return path


def write_summary_json(reports, path) -> Path:
    path = Path(path)
    payload = {f"{r.protocol}/{r.mode}": r.to_json() for r in reports}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path
