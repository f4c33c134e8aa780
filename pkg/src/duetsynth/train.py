"""Losses and the joint training loop for the three autoencoders.

Training pairs are (template, variation) clips of the same interaction kind.
Both are centered with the template's frame-0 offset, so the networks see
position-invariant coordinates; deltas are variation minus template. The
adaptation branch is conditioned on the ground-truth retargeted motion of B
during training.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .core import Motion, Skeleton
from .data import Dataset, normalize
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .net import InteractionModel, LatentCode, ModelConfig, per_joint_scales, scale_amplitude

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Motion-loss mixture; the four weights sum to one."""

    position: float = 0.75
    velocity: float = 0.1
    bone: float = 0.05
    kl: float = 0.1

    def __post_init__(self):
        for name in ("position", "velocity", "bone", "kl"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"loss weight {name}={v} outside [0, 1]")
        total = self.position + self.velocity + self.bone + self.kl
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"loss weights sum to {total}, expected 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 50
    seed: int = 0
    teacher_forcing: bool = False
    kl_warmup_epochs: int = None  # None -> 10% of epochs; 0 -> disabled
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.kl_warmup_epochs is not None and self.kl_warmup_epochs < 0:
            raise ConfigError("kl_warmup_epochs must be >= 0")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in [0, 1)")

    def warmup_epochs(self) -> int:
        if self.kl_warmup_epochs is None:
            return max(1, self.epochs // 10)
        return self.kl_warmup_epochs

    def kl_scale(self, epoch: int) -> float:
        w = self.warmup_epochs()
        if w == 0:
            return 1.0
        return min(1.0, (epoch + 1) / w)


def kl_divergence(code: LatentCode) -> torch.Tensor:
    """0.5 sum(mu^2 + var - 1 - log_var) over code dims, mean over batch."""
    per = 0.5 * (code.mu**2 + torch.exp(code.log_var) - 1.0 - code.log_var)
    return per.reshape(per.shape[0], -1).sum(dim=-1).mean()


def _frames_tensor(m) -> torch.Tensor:
    if isinstance(m, torch.Tensor):
        return m
    if isinstance(m, Motion):
        return torch.tensor(m.frames)
    return torch.tensor(np.asarray(m))


def _bone_lengths_t(frames: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    child = torch.tensor(skeleton.bones)
    parent = torch.tensor(skeleton.parents[skeleton.bones])
    seg = frames.index_select(-2, child) - frames.index_select(-2, parent)
    return torch.linalg.vector_norm(seg, dim=-1)


def bone_length_loss(pred, gt, skeleton: Skeleton) -> torch.Tensor:
    """Sum over frames of the squared l2 gap between bone-length vectors.

    Accepts Motion or [T,N,3] / [B,T,N,3] tensors; batched inputs are
    averaged over the batch.
    """
    p = _bone_lengths_t(_frames_tensor(pred), skeleton)
    g = _bone_lengths_t(_frames_tensor(gt), skeleton)
    if p.shape != g.shape:
        raise ShapeError(f"bone_length_loss shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    per_frame = ((p - g) ** 2).sum(dim=-1)
    if per_frame.ndim == 1:
        return per_frame.sum()
    return per_frame.sum(dim=-1).mean()


def loss_Bs(b_s: torch.Tensor, model: InteractionModel, generator=None, eps=None) -> torch.Tensor:
    """Mean squared scale-vector reconstruction plus unweighted KL."""
    code = model.encode_skeleton(b_s)
    z = _reparam(code, eps, generator)
    recon = model.decode_skeleton(z)
    mse = ((recon - b_s) ** 2).sum(dim=-1).mean()
    return mse + kl_divergence(code)


def motion_loss_terms(
    pred_q, gt_q, code: LatentCode, skeleton: Skeleton, weights: LossWeights, kl_scale=1.0
) -> dict:
    pred = _frames_tensor(pred_q)
    gt = _frames_tensor(gt_q)
    if pred.shape != gt.shape:
        raise ShapeError(f"motion loss shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    t_axis = pred.ndim - 3
    vel_p = pred.narrow(t_axis, 1, pred.shape[t_axis] - 1) - pred.narrow(
        t_axis, 0, pred.shape[t_axis] - 1
    )
    vel_g = gt.narrow(t_axis, 1, gt.shape[t_axis] - 1) - gt.narrow(t_axis, 0, gt.shape[t_axis] - 1)
    terms = {
        "position": (pred - gt).abs().mean(),
        "velocity": (vel_p - vel_g).abs().mean(),
        "bone": bone_length_loss(pred, gt, skeleton),
        "kl": kl_divergence(code),
    }
    terms["total"] = (
        weights.position * terms["position"]
        + weights.velocity * terms["velocity"]
        + weights.bone * terms["bone"]
        + weights.kl * kl_scale * terms["kl"]
    )
    return terms


def loss_Bm(pred_q, gt_q, code, skeleton, weights=LossWeights(), kl_scale=1.0) -> torch.Tensor:
    return motion_loss_terms(pred_q, gt_q, code, skeleton, weights, kl_scale)["total"]


def loss_Am(pred_q, gt_q, code, skeleton, weights=LossWeights(), kl_scale=1.0) -> torch.Tensor:
    return motion_loss_terms(pred_q, gt_q, code, skeleton, weights, kl_scale)["total"]


def _reparam(code: LatentCode, eps, generator):
    if eps is None:
        eps = torch.randn(
            code.mu.shape, generator=generator, dtype=code.mu.dtype, device=code.mu.device
        )
    return code.mu + torch.exp(0.5 * code.log_var) * eps


# ------------------------------------------------------------- pair assembly


class TrainingPair(NamedTuple):
    kind: str
    tpl_a: np.ndarray
    tpl_b: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    scale_ch: np.ndarray
    b_s: np.ndarray


class Batch(NamedTuple):
    tpl_a: torch.Tensor
    tpl_b: torch.Tensor
    var_a: torch.Tensor
    var_b: torch.Tensor
    delta_a: torch.Tensor
    delta_b: torch.Tensor
    scale_ch: torch.Tensor
    fl_a: torch.Tensor
    fl_b: torch.Tensor
    b_s: torch.Tensor


def build_pairs(dataset: Dataset) -> list:
    """One (template, variation) pair per non-template clip, centered with
    the template's frame-0 offset."""
    pairs = []
    skeleton = dataset.clips[0].skeleton_B
    records = {}
    normed_tpl = {}
    for kind in dataset.kinds:
        tpl, rec = normalize(dataset.template_for(kind))
        normed_tpl[kind] = tpl
        records[kind] = rec
    for clip in dataset.variations:
        tpl = normed_tpl[clip.interaction_kind]
        var, _ = normalize(clip, offset=records[clip.interaction_kind].offset)
        pairs.append(
            TrainingPair(
                kind=clip.interaction_kind,
                tpl_a=tpl.motion_A.frames,
                tpl_b=tpl.motion_B.frames,
                var_a=var.motion_A.frames,
                var_b=var.motion_B.frames,
                scale_ch=per_joint_scales(skeleton, clip.scale_B),
                b_s=clip.scale_B.scales,
            )
        )
    return pairs


def collate(pairs, indices, dtype=torch.float32) -> Batch:
    pick = [pairs[i] for i in indices]
    stack = lambda field: torch.tensor(
        np.stack([getattr(p, field) for p in pick]), dtype=dtype
    )
    tpl_a, tpl_b = stack("tpl_a"), stack("tpl_b")
    var_a, var_b = stack("var_a"), stack("var_b")
    return Batch(
        tpl_a=tpl_a,
        tpl_b=tpl_b,
        var_a=var_a,
        var_b=var_b,
        delta_a=var_a - tpl_a,
        delta_b=var_b - tpl_b,
        scale_ch=stack("scale_ch").unsqueeze(-1),
        fl_a=torch.cat([tpl_a[:, 0], tpl_a[:, -1]], dim=-1),
        fl_b=torch.cat([tpl_b[:, 0], tpl_b[:, -1]], dim=-1),
        b_s=stack("b_s"),
    )


def batch_loss(
    model: InteractionModel,
    batch: Batch,
    weights: LossWeights = LossWeights(),
    kl_scale: float = 1.0,
    generator=None,
    eps=None,
    teacher_forcing: bool = False,
):
    """Total loss and per-term breakdown for one batch.

    `eps` may pin the reparameterization noise as a (skeleton, B, A) triple
    of tensors, which makes the loss a deterministic function of the
    parameters (used by gradient checks).
    """
    n_frames = batch.tpl_b.shape[1]
    sk = model.skeleton

    code_s = model.encode_skeleton(batch.b_s)
    z_s = _reparam(code_s, eps[0] if eps else None, generator)
    recon_s = model.decode_skeleton(z_s)
    l_bs = ((recon_s - batch.b_s) ** 2).sum(dim=-1).mean() + kl_divergence(code_s)

    code_b = model.encode_delta_b(batch.delta_b, batch.scale_ch, batch.fl_b)
    z_b = _reparam(code_b, eps[1] if eps else None, generator)
    teacher_b = batch.delta_b if teacher_forcing else None
    pred_delta_b = model.decode_delta_b(z_b, batch.scale_ch, batch.fl_b, n_frames, teacher_b)
    terms_b = motion_loss_terms(
        batch.tpl_b + pred_delta_b, batch.var_b, code_b, sk, weights, kl_scale
    )

    ctx = model.encode_context_b(batch.var_b)
    code_a = model.encode_delta_a(batch.delta_a, ctx, batch.fl_a)
    z_a = _reparam(code_a, eps[2] if eps else None, generator)
    teacher_a = batch.delta_a if teacher_forcing else None
    amp = scale_amplitude(batch.scale_ch)
    pred_delta_a = model.decode_delta_a(z_a, ctx, batch.fl_a, n_frames, amp, teacher_a)
    terms_a = motion_loss_terms(
        batch.tpl_a + pred_delta_a, batch.var_a, code_a, sk, weights, kl_scale
    )

    total = l_bs + terms_b["total"] + terms_a["total"]
    parts = {
        "loss_Bs": l_bs,
        "loss_Bm": terms_b["total"],
        "loss_Am": terms_a["total"],
        "bm_position": terms_b["position"],
        "am_position": terms_a["position"],
        "total": total,
    }
    return total, parts


# ------------------------------------------------------------ training loop


def train(
    dataset_train: Dataset,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = None,
    weights: LossWeights = LossWeights(),
):
    """Joint optimization of all three autoencoders; returns (model, history).

    The model returned carries the best-on-validation parameters. A NaN or
    infinite loss aborts with the last completed epoch's state attached.
    """
    skeleton = dataset_train.clips[0].skeleton_B
    if model_config is None:
        model_config = ModelConfig.for_skeleton(skeleton)
    if dataset_train.n_frames % model_config.temporal_reduction != 0:
        raise ShapeError(
            f"clip length {dataset_train.n_frames} not divisible by "
            f"{model_config.temporal_reduction}"
        )
    pairs = build_pairs(dataset_train)
    if not pairs:
        raise ConfigError("training set has no (template, variation) pairs")

    torch.manual_seed(config.seed)
    model = InteractionModel(model_config, skeleton)
    history = []
    if config.epochs == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))
    n_val = int(round(config.val_fraction * len(pairs)))
    n_val = min(n_val, len(pairs) - 1)
    val_idx = order[:n_val] if n_val > 0 else order
    train_idx = order[n_val:]

    val_batch = collate(pairs, val_idx)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    last_good = copy.deepcopy(model.state_dict())

    for epoch in range(config.epochs):
        model.train()
        kl_scale = config.kl_scale(epoch)
        perm = rng.permutation(train_idx)
        sums = {"loss_Bs": 0.0, "loss_Bm": 0.0, "loss_Am": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            batch = collate(pairs, perm[start : start + config.batch_size])
            total, parts = batch_loss(
                model, batch, weights, kl_scale, generator=gen,
                teacher_forcing=config.teacher_forcing,
            )
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}",
                    history=history,
                    last_good_state=last_good,
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            for k in sums:
                sums[k] += float(parts[k].detach())
            n_batches += 1

        model.eval()
        with torch.no_grad():
            _, val_parts = batch_loss(
                model, val_batch, weights, kl_scale=1.0, eps=zero_eps(model, val_batch)
            )
        val = float(val_parts["total"])
        row = {"epoch": epoch}
        row.update({k: sums[k] / n_batches for k in sums})
        row["val"] = val
        history.append(row)
        log.info(
            "epoch %d: total %.5f (Bs %.5f, Bm %.5f, Am %.5f) val %.5f",
            epoch, row["total"], row["loss_Bs"], row["loss_Bm"], row["loss_Am"], val,
        )
        if not np.isfinite(val):
            raise TrainingDivergedError(
                f"non-finite validation loss at epoch {epoch}",
                history=history,
                last_good_state=last_good,
            )
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
        last_good = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return model, history


def zero_eps(model: InteractionModel, batch: Batch):
    """Noise triple for decoding every branch at its posterior mean."""
    m = batch.b_s.shape[0]
    n, d = model.config.n_joints, model.config.latent_dim
    dt = batch.b_s.dtype
    return (
        torch.zeros(m, d, dtype=dt),
        torch.zeros(m, n, d, dtype=dt),
        torch.zeros(m, n, d, dtype=dt),
    )


HISTORY_COLUMNS = ("epoch", "loss_Bs", "loss_Bm", "loss_Am", "total", "val")


def save_history(history, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})
    return path
