"""The three-autoencoder interaction model.

- SkeletonVAE: MLP encoder/decoder pair over bone-scale vectors.
- BMotionVAE: retargeting branch; spatio-temporal graph-conv encoder over
  per-joint motion deltas (plus a bone-scale channel), graph-GRU decoder
  that unrolls deltas autoregressively conditioned on the scale channel and
  the template's first/last frames.
- AMotionVAE: adaptation branch; one graph-conv encoder over A's deltas and
  a second, thin one over B's (retargeted) motion whose pooled output also
  conditions the decoder.

Tensor layout at module boundaries is [batch, T, joints, channels].
Latent codes are per joint: [batch, joints, latent] for motion branches and
[batch, latent] for the skeleton prior.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import __version__
from .core import BoneScaleVector, Skeleton, adjacency
from .errors import FormatError, ShapeError

SOFTPLUS_SHIFT = math.log(math.e - 1.0)  # softplus(x + shift) == 1 at x == 0


@dataclass(frozen=True)
class ModelConfig:
    n_joints: int
    n_bones: int
    latent_dim: int = 256
    stgcn_channels: tuple = (32, 64, 128, 256, 256)
    strides: tuple = (1, 2, 2, 2, 1)
    stgcn3_channels: tuple = (16, 16, 16, 16, 16)
    mlp1_widths: tuple = (16, 32, 64, 128, 256)
    mlp2_widths: tuple = (256, 128, 64, 32)
    temporal_kernel: int = 3
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("stgcn_channels", "strides", "stgcn3_channels", "mlp1_widths", "mlp2_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.stgcn_channels) != len(self.strides):
            raise ShapeError("stgcn_channels and strides must have equal length")
        if len(self.stgcn3_channels) != len(self.strides):
            raise ShapeError("stgcn3_channels and strides must have equal length")
        if self.stgcn_channels[-1] != self.latent_dim:
            raise ShapeError("last motion-encoder channel width must equal latent_dim")
        if self.mlp1_widths[-1] != self.latent_dim:
            raise ShapeError("last mlp1 width must equal latent_dim")
        if self.temporal_kernel % 2 != 1:
            raise ShapeError("temporal_kernel must be odd")

    @property
    def temporal_reduction(self) -> int:
        return int(np.prod(self.strides))

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton, **overrides) -> "ModelConfig":
        return cls(n_joints=skeleton.n_joints, n_bones=skeleton.n_bones, **overrides)

    @classmethod
    def tiny(cls, skeleton: Skeleton, hidden: int = 8) -> "ModelConfig":
        """Down-scaled widths for finite-difference gradient checks."""
        return cls(
            n_joints=skeleton.n_joints,
            n_bones=skeleton.n_bones,
            latent_dim=hidden,
            stgcn_channels=(hidden,) * 5,
            strides=(1, 2, 2, 2, 1),
            stgcn3_channels=(4, 4, 4, 4, 4),
            mlp1_widths=(4, 4, 4, 4, hidden),
            mlp2_widths=(hidden, 4, 4, 4),
            dropout=0.0,
        )


class LatentCode(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor

    def sample(self, generator: torch.Generator = None) -> torch.Tensor:
        eps = torch.randn(
            self.mu.shape, generator=generator, dtype=self.mu.dtype, device=self.mu.device
        )
        return self.mu + torch.exp(0.5 * self.log_var) * eps


def per_joint_scales(skeleton: Skeleton, scales: BoneScaleVector) -> np.ndarray:
    """Scale of the bone above each joint; the root gets 1.0."""
    out = np.ones(skeleton.n_joints)
    out[skeleton.bones] = scales.scales[skeleton.bone_of_child[skeleton.bones]]
    return out


class SpatialGraphConv(nn.Module):
    """x -> relu(A x W + x U), no biases; A is passed by the caller."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.w = nn.Linear(in_channels, out_channels, bias=False)
        self.u = nn.Linear(in_channels, out_channels, bias=False)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        mixed = torch.einsum("nm,...mc->...nc", adj, self.w(x))
        return torch.relu(mixed + self.u(x))


class STGCNLayer(nn.Module):
    """Spatial graph conv, then BN -> ReLU -> temporal conv -> BN -> Dropout.

    The temporal convolution runs along T with the given stride, so the
    output has T / stride frames; T must be divisible by the stride.
    """

    def __init__(self, in_channels, out_channels, stride=1, kernel=3, dropout=0.0):
        super().__init__()
        self.stride = int(stride)
        self.spatial = SpatialGraphConv(in_channels, out_channels)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.tconv = nn.Conv2d(
            out_channels,
            out_channels,
            kernel_size=(kernel, 1),
            stride=(self.stride, 1),
            padding=((kernel - 1) // 2, 0),
            bias=False,
        )
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        if x.shape[1] % self.stride != 0:
            raise ShapeError(f"T={x.shape[1]} not divisible by stride {self.stride}")
        y = self.spatial(x, adj)
        y = y.permute(0, 3, 1, 2)  # [B, C, T, N]
        y = torch.relu(self.bn1(y))
        y = self.drop(self.bn2(self.tconv(y)))
        return y.permute(0, 2, 3, 1)


class STGCNStack(nn.Module):
    """Ladder of ST-GCN layers followed by temporal averaging to one frame."""

    def __init__(self, in_channels, channels, strides, kernel, dropout):
        super().__init__()
        self.layers = nn.ModuleList()
        prev = in_channels
        for c, s in zip(channels, strides):
            self.layers.append(STGCNLayer(prev, c, s, kernel, dropout))
            prev = c

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, adj)
        return x.mean(dim=1)  # [B, N, C]


class GGRUCell(nn.Module):
    """GRU cell whose hidden-state paths are graph convolutions.

    g = A_s h W (one shared W); r = sigmoid(r_in(x) + r_hid(g));
    u = sigmoid(u_in(x) + u_hid(g)); c = tanh(c_in(x) + r * c_hid(g));
    h' = u * h + (1 - u) * c.
    """

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.w = nn.Linear(hidden, hidden, bias=False)
        self.r_in = nn.Linear(in_channels, hidden)
        self.u_in = nn.Linear(in_channels, hidden)
        self.c_in = nn.Linear(in_channels, hidden)
        self.r_hid = nn.Linear(hidden, hidden, bias=False)
        self.u_hid = nn.Linear(hidden, hidden, bias=False)
        self.c_hid = nn.Linear(hidden, hidden, bias=False)

    def forward(self, x: torch.Tensor, h: torch.Tensor, adj_s: torch.Tensor) -> torch.Tensor:
        g = torch.einsum("nm,bmh->bnh", adj_s, self.w(h))
        r = torch.sigmoid(self.r_in(x) + self.r_hid(g))
        u = torch.sigmoid(self.u_in(x) + self.u_hid(g))
        c = torch.tanh(self.c_in(x) + r * self.c_hid(g))
        return u * h + (1.0 - u) * c


def scale_amplitude(scale_ch: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of the per-joint scales from one: [B, 1, 1].

    Zero exactly when the requested skeleton equals the template; the motion
    decoders multiply their deltas by this factor, so identity retargeting
    is a no-op by construction rather than a property training must find.
    """
    return (scale_ch - 1.0).abs().mean(dim=(1, 2)).reshape(-1, 1, 1)


def _delta_head(latent: int) -> nn.Sequential:
    head = nn.Sequential(
        nn.Linear(latent, latent),
        nn.ReLU(),
        nn.Linear(latent, latent),
        nn.ReLU(),
        nn.Linear(latent, 3),
    )
    # zero-initialized final layer: the decoder starts at "no deformation"
    nn.init.zeros_(head[-1].weight)
    nn.init.zeros_(head[-1].bias)
    return head


class SkeletonVAE(nn.Module):
    """MLP pair over bone-scale vectors; decoder output is positive."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        trunk = []
        prev = config.n_bones
        for w in config.mlp1_widths[:-1]:
            trunk += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        self.enc_trunk = nn.Sequential(*trunk)
        self.enc_mu = nn.Linear(prev, config.latent_dim)
        self.enc_log_var = nn.Linear(prev, config.latent_dim)
        dec = []
        prev = config.latent_dim
        for w in config.mlp2_widths:
            dec += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        dec.append(nn.Linear(prev, config.n_bones))
        self.dec = nn.Sequential(*dec)

    def encode(self, b_s: torch.Tensor) -> LatentCode:
        h = self.enc_trunk(b_s)
        return LatentCode(self.enc_mu(h), self.enc_log_var(h))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return nn.functional.softplus(self.dec(z) + SOFTPLUS_SHIFT)


class BMotionVAE(nn.Module):
    """Retargeting branch: delta encoder + scale-conditioned delta decoder."""

    STEP_CHANNELS = 1 + 3 + 3 + 3  # scale, first frame, last frame, previous delta

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.encoder = STGCNStack(4, c.stgcn_channels, c.strides, c.temporal_kernel, c.dropout)
        self.enc_dense = nn.Linear(c.stgcn_channels[-1] + 6, c.latent_dim)
        self.enc_mu = nn.Linear(c.latent_dim, c.latent_dim)
        self.enc_log_var = nn.Linear(c.latent_dim, c.latent_dim)
        self.cell = GGRUCell(self.STEP_CHANNELS, c.latent_dim)
        self.init_state = nn.Linear(1 + 6, c.latent_dim)
        # damped latent injection: the sampled code enters the initial hidden
        # state at a learned (initially small) gain so reparameterization
        # noise does not drown the scale conditioning during training
        self.z_gain = nn.Parameter(torch.full((c.latent_dim,), 0.1))
        self.head = _delta_head(c.latent_dim)

    def encode(self, delta, scale_ch, first_last, adj) -> LatentCode:
        t = delta.shape[1]
        x = torch.cat([delta, scale_ch.unsqueeze(1).expand(-1, t, -1, -1)], dim=-1)
        feat = self.encoder(x, adj)
        h = torch.relu(self.enc_dense(torch.cat([feat, first_last], dim=-1)))
        return LatentCode(self.enc_mu(h), self.enc_log_var(h))

    def decode(self, z, scale_ch, first_last, n_frames, adj_s, teacher=None) -> torch.Tensor:
        prev = torch.zeros(z.shape[0], z.shape[1], 3, dtype=z.dtype, device=z.device)
        cond = torch.cat([scale_ch, first_last], dim=-1)
        amp = scale_amplitude(scale_ch)
        # warm-started hidden state kills the rollout transient on early frames
        h = z * self.z_gain + torch.tanh(self.init_state(cond))
        outs = []
        for t in range(n_frames):
            h = self.cell(torch.cat([cond, prev], dim=-1), h, adj_s)
            d = self.head(h) * amp
            outs.append(d)
            prev = teacher[:, t] if teacher is not None else d
        return torch.stack(outs, dim=1)


class AMotionVAE(nn.Module):
    """Adaptation branch: encodes A-deltas plus a thin encoding of B's motion."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.encoder = STGCNStack(3, c.stgcn_channels, c.strides, c.temporal_kernel, c.dropout)
        self.context_encoder = STGCNStack(
            8, c.stgcn3_channels, c.strides, c.temporal_kernel, c.dropout
        )
        ctx = c.stgcn3_channels[-1]
        self.merge = nn.Linear(c.stgcn_channels[-1] + ctx + 6, c.latent_dim)
        self.enc_mu = nn.Linear(c.latent_dim, c.latent_dim)
        self.enc_log_var = nn.Linear(c.latent_dim, c.latent_dim)
        self.cell = GGRUCell(ctx + 6 + 3, c.latent_dim)
        self.init_state = nn.Linear(ctx + 6, c.latent_dim)
        self.z_gain = nn.Parameter(torch.full((c.latent_dim,), 0.1))
        self.head = _delta_head(c.latent_dim)

    def encode_context(self, q_b: torch.Tensor, root: int, adj: torch.Tensor) -> torch.Tensor:
        """Pooled per-joint features of B's motion: [B, N, ctx].

        Channels: position (3), forward-difference velocity (3, last frame
        zero), distance to B's root at the first and at the last frame.
        """
        vel = torch.zeros_like(q_b)
        vel[:, :-1] = q_b[:, 1:] - q_b[:, :-1]
        d0 = torch.linalg.vector_norm(q_b - q_b[:, :1, root : root + 1, :], dim=-1, keepdim=True)
        dt = torch.linalg.vector_norm(q_b - q_b[:, -1:, root : root + 1, :], dim=-1, keepdim=True)
        x = torch.cat([q_b, vel, d0, dt], dim=-1)
        return self.context_encoder(x, adj)

    def encode(self, delta_a, context_b, first_last, adj) -> LatentCode:
        feat = self.encoder(delta_a, adj)
        h = torch.relu(self.merge(torch.cat([feat, context_b, first_last], dim=-1)))
        return LatentCode(self.enc_mu(h), self.enc_log_var(h))

    def decode(self, z, context_b, first_last, n_frames, adj_s, amp, teacher=None) -> torch.Tensor:
        prev = torch.zeros(z.shape[0], z.shape[1], 3, dtype=z.dtype, device=z.device)
        cond = torch.cat([context_b, first_last], dim=-1)
        h = z * self.z_gain + torch.tanh(self.init_state(cond))
        outs = []
        for t in range(n_frames):
            h = self.cell(torch.cat([cond, prev], dim=-1), h, adj_s)
            d = self.head(h) * amp
            outs.append(d)
            prev = teacher[:, t] if teacher is not None else d
        return torch.stack(outs, dim=1)


class InteractionModel(nn.Module):
    """The full model plus the skeleton's adjacency buffers."""

    def __init__(self, config: ModelConfig, skeleton: Skeleton):
        super().__init__()
        if config.n_joints != skeleton.n_joints or config.n_bones != skeleton.n_bones:
            raise ShapeError("config joint/bone counts do not match skeleton")
        self.config = config
        self.skeleton = skeleton
        adj = torch.as_tensor(adjacency(skeleton), dtype=torch.get_default_dtype())
        self.register_buffer("adj", adj)
        self.register_buffer("adj_s", adj + torch.eye(skeleton.n_joints, dtype=adj.dtype))
        self.skeleton_vae = SkeletonVAE(config)
        self.b_vae = BMotionVAE(config)
        self.a_vae = AMotionVAE(config)

    def encode_skeleton(self, b_s: torch.Tensor) -> LatentCode:
        return self.skeleton_vae.encode(b_s)

    def decode_skeleton(self, z: torch.Tensor) -> torch.Tensor:
        return self.skeleton_vae.decode(z)

    def encode_delta_b(self, delta, scale_ch, first_last) -> LatentCode:
        return self.b_vae.encode(delta, scale_ch, first_last, self.adj)

    def decode_delta_b(self, z, scale_ch, first_last, n_frames, teacher=None) -> torch.Tensor:
        return self.b_vae.decode(z, scale_ch, first_last, n_frames, self.adj_s, teacher)

    def encode_context_b(self, q_b: torch.Tensor) -> torch.Tensor:
        return self.a_vae.encode_context(q_b, self.skeleton.root, self.adj)

    def encode_delta_a(self, delta_a, context_b, first_last) -> LatentCode:
        return self.a_vae.encode(delta_a, context_b, first_last, self.adj)

    def decode_delta_a(self, z, context_b, first_last, n_frames, amp, teacher=None) -> torch.Tensor:
        return self.a_vae.decode(z, context_b, first_last, n_frames, self.adj_s, amp, teacher)

    def zero_motion_code(self, batch: int) -> torch.Tensor:
        p = next(self.parameters())
        return torch.zeros(
            batch, self.config.n_joints, self.config.latent_dim, dtype=p.dtype, device=p.device
        )


# ---------------------------------------------------------------- checkpoints

CKPT_MANIFEST = "manifest.json"
CKPT_PARAMS = "params.pt"


def save_checkpoint(model: InteractionModel, path, extra: dict = None) -> Path:
    """Write manifest.json (config, skeleton, shapes) + params.pt."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    sk = model.skeleton
    manifest = {
        "format_version": 1,
        "package_version": __version__,
        "torch_version": torch.__version__,
        "config": asdict(model.config),
        "skeleton": {
            "joint_names": list(sk.joint_names),
            "parents": sk.parents.tolist(),
            "template_offsets": sk.template_offsets.tolist(),
        },
        "skeleton_hash": sk.content_hash(),
        "param_shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    if extra:
        manifest["extra"] = extra
    (root / CKPT_MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    torch.save(model.state_dict(), root / CKPT_PARAMS)
    return root


def load_checkpoint(path) -> InteractionModel:
    """Rebuild the model from a checkpoint; shapes validated before loading."""
    root = Path(path)
    mpath = root / CKPT_MANIFEST
    if not mpath.exists():
        raise FormatError(f"no {CKPT_MANIFEST} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint manifest in {root}") from e
    if manifest.get("format_version") != 1:
        raise FormatError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    sk = Skeleton(
        joint_names=tuple(manifest["skeleton"]["joint_names"]),
        parents=np.asarray(manifest["skeleton"]["parents"], dtype=np.int64),
        template_offsets=np.asarray(manifest["skeleton"]["template_offsets"], dtype=np.float64),
    )
    if sk.content_hash() != manifest["skeleton_hash"]:
        raise FormatError("checkpoint skeleton hash mismatch")
    config = ModelConfig(**manifest["config"])
    model = InteractionModel(config, sk)
    state = torch.load(root / CKPT_PARAMS, weights_only=True)
    expect = manifest["param_shapes"]
    have = model.state_dict()
    if set(state) != set(expect) or set(state) != set(have):
        raise FormatError("checkpoint parameter names do not match manifest/model")
    for name, tensor in state.items():
        if list(tensor.shape) != expect[name] or tensor.shape != have[name].shape:
            raise FormatError(f"checkpoint shape mismatch for {name}")
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- inference


def _clip_conditioning(model: InteractionModel, template, scales: BoneScaleVector):
    from .data import normalize  # local import to avoid a module cycle

    dtype = next(model.parameters()).dtype
    normed, record = normalize(template)
    fa = torch.tensor(normed.motion_A.frames, dtype=dtype).unsqueeze(0)
    fb = torch.tensor(normed.motion_B.frames, dtype=dtype).unsqueeze(0)
    sc = torch.as_tensor(per_joint_scales(model.skeleton, scales), dtype=dtype)
    scale_ch = sc.reshape(1, -1, 1)
    fl_b = torch.cat([fb[:, 0], fb[:, -1]], dim=-1)
    fl_a = torch.cat([fa[:, 0], fa[:, -1]], dim=-1)
    return normed, record, fa, fb, scale_ch, fl_a, fl_b


def retarget_clip(
    model: InteractionModel,
    template,
    scales: BoneScaleVector,
    z_b: torch.Tensor = None,
    z_a: torch.Tensor = None,
):
    """Decode both characters for a target scale vector; z defaults to 0.

    The template clip is centered before decoding and the outputs are
    mapped back, so conditioning is position-invariant.
    """
    from .core import InteractionClip, Motion
    from .data import denormalize

    if scales.n_bones != model.skeleton.n_bones:
        raise ShapeError("scale vector length != model skeleton bone count")
    if template.n_frames % model.config.temporal_reduction != 0:
        raise ShapeError(
            f"T={template.n_frames} not divisible by {model.config.temporal_reduction}"
        )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            normed, record, fa, fb, scale_ch, fl_a, fl_b = _clip_conditioning(
                model, template, scales
            )
            t = template.n_frames
            if z_b is None:
                z_b = model.zero_motion_code(1)
            if z_a is None:
                z_a = model.zero_motion_code(1)
            delta_b = model.decode_delta_b(z_b, scale_ch, fl_b, t)
            q_b = fb + delta_b
            ctx = model.encode_context_b(q_b)
            amp = scale_amplitude(scale_ch)
            delta_a = model.decode_delta_a(z_a, ctx, fl_a, t, amp)
            q_a = fa + delta_a
        out = InteractionClip(
            skeleton_A=template.skeleton_A,
            skeleton_B=template.skeleton_B,
            motion_A=Motion(q_a[0].double().numpy(), template.motion_A.frame_rate),
            motion_B=Motion(q_b[0].double().numpy(), template.motion_B.frame_rate),
            interaction_kind=template.interaction_kind,
            scale_B=scales,
            key_pairs=template.key_pairs,
        )
        return denormalize(out, record)
    finally:
        if was_training:
            model.train()


def sample_scales(model: InteractionModel, count: int, seed: int = 0) -> list:
    """Draw bone-scale vectors from the learned skeleton prior."""
    gen = torch.Generator().manual_seed(int(seed))
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = torch.randn(count, model.config.latent_dim, generator=gen, dtype=dtype)
            decoded = model.decode_skeleton(z)
        return [BoneScaleVector(row.double().numpy()) for row in decoded]
    finally:
        if was_training:
            model.train()


def snap_bone_lengths(clip, scales: BoneScaleVector):
    """Project both characters' frames onto rigid bones.

    B's targets are the template lengths times ``scales``; A keeps its own
    template lengths. Bone directions are untouched, so the correction is a
    per-joint translation of subtrees.
    """
    from .core import InteractionClip, Motion
    from .mesh import project_bone_lengths

    target_b = clip.skeleton_B.template_bone_lengths * scales.scales
    target_a = clip.skeleton_A.template_bone_lengths
    return InteractionClip(
        skeleton_A=clip.skeleton_A,
        skeleton_B=clip.skeleton_B,
        motion_A=Motion(
            project_bone_lengths(clip.motion_A.frames, clip.skeleton_A, target_a),
            clip.motion_A.frame_rate,
        ),
        motion_B=Motion(
            project_bone_lengths(clip.motion_B.frames, clip.skeleton_B, target_b),
            clip.motion_B.frame_rate,
        ),
        interaction_kind=clip.interaction_kind,
        scale_B=scales,
        key_pairs=clip.key_pairs,
    )


def generate_clips(model: InteractionModel, template, count: int, seed: int = 0) -> list:
    """Sample skeletons from the prior and decode a clip for each.

    Sampled skeletons have no ground-truth geometry to compare against, so
    the decoded frames are snapped onto exact per-frame bone lengths.
    """
    return [
        snap_bone_lengths(retarget_clip(model, template, s), s)
        for s in sample_scales(model, count, seed)
    ]
