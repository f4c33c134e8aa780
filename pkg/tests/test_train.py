"""Loss oracles, training-loop behavior, and a gradient spot check."""

import math

import numpy as np
import pytest
import torch

from duetsynth.core import Motion, Skeleton, bone_lengths
from duetsynth.data import DatasetSpec, gen_dataset
from duetsynth.errors import ConfigError, ShapeError, TrainingDivergedError
from duetsynth.generators import desk_skeleton
from duetsynth.net import InteractionModel, LatentCode, ModelConfig
from duetsynth.train import (
    Batch,
    LossWeights,
    TrainConfig,
    batch_loss,
    bone_length_loss,
    build_pairs,
    collate,
    kl_divergence,
    loss_Bm,
    loss_Bs,
    motion_loss_terms,
    save_history,
    train,
    zero_eps,
)


def chain_skeleton(n=3):
    return Skeleton(
        joint_names=tuple(f"j{i}" for i in range(n)),
        parents=np.arange(-1, n - 1),
        template_offsets=np.vstack([np.zeros(3)] + [[1.0, 0.0, 0.0]] * (n - 1)),
    )


def kl_oracle_mc(mu, log_var, n=1_000_000, seed=0):
    """Monte-Carlo KL(q || N(0, I)) from samples of q."""
    rng = np.random.default_rng(seed)
    sd = np.exp(0.5 * log_var)
    z = mu + sd * rng.standard_normal((n,) + mu.shape)
    log_q = -0.5 * (((z - mu) / sd) ** 2 + log_var + math.log(2 * math.pi))
    log_p = -0.5 * (z**2 + math.log(2 * math.pi))
    return float((log_q - log_p).sum(axis=tuple(range(1, z.ndim))).mean())


class TestKLDivergence:
    def test_standard_normal_is_zero(self):
        code = LatentCode(torch.zeros(4, 5), torch.zeros(4, 5))
        assert float(kl_divergence(code)) == 0.0

    def test_unit_mean_single_dim(self):
        code = LatentCode(torch.ones(1, 1), torch.zeros(1, 1))
        assert float(kl_divergence(code)) == pytest.approx(0.5, abs=1e-12)

    def test_sums_dims_averages_batch(self):
        code = LatentCode(torch.ones(3, 2, 2), torch.zeros(3, 2, 2))
        assert float(kl_divergence(code)) == pytest.approx(2.0, abs=1e-6)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(size=4) * 0.8
        log_var = rng.normal(size=4) * 0.5
        code = LatentCode(
            torch.tensor(mu).unsqueeze(0), torch.tensor(log_var).unsqueeze(0)
        )
        closed = float(kl_divergence(code))
        mc = kl_oracle_mc(mu, log_var, seed=4)
        assert abs(closed - mc) <= 0.01 * max(closed, 1e-6)


class TestBoneLengthLoss:
    def test_identical_is_zero(self, rng):
        sk = chain_skeleton(4)
        frames = rng.normal(size=(5, 4, 3))
        m = Motion(frames)
        assert float(bone_length_loss(m, m, sk)) == 0.0

    def test_single_bone_constant_offset(self):
        sk = chain_skeleton(3)
        t = 6
        base = np.zeros((t, 3, 3))
        base[:, 1, 0] = 1.0
        base[:, 2, 0] = 2.0
        longer = base.copy()
        longer[:, 2, 0] = 2.25  # leaf bone longer by 0.25 in every frame
        got = float(bone_length_loss(Motion(longer), Motion(base), sk))
        assert got == pytest.approx(t * 0.25**2, abs=1e-12)

    def test_loop_oracle(self, rng):
        sk = chain_skeleton(5)
        pred = rng.normal(size=(4, 5, 3))
        gt = rng.normal(size=(4, 5, 3))
        want = 0.0
        for t in range(4):
            bp = bone_lengths(pred[t], sk)
            bg = bone_lengths(gt[t], sk)
            want += float(((bp - bg) ** 2).sum())
        got = float(bone_length_loss(Motion(pred), Motion(gt), sk))
        assert got == pytest.approx(want, abs=1e-9)

    def test_batched_mean(self, rng):
        sk = chain_skeleton(3)
        pred = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
        gt = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
        per = [float(bone_length_loss(pred[i], gt[i], sk)) for i in range(2)]
        got = float(bone_length_loss(pred, gt, sk))
        assert got == pytest.approx(np.mean(per), abs=1e-9)

    def test_shape_mismatch(self, rng):
        sk = chain_skeleton(3)
        with pytest.raises(ShapeError):
            bone_length_loss(
                torch.zeros(3, 3, 3), torch.zeros(4, 3, 3), sk
            )


class TestLossWeights:
    def test_published_defaults_read_back_exactly(self):
        w = LossWeights()
        assert (w.position, w.velocity, w.bone, w.kl) == (0.75, 0.1, 0.05, 0.1)

    def test_sum_must_be_one(self):
        with pytest.raises(ConfigError):
            LossWeights(position=0.9, velocity=0.1, bone=0.05, kl=0.1)

    def test_range_checked(self):
        with pytest.raises(ConfigError):
            LossWeights(position=-0.1, velocity=0.5, bone=0.5, kl=0.1)


class TestMotionLoss:
    def test_perfect_reconstruction_is_zero(self, rng):
        sk = chain_skeleton(3)
        q = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
        code = LatentCode(torch.zeros(2, 3, 8), torch.zeros(2, 3, 8))
        terms = motion_loss_terms(q, q, code, sk, LossWeights())
        assert float(terms["total"]) == 0.0

    def test_constant_offset_is_position_only(self, rng):
        sk = chain_skeleton(3)
        gt = torch.tensor(rng.normal(size=(1, 4, 3, 3)))
        c = 0.37
        pred = gt + c
        code = LatentCode(torch.zeros(1, 3, 8), torch.zeros(1, 3, 8))
        w = LossWeights()
        terms = motion_loss_terms(pred, gt, code, sk, w)
        assert float(terms["velocity"]) == pytest.approx(0.0, abs=1e-12)
        assert float(terms["bone"]) == pytest.approx(0.0, abs=1e-12)
        assert float(terms["total"]) == pytest.approx(w.position * c, abs=1e-9)

    def test_scalar_formula_oracle(self, rng):
        sk = chain_skeleton(4)
        pred = rng.normal(size=(2, 5, 4, 3))
        gt = rng.normal(size=(2, 5, 4, 3))
        mu = rng.normal(size=(2, 4, 6))
        log_var = rng.normal(size=(2, 4, 6)) * 0.3
        code = LatentCode(torch.tensor(mu), torch.tensor(log_var))
        w = LossWeights()
        terms = motion_loss_terms(torch.tensor(pred), torch.tensor(gt), code, sk, w)

        pos = np.abs(pred - gt).mean()
        vel = np.abs(np.diff(pred, axis=1) - np.diff(gt, axis=1)).mean()
        bl = np.mean(
            [
                sum(
                    float(((bone_lengths(p, sk) - bone_lengths(g, sk)) ** 2).sum())
                    for p, g in zip(pred[i], gt[i])
                )
                for i in range(2)
            ]
        )
        kl = np.mean(
            [
                0.5 * (mu[i] ** 2 + np.exp(log_var[i]) - 1.0 - log_var[i]).sum()
                for i in range(2)
            ]
        )
        want = w.position * pos + w.velocity * vel + w.bone * bl + w.kl * kl
        assert float(terms["total"]) == pytest.approx(want, abs=1e-9)

    def test_kl_scale_only_touches_kl(self, rng):
        sk = chain_skeleton(3)
        pred = torch.tensor(rng.normal(size=(1, 4, 3, 3)))
        gt = torch.tensor(rng.normal(size=(1, 4, 3, 3)))
        code = LatentCode(
            torch.tensor(rng.normal(size=(1, 3, 4))),
            torch.tensor(rng.normal(size=(1, 3, 4))),
        )
        w = LossWeights()
        full = motion_loss_terms(pred, gt, code, sk, w, kl_scale=1.0)
        half = motion_loss_terms(pred, gt, code, sk, w, kl_scale=0.5)
        diff = float(full["total"] - half["total"])
        assert diff == pytest.approx(0.5 * w.kl * float(full["kl"]), abs=1e-9)
        assert float(loss_Bm(pred, gt, code, sk, w)) == pytest.approx(
            float(full["total"]), abs=1e-12
        )


class TestLossBs:
    def test_matches_hand_composition(self):
        sk = desk_skeleton()
        torch.manual_seed(0)
        model = InteractionModel(ModelConfig.tiny(sk), sk).double()
        model.eval()
        b_s = torch.rand(4, sk.n_bones, dtype=torch.float64) + 0.5
        with torch.no_grad():
            got = float(loss_Bs(b_s, model, generator=torch.Generator().manual_seed(9)))
            code = model.encode_skeleton(b_s)
            eps = torch.randn(
                code.mu.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64
            )
            z = code.mu + torch.exp(0.5 * code.log_var) * eps
            recon = model.decode_skeleton(z)
            want = float(((recon - b_s) ** 2).sum(dim=-1).mean() + kl_divergence(code))
        assert got == pytest.approx(want, abs=1e-12)


class TestTrainConfig:
    def test_warmup_schedule(self):
        cfg = TrainConfig(epochs=50)
        assert cfg.warmup_epochs() == 5
        assert cfg.kl_scale(0) == pytest.approx(0.2)
        assert cfg.kl_scale(4) == pytest.approx(1.0)
        assert cfg.kl_scale(30) == 1.0

    def test_warmup_disabled(self):
        cfg = TrainConfig(epochs=50, kl_warmup_epochs=0)
        assert cfg.kl_scale(0) == 1.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(val_fraction=1.0)


def small_model_config(skeleton):
    return ModelConfig.for_skeleton(
        skeleton,
        latent_dim=16,
        stgcn_channels=(8, 8, 8, 16, 16),
        stgcn3_channels=(4, 4, 4, 4, 4),
        mlp1_widths=(4, 4, 8, 8, 16),
        mlp2_widths=(16, 8, 8, 4),
        dropout=0.0,
    )


@pytest.fixture(scope="module")
def train_dataset():
    spec = DatasetSpec(
        base_kinds=("hold", "lean"),
        scale_min=0.9,
        scale_max=1.1,
        scale_step=0.1,
        n_frames=8,
        seed=11,
    )
    return gen_dataset(spec)


class TestPairsAndBatches:
    def test_pair_count_and_fields(self, train_dataset):
        pairs = build_pairs(train_dataset)
        assert len(pairs) == len(train_dataset.variations)
        sk = train_dataset.clips[0].skeleton_B
        for p in pairs:
            assert p.tpl_b.shape == p.var_b.shape
            assert p.scale_ch[sk.root] == 1.0
            assert p.b_s.shape == (sk.n_bones,)

    def test_template_centering(self, train_dataset):
        pairs = build_pairs(train_dataset)
        p = pairs[0]
        mid = 0.5 * (p.tpl_a[0, 0] + p.tpl_b[0, 0])
        assert np.max(np.abs(mid)) < 1e-12

    def test_collate_deltas_and_conditioning(self, train_dataset):
        pairs = build_pairs(train_dataset)
        batch = collate(pairs, [0, 1], dtype=torch.float64)
        assert torch.allclose(batch.delta_b, batch.var_b - batch.tpl_b)
        assert torch.allclose(
            batch.fl_b, torch.cat([batch.tpl_b[:, 0], batch.tpl_b[:, -1]], dim=-1)
        )
        assert batch.scale_ch.shape == (2, 7, 1)


class TestTrainLoop:
    def test_epochs_zero_returns_initialized_model(self, train_dataset):
        model, history = train(train_dataset, TrainConfig(epochs=0, seed=0))
        assert history == []
        assert isinstance(model, InteractionModel)

    def test_short_run_decreases_loss_and_is_deterministic(self, train_dataset):
        sk = train_dataset.clips[0].skeleton_B
        mc = small_model_config(sk)
        cfg = TrainConfig(batch_size=4, epochs=3, seed=5)
        _, h1 = train(train_dataset, cfg, model_config=mc)
        _, h2 = train(train_dataset, cfg, model_config=mc)
        assert len(h1) == 3
        assert h1[-1]["total"] < h1[0]["total"]
        for a, b in zip(h1, h2):
            assert a["total"] == pytest.approx(b["total"], rel=1e-4)
        assert set(h1[0]) == {"epoch", "loss_Bs", "loss_Bm", "loss_Am", "total", "val"}

    def test_indivisible_frames_rejected(self):
        spec = DatasetSpec(
            base_kinds=("hold",), scale_min=0.9, scale_max=1.1, scale_step=0.1,
            n_frames=12, seed=1,
        )
        ds = gen_dataset(spec)
        with pytest.raises(ShapeError):
            train(ds, TrainConfig(epochs=1))

    def test_no_variations_rejected(self):
        spec = DatasetSpec(
            base_kinds=("hold",), scale_min=1.0, scale_max=1.0, scale_step=0.05,
            n_frames=8, seed=1,
        )
        ds = gen_dataset(spec)
        with pytest.raises(ConfigError):
            train(ds, TrainConfig(epochs=1))

    def test_divergence_aborts_with_last_good_state(self, train_dataset):
        sk = train_dataset.clips[0].skeleton_B
        mc = small_model_config(sk)
        cfg = TrainConfig(batch_size=8, epochs=5, seed=2, learning_rate=1e30)
        with pytest.raises(TrainingDivergedError) as exc:
            train(train_dataset, cfg, model_config=mc)
        assert exc.value.last_good_state is not None
        assert isinstance(exc.value.history, list)

    def test_save_history(self, train_dataset, tmp_path):
        sk = train_dataset.clips[0].skeleton_B
        model, history = train(
            train_dataset, TrainConfig(batch_size=8, epochs=2, seed=0),
            model_config=small_model_config(sk),
        )
        out = save_history(history, tmp_path / "history.csv")
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss_Bs,loss_Bm,loss_Am,total,val"
        assert len(lines) == 3


class TestOverfitHarness:
    def test_single_clip_position_term_collapses(self, train_dataset):
        """Optimize the sampled loss; measure at the posterior mean."""
        sk = train_dataset.clips[0].skeleton_B
        torch.manual_seed(0)
        model = InteractionModel(small_model_config(sk), sk)
        pairs = build_pairs(train_dataset)
        batch = collate(pairs, [0])
        opt = torch.optim.Adam(model.parameters(), lr=3e-3)
        gen = torch.Generator().manual_seed(0)

        def posterior_mean_position():
            model.eval()
            with torch.no_grad():
                _, parts = batch_loss(model, batch, eps=zero_eps(model, batch))
            model.train()
            return float(parts["bm_position"])

        first = posterior_mean_position()
        for step in range(500):
            total, _ = batch_loss(model, batch, generator=gen)
            opt.zero_grad()
            total.backward()
            opt.step()
        last = posterior_mean_position()
        assert last < 0.05 * first, f"position term {last:.5f} vs initial {first:.5f}"


def random_batch(skeleton, n_frames, batch, rng, dtype=torch.float64):
    n = skeleton.n_joints
    tpl_a = torch.tensor(rng.normal(size=(batch, n_frames, n, 3)), dtype=dtype)
    tpl_b = torch.tensor(rng.normal(size=(batch, n_frames, n, 3)), dtype=dtype)
    var_a = tpl_a + 0.1 * torch.tensor(rng.normal(size=tpl_a.shape), dtype=dtype)
    var_b = tpl_b + 0.1 * torch.tensor(rng.normal(size=tpl_b.shape), dtype=dtype)
    scale_ch = torch.tensor(rng.uniform(0.8, 1.2, size=(batch, n, 1)), dtype=dtype)
    return Batch(
        tpl_a=tpl_a,
        tpl_b=tpl_b,
        var_a=var_a,
        var_b=var_b,
        delta_a=var_a - tpl_a,
        delta_b=var_b - tpl_b,
        scale_ch=scale_ch,
        fl_a=torch.cat([tpl_a[:, 0], tpl_a[:, -1]], dim=-1),
        fl_b=torch.cat([tpl_b[:, 0], tpl_b[:, -1]], dim=-1),
        b_s=torch.tensor(rng.uniform(0.8, 1.2, size=(batch, skeleton.n_bones)), dtype=dtype),
    )


def nudge_off_kinks(model, rng):
    """Move the model to a generic parameter point for derivative checks.

    The loss is piecewise smooth: zero-initialized heads make whole head
    layers dead directions, and at init the spatial conv's ReLU zeros land
    exactly on the following ReLU kink (batch norm is identity in eval
    mode), where one-sided autograd and central differences legitimately
    disagree. Randomizing the heads, BN affines, and BN running stats puts
    every activation strictly off its kink.
    """
    with torch.no_grad():
        torch.nn.init.normal_(model.b_vae.head[-1].weight, std=0.3)
        torch.nn.init.normal_(model.a_vae.head[-1].weight, std=0.3)
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.copy_(torch.tensor(rng.uniform(0.9, 1.1, size=m.weight.shape)))
                m.bias.copy_(torch.tensor(rng.normal(0.0, 0.05, size=m.bias.shape)))
                m.running_mean.copy_(
                    torch.tensor(rng.normal(0.0, 0.05, size=m.running_mean.shape))
                )
                m.running_var.copy_(
                    torch.tensor(rng.uniform(0.9, 1.1, size=m.running_var.shape))
                )


class TestGradientSpotCheck:
    def test_autograd_matches_central_differences(self, rng):
        """Random subset of coordinates; the full sweep runs in acceptance."""
        sk = chain_skeleton(3)
        torch.manual_seed(13)
        model = InteractionModel(ModelConfig.tiny(sk), sk).double()
        nudge_off_kinks(model, rng)
        model.eval()
        batch = random_batch(sk, 8, 2, rng)
        eps = (
            torch.tensor(rng.normal(size=(2, model.config.latent_dim))),
            torch.tensor(rng.normal(size=(2, 3, model.config.latent_dim))),
            torch.tensor(rng.normal(size=(2, 3, model.config.latent_dim))),
        )

        def loss_fn():
            total, _ = batch_loss(model, batch, eps=eps)
            return total

        total = loss_fn()
        total.backward()
        params = [p for p in model.parameters() if p.requires_grad]
        picks = []
        for i, p in enumerate(params):
            flat = p.detach().reshape(-1)
            for j in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                picks.append((i, int(j)))
        worst = 0.0
        for i, j in picks:
            p = params[i]
            g_auto = float(p.grad.reshape(-1)[j])
            with torch.no_grad():
                flat = p.reshape(-1)
                orig = float(flat[j])
                h = 1e-6 * max(1.0, abs(orig))
                flat[j] = orig + h
                up = float(loss_fn())
                flat[j] = orig - h
                down = float(loss_fn())
                flat[j] = orig
            g_fd = (up - down) / (2 * h)
            # denominator floor absorbs the FD rounding noise (~1e-10 absolute
            # for a loss of order 1 at h=1e-6) on near-zero gradients
            rel = abs(g_auto - g_fd) / max(1e-5, abs(g_auto) + abs(g_fd))
            worst = max(worst, rel)
        assert worst <= 1e-4, f"worst relative gradient error {worst:.2e}"
