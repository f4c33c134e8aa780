"""Metric oracles, FID properties, extractor behavior, and the harness."""

import numpy as np
import pytest
import torch
from scipy import linalg as sla

from duetsynth.core import BoneScaleVector, InteractionClip, Motion, bone_lengths
from duetsynth.data import DatasetSpec, SplitProtocol, gen_dataset, split
from duetsynth.errors import ConfigError, DomainError, ShapeError
from duetsynth.generators import desk_skeleton, gen_base_clip
from duetsynth.metrics import (
    CSV_COLUMNS,
    FeatureExtractor,
    clip_features,
    e_b,
    e_r,
    evaluate,
    fid,
    fid_details,
    interaction_windows,
    jpd,
    motion_windows,
    train_feature_extractor,
    write_metrics_csv,
    write_summary_json,
)
from duetsynth.net import InteractionModel, ModelConfig


def translate_clip(clip, offset):
    return InteractionClip(
        skeleton_A=clip.skeleton_A,
        skeleton_B=clip.skeleton_B,
        motion_A=Motion(clip.motion_A.frames + offset, clip.motion_A.frame_rate),
        motion_B=Motion(clip.motion_B.frames + offset, clip.motion_B.frame_rate),
        interaction_kind=clip.interaction_kind,
        scale_B=clip.scale_B,
        key_pairs=clip.key_pairs,
    )


class TestEr:
    def test_identical_is_zero(self):
        m = gen_base_clip("hold", t=8, seed=0).motion_B
        assert e_r(m, m) == 0.0

    def test_uniform_offset(self, rng):
        frames = rng.normal(size=(5, 4, 3))
        d = np.array([0.3, -0.4, 0.0])  # norm 0.5
        got = e_r(Motion(frames + d), Motion(frames))
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_loop_oracle(self, rng):
        p = rng.normal(size=(4, 3, 3))
        g = rng.normal(size=(4, 3, 3))
        want = np.mean(
            [
                np.sqrt(((p[t, j] - g[t, j]) ** 2).sum())
                for t in range(4)
                for j in range(3)
            ]
        )
        assert e_r(Motion(p), Motion(g)) == pytest.approx(want, abs=1e-9)

    def test_invariant_under_shared_translation(self, rng):
        p = rng.normal(size=(4, 3, 3))
        g = rng.normal(size=(4, 3, 3))
        d = rng.normal(size=3)
        assert e_r(Motion(p + d), Motion(g + d)) == pytest.approx(
            e_r(Motion(p), Motion(g)), abs=1e-9
        )

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            e_r(Motion(rng.normal(size=(4, 3, 3))), Motion(rng.normal(size=(5, 3, 3))))


class TestEb:
    def test_exactly_scaled_clip(self):
        from duetsynth.core import apply_bone_scales

        sk = desk_skeleton()
        clip = gen_base_clip("lean", t=8, seed=1)
        scales = BoneScaleVector.uniform(sk.n_bones, 1.2)
        scaled = apply_bone_scales(clip.motion_B, sk, scales)
        assert e_b(scaled, sk, scales) < 1e-12

    def test_single_bone_offset(self):
        sk = desk_skeleton()
        clip = gen_base_clip("hold", t=6, seed=2)
        frames = clip.motion_B.frames.copy()
        # push one leaf joint 0.05 beyond its parent along the bone direction
        child = sk.bones[3]
        parent = sk.parents[child]
        seg = frames[:, child] - frames[:, parent]
        length = np.linalg.norm(seg, axis=-1, keepdims=True)
        frames[:, child] += seg / length * 0.05
        got = e_b(Motion(frames), sk, BoneScaleVector.ones(sk.n_bones))
        assert got == pytest.approx(0.05 / sk.n_bones, abs=1e-9)

    def test_loop_oracle(self, rng):
        sk = desk_skeleton()
        frames = rng.normal(size=(3, sk.n_joints, 3))
        scales = BoneScaleVector(rng.uniform(0.8, 1.2, sk.n_bones))
        target = scales.scales * sk.template_bone_lengths
        total = 0.0
        for t in range(3):
            bl = bone_lengths(frames[t], sk)
            for i in range(sk.n_bones):
                total += abs(bl[i] - target[i])
        want = total / (3 * sk.n_bones)
        assert e_b(Motion(frames), sk, scales) == pytest.approx(want, abs=1e-9)

    def test_translation_invariant(self, rng):
        sk = desk_skeleton()
        frames = rng.normal(size=(3, sk.n_joints, 3))
        scales = BoneScaleVector.ones(sk.n_bones)
        assert e_b(Motion(frames + 5.0), sk, scales) == pytest.approx(
            e_b(Motion(frames), sk, scales), abs=1e-9
        )

    def test_wrong_scale_length(self, rng):
        sk = desk_skeleton()
        with pytest.raises(ShapeError):
            e_b(Motion(rng.normal(size=(3, sk.n_joints, 3))), sk, np.ones(3))


class TestJpd:
    def test_identical_is_zero(self):
        clip = gen_base_clip("hold", t=8, seed=3)
        assert jpd(clip, clip) == 0.0

    def test_rigid_translation_is_zero(self):
        clip = gen_base_clip("lean", t=8, seed=4)
        moved = translate_clip(clip, np.array([1.0, -2.0, 0.5]))
        assert jpd(moved, clip) == pytest.approx(0.0, abs=1e-9)

    def test_loop_oracle(self, rng):
        base = gen_base_clip("hold", t=6, seed=5)
        pred = translate_clip(base, rng.normal(size=3) * 0.1)
        pred.motion_A.frames.flags.writeable = False
        noisy = InteractionClip(
            skeleton_A=base.skeleton_A,
            skeleton_B=base.skeleton_B,
            motion_A=Motion(base.motion_A.frames + rng.normal(size=base.motion_A.frames.shape) * 0.05),
            motion_B=Motion(base.motion_B.frames + rng.normal(size=base.motion_B.frames.shape) * 0.05),
            interaction_kind=base.interaction_kind,
            scale_B=base.scale_B,
            key_pairs=base.key_pairs,
        )
        total = 0.0
        count = 0
        for a, b in base.key_pairs:
            for t in range(base.n_frames):
                dp = np.sqrt(((noisy.motion_A.frames[t, a] - noisy.motion_B.frames[t, b]) ** 2).sum())
                dg = np.sqrt(((base.motion_A.frames[t, a] - base.motion_B.frames[t, b]) ** 2).sum())
                total += abs(dp - dg)
                count += 1
        assert jpd(noisy, base) == pytest.approx(total / count, abs=1e-9)

    def test_no_pairs_rejected(self):
        clip = gen_base_clip("hold", t=8, seed=0)
        bare = InteractionClip(
            skeleton_A=clip.skeleton_A,
            skeleton_B=clip.skeleton_B,
            motion_A=clip.motion_A,
            motion_B=clip.motion_B,
            interaction_kind=clip.interaction_kind,
            scale_B=clip.scale_B,
        )
        with pytest.raises(DomainError):
            jpd(bare, bare)

    def test_mismatched_pairs_rejected(self):
        clip = gen_base_clip("hold", t=8, seed=0)
        other = InteractionClip(
            skeleton_A=clip.skeleton_A,
            skeleton_B=clip.skeleton_B,
            motion_A=clip.motion_A,
            motion_B=clip.motion_B,
            interaction_kind=clip.interaction_kind,
            scale_B=clip.scale_B,
            key_pairs=((0, 0),),
        )
        with pytest.raises(DomainError):
            jpd(other, clip)


class TestFid:
    def unit_cov_set(self, mean):
        a = np.sqrt(1.5)
        base = np.array([[a, 0.0], [-a, 0.0], [0.0, a], [0.0, -a]])
        return base + np.asarray(mean)

    def test_identical_sets(self, rng):
        x = rng.normal(size=(50, 4))
        assert fid(x, x) <= 1e-6

    def test_mean_shift_closed_form(self):
        m = np.array([0.3, -0.7])
        got = fid(self.unit_cov_set([0, 0]), self.unit_cov_set(m))
        assert got == pytest.approx(float((m**2).sum()), abs=1e-6)

    def test_scipy_sqrtm_oracle(self, rng):
        x = rng.normal(size=(500, 2)) @ rng.normal(size=(2, 2)) + rng.normal(size=2)
        y = rng.normal(size=(400, 2)) @ rng.normal(size=(2, 2)) + rng.normal(size=2)
        mu_x, cov_x = x.mean(0), np.cov(x, rowvar=False)
        mu_y, cov_y = y.mean(0), np.cov(y, rowvar=False)
        want = float(
            ((mu_x - mu_y) ** 2).sum()
            + np.trace(cov_x)
            + np.trace(cov_y)
            - 2.0 * np.trace(sla.sqrtm(cov_x @ cov_y).real)
        )
        assert fid(x, y) == pytest.approx(want, abs=1e-6)

    def test_symmetry(self, rng):
        x = rng.normal(size=(60, 3))
        y = rng.normal(size=(70, 3)) * 1.4 + 0.2
        assert abs(fid(x, y) - fid(y, x)) <= 1e-8

    def test_nonnegative(self, rng):
        for _ in range(5):
            x = rng.normal(size=(30, 4))
            y = rng.normal(size=(25, 4))
            assert fid(x, y) >= 0.0

    def test_too_few_samples(self, rng):
        with pytest.raises(DomainError):
            fid(rng.normal(size=(1, 3)), rng.normal(size=(10, 3)))

    def test_rank_deficient_flagged(self, rng):
        x = rng.normal(size=(3, 6))  # rank <= 2 in 6 dims
        y = rng.normal(size=(40, 6))
        value, ridged = fid_details(x, y)
        assert ridged
        assert np.isfinite(value)

    def test_full_rank_not_flagged(self, rng):
        x = rng.normal(size=(200, 3))
        y = rng.normal(size=(200, 3))
        _, ridged = fid_details(x, y)
        assert not ridged


class TestMotionWindows:
    def test_long_clip_windows(self):
        sk = desk_skeleton()
        clip = gen_base_clip("hold", t=64, seed=0)
        wins = motion_windows(clip.motion_B.frames, sk, window=32)
        assert wins.shape[1:] == (32, sk.n_joints, 3)
        assert wins.shape[0] == 3  # starts 0, 16, 32
        for w in wins:
            assert np.allclose(w[0, sk.root], 0.0)

    def test_short_clip_single_window(self):
        sk = desk_skeleton()
        clip = gen_base_clip("hold", t=16, seed=0)
        wins = motion_windows(clip.motion_B.frames, sk, window=32)
        assert wins.shape == (1, 16, sk.n_joints, 3)

    def test_too_short_rejected(self, rng):
        sk = desk_skeleton()
        with pytest.raises(DomainError):
            motion_windows(rng.normal(size=(3, sk.n_joints, 3)), sk)


@pytest.fixture(scope="module")
def eval_dataset():
    spec = DatasetSpec(
        base_kinds=("hold", "lean"),
        scale_min=0.85,
        scale_max=1.15,
        scale_step=0.05,
        n_frames=16,
        seed=7,
    )
    return gen_dataset(spec)


@pytest.fixture(scope="module")
def eval_model(eval_dataset):
    sk = eval_dataset.clips[0].skeleton_B
    mc = ModelConfig.for_skeleton(
        sk,
        latent_dim=16,
        stgcn_channels=(8, 8, 8, 16, 16),
        stgcn3_channels=(4, 4, 4, 4, 4),
        mlp1_widths=(4, 4, 8, 8, 16),
        mlp2_widths=(16, 8, 8, 4),
        dropout=0.0,
    )
    torch.manual_seed(0)
    return InteractionModel(mc, sk)


class TestFeatureExtractor:
    def test_deterministic_in_eval(self, eval_dataset):
        fe = train_feature_extractor(eval_dataset, window=16, epochs=2, seed=0)
        clip = eval_dataset.template_for("hold")
        a = clip_features(fe, clip)
        b = clip_features(fe, clip)
        assert np.array_equal(a, b)
        assert a.shape[1] == 64

    def test_learns_kinds(self, eval_dataset):
        # enough epochs for the BN running stats to catch up with the weights
        fe = train_feature_extractor(eval_dataset, window=16, epochs=60, seed=0)
        kinds = eval_dataset.kinds
        hits = total = 0
        dtype = next(fe.parameters()).dtype
        for clip in eval_dataset.clips:
            wins = interaction_windows(clip, 16)
            with torch.no_grad():
                _, logits = fe(torch.tensor(wins, dtype=dtype))
            pred = logits.argmax(dim=-1).numpy()
            hits += (pred == kinds.index(clip.interaction_kind)).sum()
            total += len(pred)
        assert hits / total >= 0.8, f"classifier train accuracy {hits}/{total}"

    def test_single_kind_rejected(self):
        spec = DatasetSpec(
            base_kinds=("hold",), scale_min=0.9, scale_max=1.1, scale_step=0.1,
            n_frames=16, seed=0,
        )
        with pytest.raises(ConfigError):
            train_feature_extractor(gen_dataset(spec))


class TestEvaluate:
    def test_unknown_mode(self, eval_model, eval_dataset):
        with pytest.raises(ConfigError):
            evaluate(eval_model, eval_dataset, "interpolate")

    def test_retarget_needs_variations(self, eval_model, eval_dataset):
        templates_only = type(eval_dataset)(clips=tuple(eval_dataset.templates.values()))
        with pytest.raises(ConfigError):
            evaluate(eval_model, templates_only, "retarget")

    def test_retarget_report(self, eval_model, eval_dataset):
        report = evaluate(eval_model, eval_dataset, "retarget", protocol="random")
        assert report.mode == "retarget"
        assert len(report.rows) == len(eval_dataset.variations)
        for row in report.rows:
            assert set(row) == set(CSV_COLUMNS)
            assert row["E_r"] is not None and np.isfinite(row["E_r"])
        # aggregates are the means of per-clip values
        assert report.aggregates["E_r"] == pytest.approx(
            np.mean([r["E_r"] for r in report.rows]), abs=1e-12
        )
        assert report.aggregates["E_r"] == pytest.approx(
            0.5 * (report.aggregates["E_r_A"] + report.aggregates["E_r_B"]), abs=1e-9
        )
        n_by_scale = sum(v["n"] for v in report.by_scale.values())
        assert n_by_scale == len(report.rows)

    def test_generate_report(self, eval_model, eval_dataset):
        fe = train_feature_extractor(eval_dataset, window=16, epochs=2, seed=0)
        report = evaluate(
            eval_model, eval_dataset, "generate", extractor=fe, n_generate=3, seed=1
        )
        assert len(report.rows) == 3 * len(eval_dataset.kinds)
        for row in report.rows:
            assert row["E_r"] is None
            assert np.isfinite(row["E_b"]) and np.isfinite(row["JPD"])
        assert set(report.fid_by_kind) == set(eval_dataset.kinds) | {"pooled"}

    def test_generate_deterministic_per_seed(self, eval_model, eval_dataset):
        a = evaluate(eval_model, eval_dataset, "generate", n_generate=2, seed=3)
        b = evaluate(eval_model, eval_dataset, "generate", n_generate=2, seed=3)
        assert a.rows == b.rows

    def test_stochastic_block(self, eval_model, eval_dataset):
        report = evaluate(eval_model, eval_dataset, "retarget", z_samples=2)
        assert set(report.stochastic) == {"E_r", "E_b", "JPD"}
        for stats in report.stochastic.values():
            assert stats["std"] >= 0.0


class TestWriters:
    def test_csv_and_summary(self, eval_model, eval_dataset, tmp_path):
        r1 = evaluate(eval_model, eval_dataset, "retarget", protocol="random")
        r2 = evaluate(eval_model, eval_dataset, "generate", n_generate=2, seed=0)
        csv_path = write_metrics_csv([r1, r2], tmp_path / "metrics.csv")
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + len(r1.rows) + len(r2.rows)
        gen_lines = [l for l in lines[1:] if ",generate," in l]
        assert all(l.split(",")[4] == "" for l in gen_lines)

        summary = write_summary_json([r1, r2], tmp_path / "summary.json")
        import json

        payload = json.loads(summary.read_text())
        assert set(payload) == {"random/retarget", "random/generate"}
        assert payload["random/retarget"]["aggregates"]["E_r"] is not None
