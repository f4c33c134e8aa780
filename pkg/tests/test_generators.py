import numpy as np
import pytest

from duetsynth import ConfigError, bone_lengths
from duetsynth.generators import (
    CONTACT_MIN_FRACTION,
    CONTACT_THRESHOLDS,
    GENERATOR_KINDS,
    contact_fraction,
    desk_skeleton,
    desk_upper_body_bones,
    gen_base_clip,
    key_pair_distances,
)


def test_desk_skeleton_shape():
    sk = desk_skeleton()
    assert sk.n_joints == 7
    assert sk.n_bones == 6
    assert sk.joint_names[sk.root] == "root"
    ups = desk_upper_body_bones(sk)
    assert len(ups) == 4
    assert all(0 <= b < sk.n_bones for b in ups)


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        gen_base_clip("tango")


def test_deterministic_per_kind_seed():
    for kind in GENERATOR_KINDS:
        a = gen_base_clip(kind, t=32, seed=5)
        b = gen_base_clip(kind, t=32, seed=5)
        assert np.array_equal(a.motion_A.frames, b.motion_A.frames)
        assert np.array_equal(a.motion_B.frames, b.motion_B.frames)
        assert a.key_pairs == b.key_pairs


def test_seeds_differ():
    a = gen_base_clip("hold", t=32, seed=1)
    b = gen_base_clip("hold", t=32, seed=2)
    assert not np.array_equal(a.motion_A.frames, b.motion_A.frames)


@pytest.mark.parametrize("kind", GENERATOR_KINDS)
def test_contact_maintained(kind):
    for seed in range(3):
        clip = gen_base_clip(kind, t=64, seed=seed)
        frac = contact_fraction(clip, CONTACT_THRESHOLDS[kind])
        assert frac >= CONTACT_MIN_FRACTION, f"{kind} seed {seed}: {frac:.2f}"


def test_hold_contact_below_015():
    clip = gen_base_clip("hold", t=64, seed=0)
    d = key_pair_distances(clip)
    assert np.mean(np.all(d <= 0.15, axis=1)) >= 0.8


@pytest.mark.parametrize("kind", GENERATOR_KINDS)
def test_rigid_bones(kind):
    clip = gen_base_clip(kind, t=48, seed=3)
    for sk, m in ((clip.skeleton_A, clip.motion_A), (clip.skeleton_B, clip.motion_B)):
        lens = bone_lengths(m.frames, sk)
        assert np.abs(lens - sk.template_bone_lengths).max() <= 1e-9


@pytest.mark.parametrize("kind", GENERATOR_KINDS)
def test_smooth(kind):
    clip = gen_base_clip(kind, t=64, seed=4)
    for m in (clip.motion_A, clip.motion_B):
        step = np.linalg.norm(np.diff(m.frames, axis=0), axis=-1)
        assert step.max() <= 0.2, f"{kind}: max per-frame step {step.max():.3f}"


def test_template_flags():
    clip = gen_base_clip("lift", t=16, seed=0)
    assert clip.is_template
    assert clip.interaction_kind == "lift"
    assert len(clip.key_pairs) >= 1
