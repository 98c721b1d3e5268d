import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crm.data import read_mask_png
from crm.decoder import CRM, CRMConfig, refine_once
from crm.diffcore import PreconditionError, no_grad
from crm.encoder import EncoderConfig
from crm.inference import (
    RefinementSchedule,
    binarize,
    default_schedule,
    encoder_macs,
    parse_schedule,
    refine_multires,
    scaled_size,
    stage_macs,
    uniform_schedule,
)

TINY = CRMConfig(EncoderConfig(base_channels=4, latent_channels=8, depth=1), hidden=(16,) * 4)


@pytest.fixture(scope="module")
def model():
    return CRM.init(TINY, seed=0)


def _pair(h, w, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((3, h, w)).astype(np.float32)
    msk = np.zeros((1, h, w), np.float32)
    msk[:, h // 4 : 3 * h // 4, w // 5 : 4 * w // 5] = 1
    return img, msk


def test_default_schedule():
    assert default_schedule().ratios == (0.125, 0.25, 0.5, 1.0)


def test_min_side_filter():
    assert default_schedule().for_shape(128, 128).ratios == (0.25, 0.5, 1.0)
    assert default_schedule().for_shape(512, 512).ratios == (0.125, 0.25, 0.5, 1.0)
    # the long side decides
    assert default_schedule().for_shape(40, 256).ratios == (0.125, 0.25, 0.5, 1.0)


def test_filter_empties_schedule():
    with pytest.raises(PreconditionError):
        RefinementSchedule((0.5, 1.0), min_side=64).for_shape(40, 40)


def test_uniform_schedule():
    assert uniform_schedule(1).ratios == (1.0,)
    assert uniform_schedule(4).ratios == (0.25, 0.5, 0.75, 1.0)
    s8 = uniform_schedule(8).ratios
    assert len(s8) == 8 and s8[-1] == 1.0
    with pytest.raises(PreconditionError):
        uniform_schedule(0)


@given(st.integers(1, 64))
def test_uniform_strictly_increasing(n):
    r = uniform_schedule(n).ratios
    assert all(b > a for a, b in zip(r, r[1:])) and r[-1] == 1.0 and r[0] > 0


@pytest.mark.parametrize("ratios", [(), (0.5,), (0.5, 0.25, 1.0), (0.0, 1.0), (0.5, 1.5), (0.5, 0.5, 1.0)])
def test_invalid_schedules(ratios):
    with pytest.raises(PreconditionError):
        RefinementSchedule(ratios)


def test_parse_schedule():
    assert parse_schedule("default") == default_schedule()
    assert parse_schedule("uniform:2").ratios == (0.5, 1.0)
    assert parse_schedule("0.125, 1").ratios == (0.125, 1.0)
    for bad in ("uniform:x", "a,b", "0.5"):
        with pytest.raises(PreconditionError):
            parse_schedule(bad)


def test_scaled_size_rounds_half_up():
    assert scaled_size(100, 0.125) == 13
    assert scaled_size(4, 0.125) == 1
    assert scaled_size(512, 0.25) == 128


def test_single_ratio_equals_refine_once(model):
    img, msk = _pair(48, 40)
    out = refine_multires(img, msk, [1.0], model)
    with no_grad():
        ref = refine_once(img, msk, (48, 40), model).data
    assert out.tobytes() == ref.astype(np.float32).reshape(1, 48, 40).tobytes()


@pytest.mark.parametrize("sched,expect", [("default", 4), ("uniform:3", 3), ("1.0", 1), ("0.25,0.5,1", 3)])
def test_encoder_invoked_once_per_ratio(model, sched, expect, monkeypatch):
    calls = []
    orig = CRM.encode

    def counting(self, x):
        calls.append(x.shape)
        return orig(self, x)

    monkeypatch.setattr(CRM, "encode", counting)
    img, msk = _pair(256, 256)
    refine_multires(img, msk, sched, model)
    assert len(calls) == expect


def test_stage_input_sizes(model, monkeypatch):
    sizes = []
    orig = CRM.encode
    monkeypatch.setattr(CRM, "encode", lambda self, x: sizes.append(x.shape[-2:]) or orig(self, x))
    img, msk = _pair(256, 200)
    refine_multires(img, msk, "default", model)
    assert sizes == [(32, 25), (64, 50), (128, 100), (256, 200)]


@settings(max_examples=10, deadline=None)
@given(h=st.integers(32, 90), w=st.integers(32, 90), sched=st.sampled_from(["default", "uniform:2", "uniform:4", "0.5,1"]))
def test_output_shape_and_stage_range(model, h, w, sched):
    img, msk = _pair(h, w, seed=h * w)
    stages = []
    out, used = refine_multires(img, msk, sched, model, stages=stages, return_schedule=True)
    assert out.shape == (1, h, w)
    assert len(stages) == len(used.ratios)
    for s in stages:
        assert s.shape == (1, h, w)
        assert np.all((s > 0) & (s < 1))
    assert stages[-1] is out


def test_trace_pngs(model, tmp_path):
    img, msk = _pair(128, 128)
    stages = []
    refine_multires(img, msk, "default", model, trace_dir=tmp_path / "tr", stages=stages)
    names = sorted(p.name for p in (tmp_path / "tr").iterdir())
    assert names == ["stage0_r0.25.png", "stage1_r0.5.png", "stage2_r1.png"]
    back = read_mask_png(tmp_path / "tr" / "stage2_r1.png")
    assert back.shape == (1, 128, 128)
    assert np.max(np.abs(back - stages[-1])) <= 0.5 / 255 + 1e-7


def test_deterministic(model):
    img, msk = _pair(70, 64, seed=3)
    a = refine_multires(img, msk, "uniform:3", model, chunk_pixels=1000)
    b = refine_multires(img, msk, "uniform:3", model)
    assert a.tobytes() == b.tobytes()


def test_misaligned(model):
    img, msk = _pair(40, 40)
    with pytest.raises(PreconditionError):
        refine_multires(img, msk[:, :-1], "1", model)
    with pytest.raises(PreconditionError):
        refine_multires(img[:2], msk, "1", model)


def test_binarize():
    np.testing.assert_array_equal(binarize(np.full((1, 4, 4), 0.6)), 1)
    m = np.array([[0.2, 0.5, 0.999, 1.0]])
    np.testing.assert_array_equal(binarize(m, 1.0), [[0, 0, 0, 1]])
    np.testing.assert_array_equal(binarize(m), [[0, 1, 1, 1]])
    assert binarize(m).dtype == np.uint8


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1))
def test_binarize_idempotent(vals, t):
    b = binarize(np.array(vals), t)
    np.testing.assert_array_equal(binarize(b), b)


def test_mac_estimates_grow_with_size():
    cfg = CRMConfig()
    assert encoder_macs(cfg.encoder, (128, 128)) == 4 * encoder_macs(cfg.encoder, (64, 64))
    assert stage_macs(cfg, (64, 64), (512, 512)) < stage_macs(cfg, (512, 512), (512, 512))
