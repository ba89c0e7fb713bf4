"""Diffusion solver exactness, invariants, and benchmark plumbing."""

import numpy as np
import pytest

from pmtk import tensor as T
from pmtk.errors import ConfigError, DimensionError, UsageError
from pmtk.pmd import (
    DiffusionConfig,
    GateTrace,
    PmdBlock,
    denoise_with_log,
    diffusivity,
    edge_benchmark,
    gate_trace,
    gaussian_blur,
    matched_blur_sigma,
    pmd_apply,
    pmd_run,
    pmd_step_dwt,
    pmd_step_fd,
    region_measures,
    sobel_magnitude,
    two_region_image,
)
from pmtk.wavelet import SubbandSet, detail_magnitude, dwt2, idwt2


def noise_field(seed=0, shape=(32, 32)):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# Edge-stopping function
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("k", [0.25, 1.0, 3.0])
def test_diffusivity_anchor_points_exact(k):
    assert diffusivity(np.float64(0.0), k) == 1.0
    assert diffusivity(np.float64(k), k) == 0.5
    assert diffusivity(np.float64(3.0 * k), k) == 0.1


def test_diffusivity_monotone_and_bounded():
    m = np.linspace(0.0, 50.0, 2000)
    g = diffusivity(m, 1.3)
    assert np.all(np.diff(g) < 0)
    assert np.all((g > 0) & (g <= 1))


def test_diffusivity_rejects_bad_k():
    with pytest.raises(ConfigError):
        diffusivity(np.zeros(3), 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        DiffusionConfig(k=-1.0)
    with pytest.raises(ConfigError):
        DiffusionConfig(dt=0.0)
    with pytest.raises(ConfigError):
        DiffusionConfig(steps=-1)
    with pytest.raises(ConfigError):
        DiffusionConfig(mode="blur")


# ---------------------------------------------------------------------------
# Finite-difference step
# ---------------------------------------------------------------------------

def test_fd_step_conserves_mean():
    cfg = DiffusionConfig(k=0.7, dt=0.25)
    for seed in range(5):
        u = noise_field(seed)
        out = pmd_step_fd(u, cfg)
        assert abs(out.mean() - u.mean()) <= 1e-14 * max(1.0, abs(u.mean()))


def test_fd_step_no_new_extrema():
    cfg = DiffusionConfig(k=0.5, dt=0.25, steps=4)
    for seed in range(5):
        u = noise_field(seed)
        out = pmd_run(u, cfg, step_fn=pmd_step_fd)
        assert out.min() >= u.min() - 1e-12
        assert out.max() <= u.max() + 1e-12


def test_fd_step_constant_is_fixed_point():
    u = np.full((8, 10), 0.37)
    out = pmd_step_fd(u, DiffusionConfig(dt=0.2))
    np.testing.assert_array_equal(out, u)


def test_fd_step_rejects_unstable_dt():
    with pytest.raises(ConfigError):
        pmd_step_fd(np.zeros((4, 4)), DiffusionConfig(dt=0.3))


def test_fd_step_rejects_vectors():
    with pytest.raises(DimensionError):
        pmd_step_fd(np.zeros(16), DiffusionConfig(dt=0.2))


def test_fd_step_batched_matches_loop():
    cfg = DiffusionConfig(k=1.0, dt=0.2)
    stack = np.stack([noise_field(s, (16, 16)) for s in range(3)])
    out = pmd_step_fd(stack, cfg)
    for i in range(3):
        np.testing.assert_array_equal(out[i], pmd_step_fd(stack[i], cfg))


# ---------------------------------------------------------------------------
# Wavelet-domain step
# ---------------------------------------------------------------------------

def test_dwt_step_constant_is_fixed_point():
    u = np.full((6, 6), 2.5)
    for mode in ("attenuate", "as-written"):
        out = pmd_step_dwt(u, DiffusionConfig(mode=mode))
        np.testing.assert_allclose(out, u, atol=1e-14)


def test_dwt_attenuate_subband_action():
    # linearity of the transform pins the whole step: approximation and
    # diagonal bands pass through, detail bands scale by the gate
    u = noise_field(3)
    s = dwt2(u)
    m = diffusivity(detail_magnitude(s), 0.8)
    out = pmd_step_dwt(u, DiffusionConfig(k=0.8, mode="attenuate"))
    so = dwt2(out)
    np.testing.assert_allclose(so.ll, s.ll, atol=1e-12)
    np.testing.assert_allclose(so.hh, s.hh, atol=1e-12)
    np.testing.assert_allclose(so.lh, m * s.lh, atol=1e-12)
    np.testing.assert_allclose(so.hl, m * s.hl, atol=1e-12)


def test_dwt_as_written_subband_action():
    # this mode adds the gated detail back on top of the signal, so the
    # detail bands come out amplified by (1 + gate)
    u = noise_field(4)
    s = dwt2(u)
    m = diffusivity(detail_magnitude(s), 0.8)
    out = pmd_step_dwt(u, DiffusionConfig(k=0.8, mode="as-written"))
    so = dwt2(out)
    np.testing.assert_allclose(so.ll, s.ll, atol=1e-12)
    np.testing.assert_allclose(so.hh, s.hh, atol=1e-12)
    np.testing.assert_allclose(so.lh, (1.0 + m) * s.lh, atol=1e-12)
    np.testing.assert_allclose(so.hl, (1.0 + m) * s.hl, atol=1e-12)


def test_dwt_attenuate_detail_energy_never_grows():
    for seed in range(4):
        u = noise_field(seed)
        s = dwt2(u)
        so = dwt2(pmd_step_dwt(u, DiffusionConfig(k=0.5)))
        before = (s.lh ** 2).sum() + (s.hl ** 2).sum()
        after = (so.lh ** 2).sum() + (so.hl ** 2).sum()
        assert after <= before + 1e-12


def test_pmd_run_zero_steps_copies():
    u = noise_field(1)
    out = pmd_run(u, DiffusionConfig(steps=0))
    np.testing.assert_array_equal(out, u)
    assert out is not u


def test_pmd_run_composes_steps():
    u = noise_field(2)
    cfg3 = DiffusionConfig(k=1.1, steps=3)
    cfg1 = DiffusionConfig(k=1.1, steps=1)
    manual = pmd_run(pmd_run(pmd_run(u, cfg1), cfg1), cfg1)
    np.testing.assert_array_equal(pmd_run(u, cfg3), manual)


def test_denoise_log_rows_and_flat_variance():
    rng = np.random.default_rng(0)
    u0 = 0.5 + 0.2 * rng.standard_normal((32, 32))
    final, rows = denoise_with_log(u0, DiffusionConfig(k=0.5, steps=6))
    assert len(rows) == 7
    assert rows[0][0] == 0 and rows[-1][0] == 6
    assert rows[-1][1] < rows[0][1]  # noise variance on the flat set drops
    assert final.shape == u0.shape


# ---------------------------------------------------------------------------
# Benchmark plumbing
# ---------------------------------------------------------------------------

def test_two_region_image_clean_geometry():
    noisy, clean, r = two_region_image(size=32, radius=9.0, noise_sigma=0.1, seed=5)
    assert set(np.unique(clean)) == {0.0, 1.0}
    np.testing.assert_array_equal(clean, (r <= 9.0).astype(float))
    again, _, _ = two_region_image(size=32, radius=9.0, noise_sigma=0.1, seed=5)
    np.testing.assert_array_equal(noisy, again)


def test_region_measures_on_clean_disk():
    _, clean, r = two_region_image(noise_sigma=0.0, seed=0)
    std, gap = region_measures(clean, r)
    assert std == 0.0
    assert gap == pytest.approx(1.0)


def test_gaussian_blur_basics():
    u = noise_field(7)
    assert gaussian_blur(u, 0.0) is not u
    np.testing.assert_array_equal(gaussian_blur(u, -1.0), u)
    np.testing.assert_allclose(gaussian_blur(np.full((10, 10), 4.0), 2.0), 4.0, atol=1e-12)
    assert gaussian_blur(u, 2.0).std() < u.std()


def test_matched_blur_reaches_target():
    noisy, _, r = two_region_image(seed=1)
    std0, _ = region_measures(noisy, r)
    target = 0.7 * std0
    sigma = matched_blur_sigma(noisy, r, target)
    got, _ = region_measures(gaussian_blur(noisy, sigma), r)
    assert got <= target * (1.0 + 1e-9)


def test_edge_benchmark_structure():
    out = edge_benchmark(seed=0)
    for key in ("fd", "dwt", "gauss", "std0", "gap0", "gauss_sigma"):
        assert key in out
    for key in ("fd", "dwt", "gauss"):
        red, ret = out[key]
        assert 0.0 < red < 1.0
        assert 0.0 < ret <= 1.0 + 1e-9


def test_sobel_on_linear_ramp():
    u = np.tile(np.arange(12.0), (10, 1))
    mag = sobel_magnitude(u)
    # 3x3 Sobel along a unit ramp responds with weight sum 8 away from edges
    np.testing.assert_allclose(mag[2:-2, 2:-2], 8.0, atol=1e-12)
    assert mag.shape == u.shape


# ---------------------------------------------------------------------------
# Tape-side diffusion
# ---------------------------------------------------------------------------

def test_pmd_apply_matches_numpy_step():
    x = T.Tensor(noise_field(9, (1, 2, 8, 8)))
    out = pmd_apply(x, k=0.9, mode="attenuate")
    expect = pmd_step_dwt(x.data, DiffusionConfig(k=0.9, mode="attenuate"))
    np.testing.assert_array_equal(out.data, expect)


def test_pmd_apply_gradient_of_sum_is_ones():
    # the frozen-gate map is self-adjoint and preserves constants, so the
    # pullback of an all-ones upstream gradient is all ones
    x = T.Tensor(noise_field(10, (4, 6)))
    with T.Tape() as tape:
        loss = T.tsum(pmd_apply(x, k=1.0))
    g = T.grad_of(T.backward(tape, loss), x)
    np.testing.assert_allclose(g, 1.0, atol=1e-12)


def test_pmd_apply_backward_reapplies_frozen_gate():
    x = T.Tensor(noise_field(11, (6, 6)))
    y = T.Tensor(noise_field(12, (6, 6)))
    with T.Tape() as tape:
        loss = T.tsum(T.mul(pmd_apply(x, k=0.7), y))
    g = T.grad_of(T.backward(tape, loss), x)
    m = diffusivity(detail_magnitude(dwt2(x.data)), 0.7)
    sy = dwt2(y.data)
    expect = idwt2(SubbandSet(sy.ll, m * sy.lh, m * sy.hl, sy.hh))
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_pmd_apply_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        pmd_apply(T.Tensor(np.zeros((4, 4))), mode="melt")


def test_gate_trace_replays_without_recompute():
    trace = GateTrace()
    x = T.Tensor(noise_field(13, (8, 8)))
    with gate_trace(trace):
        first = pmd_apply(x, k=1.0)
    assert len(trace.values) == 1
    trace.begin_replay()
    # replaying against different data must reuse the recorded gate
    x.data = x.data + 0.5
    with gate_trace(trace):
        second = pmd_apply(x, k=1.0)
    sx = dwt2(x.data)
    m = trace.values[0]
    expect = idwt2(SubbandSet(sx.ll, m * sx.lh, m * sx.hl, sx.hh))
    np.testing.assert_array_equal(second.data, expect)
    del first


def test_gate_trace_overrun_raises():
    trace = GateTrace()
    trace.begin_replay()
    with gate_trace(trace):
        with pytest.raises(UsageError):
            pmd_apply(T.Tensor(np.zeros((4, 4))), k=1.0)


# ---------------------------------------------------------------------------
# Residual block
# ---------------------------------------------------------------------------

def test_block_shapes_and_stride():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.standard_normal((2, 3, 16, 16)))
    same = PmdBlock(rng, 3, 3)
    down = PmdBlock(rng, 3, 8, stride=2)
    assert same(x).shape == (2, 3, 16, 16)
    assert down(x).shape == (2, 8, 8, 8)


@pytest.mark.parametrize("preprocess", ["dwt", "none", "sobel"])
def test_block_preprocess_variants_run(preprocess):
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((1, 2, 8, 8)))
    block = PmdBlock(rng, 2, 4, stride=2, preprocess=preprocess)
    assert block(x).shape == (1, 4, 4, 4)


def test_block_rejects_unknown_preprocess():
    with pytest.raises(ConfigError):
        PmdBlock(np.random.default_rng(0), 2, 2, preprocess="fft")
