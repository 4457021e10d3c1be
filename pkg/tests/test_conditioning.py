import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.conditioning import (
    FilmHead,
    FourierSpec,
    encode_flow_step,
    encode_times,
    film_from_code,
    fourier_features,
)
from flowcast.errors import ConfigError, DataError, ShapeError
from flowcast.flow import interp_times


def test_spec_defaults_are_octaves():
    spec = FourierSpec()
    assert spec.dim == 16
    assert spec.freqs.tolist() == [1, 2, 4, 8, 16, 32, 64, 128]


def test_spec_validation():
    with pytest.raises(ConfigError):
        FourierSpec(n_freqs=2, freqs=np.array([2.0, 1.0]))
    with pytest.raises(ConfigError):
        FourierSpec(n_freqs=2, freqs=np.array([-1.0, 1.0]))


def test_features_at_zero():
    spec = FourierSpec(n_freqs=4)
    feats = fourier_features(0.0, spec)
    assert np.array_equal(feats[:4], np.zeros(4))
    assert np.array_equal(feats[4:], np.ones(4))


def test_quarter_period():
    spec = FourierSpec(n_freqs=1, freqs=np.array([1.0]))
    feats = fourier_features(0.25, spec)
    assert feats[0] == pytest.approx(1.0, abs=1e-12)  # sin(pi/2)
    assert feats[1] == pytest.approx(0.0, abs=1e-12)  # cos(pi/2)


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100))
def test_features_bounded(t):
    feats = fourier_features(t, FourierSpec())
    assert np.all(np.abs(feats) <= 1.0 + 1e-12)


class TestEncodeTimes:
    def test_identical_times_collapse(self):
        spec = FourierSpec()
        times = np.full(5, 0.37)
        assert np.allclose(encode_times(times, spec), fourier_features(0.37, spec))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    def test_permutation_invariant(self, seed, n):
        rng = np.random.default_rng(seed)
        times = rng.uniform(0, 1, size=n)
        spec = FourierSpec()
        base = encode_times(times, spec)
        assert np.allclose(encode_times(rng.permutation(times), spec), base, atol=1e-12)

    def test_single_entry(self):
        spec = FourierSpec()
        assert np.allclose(encode_times(np.array([0.6]), spec), fourier_features(0.6, spec))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            encode_times(np.array([]), FourierSpec())

    def test_continuity_under_small_shift(self):
        spec = FourierSpec()
        times = np.array([0.1, 0.4, 0.8])
        base = encode_times(times, spec)
        offsets = [1e-3, 1e-5, 1e-7]
        gaps = [np.linalg.norm(encode_times(times + d, spec) - base) for d in offsets]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-4


def test_flow_step_encoding_bounds():
    spec = FourierSpec()
    feats = encode_flow_step(0.0, spec)
    assert np.array_equal(feats, fourier_features(0.0, spec))
    with pytest.raises(DataError):
        encode_flow_step(1.5, spec)


def test_conditioning_collapses_at_final_flow_step():
    # interpolated times all reach the target, so the sequence encoding
    # equals the target-time features no matter the context times
    spec = FourierSpec()
    t_target = 0.83
    for seed in range(3):
        rng = np.random.default_rng(seed)
        t_ctx = np.sort(rng.uniform(0, 0.7, size=5))
        code = encode_times(interp_times(t_ctx, t_target, 1.0), spec)
        assert np.allclose(code, fourier_features(t_target, spec), atol=1e-12)


class TestFilmHead:
    def test_zero_init_is_identity_modulation(self):
        head = FilmHead(code_dim=6, layer_widths=[4, 8])
        params = film_from_code(np.ones(6), head)
        for p, width in zip(params, [4, 8]):
            assert p.alpha.shape == (width,)
            assert np.array_equal(p.alpha, np.zeros(width))
            assert np.array_equal(p.beta, np.zeros(width))

    def test_output_widths_for_configured_depths(self):
        for widths in ([4], [4, 8, 16], [2, 2, 2, 2, 2]):
            head = FilmHead(code_dim=4, layer_widths=widths)
            params = film_from_code(np.zeros(4), head)
            assert [p.alpha.shape[0] for p in params] == widths
            assert [p.beta.shape[0] for p in params] == widths

    def test_code_scaling_keeps_shapes(self):
        head = FilmHead(code_dim=4, layer_widths=[3])
        a = film_from_code(np.ones(4), head)
        b = film_from_code(2 * np.ones(4), head)
        assert a[0].alpha.shape == b[0].alpha.shape

    def test_dim_mismatch_rejected(self):
        head = FilmHead(code_dim=4, layer_widths=[3])
        with pytest.raises(ShapeError):
            head(torch.zeros(1, 5))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        head = FilmHead(code_dim=3, layer_widths=[2, 3], hidden=5).double()
        with torch.no_grad():
            for p in head.parameters():
                p.uniform_(-0.5, 0.5)
        code = torch.tensor([0.3, -0.2, 0.8], dtype=torch.float64)

        def alpha_entry() -> torch.Tensor:
            return head(code[None])[1][0][0, 1]  # block 1, alpha[1]

        out = alpha_entry()
        out.backward()
        h = 1e-6
        for name, p in head.named_parameters():
            grad = p.grad  # None for the heads of other blocks (no path to them)
            flat = p.detach().reshape(-1)
            for idx in range(min(flat.numel(), 6)):
                with torch.no_grad():
                    orig = flat[idx].item()
                    flat[idx] = orig + h
                    hi = alpha_entry().item()
                    flat[idx] = orig - h
                    lo = alpha_entry().item()
                    flat[idx] = orig
                fd = (hi - lo) / (2 * h)
                an = 0.0 if grad is None else grad.reshape(-1)[idx].item()
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-4, f"{name}[{idx}]: fd={fd} an={an}"
