import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnguide import autodiff as ad
from attnguide.autodiff.gradcheck import numerical_grad, relative_error
from attnguide.diffusion import (
    DenoiserModel, PromptSpec, TrainConfig, build_schedule, denoiser_forward, forward_diffuse,
    load_checkpoint, parse_prompt, save_checkpoint, train,
)
from attnguide.diffusion.schedule import mix
from attnguide.diffusion.train import diffusion_loss
from attnguide.errors import NumericError, ParameterError, UsageError

PROMPT = parse_prompt("red circle and blue square")


# ---------------------------------------------------------------- schedule

def test_alpha_bar_first_is_one_minus_beta_start():
    s = build_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)


def test_alpha_bar_last_matches_direct_product():
    T, b0, b1 = 1000, 1e-4, 0.02
    prod = 1.0
    for i in range(T):
        prod *= 1.0 - (b0 + (b1 - b0) * i / (T - 1))
    s = build_schedule(T, b0, b1)
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)
    assert s.alpha_bar[0] > 0.99 and s.alpha_bar[-1] < 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 400), st.floats(1e-5, 0.5), st.floats(0.0, 1.0))
def test_schedule_invariants(T, b0, frac):
    b1 = b0 + frac * (0.99 - b0)
    s = build_schedule(T, b0, b1)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ParameterError):
        build_schedule(*args)


def test_forward_diffuse_boundaries():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32, 3))
    np.testing.assert_array_equal(mix(x0, eps, 1.0), x0)
    np.testing.assert_array_equal(mix(x0, eps, 0.0), eps)


def test_forward_diffuse_matches_scalar_recomputation():
    rng = np.random.default_rng(1)
    s = build_schedule()
    x0, eps = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    ab = float(np.prod(1.0 - s.betas[:501]))
    expected = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    np.testing.assert_allclose(forward_diffuse(x0, 500, eps, s), expected, rtol=1e-12)


@pytest.mark.parametrize("t", [-1, 1000])
def test_forward_diffuse_rejects_out_of_range(t):
    with pytest.raises(ParameterError):
        forward_diffuse(np.zeros(3), t, np.zeros(3), build_schedule())


# ---------------------------------------------------------------- prompts

def test_parse_prompt_positions_and_bindings():
    p = parse_prompt("red circle and blue square")
    assert p.token_ids[:5] == (2, 6, 1, 4, 7) and p.token_ids[5:] == (0, 0, 0)
    assert p.subject_positions == (1, 4)
    assert p.bound_color(1) == "red" and p.bound_color(4) == "blue"


def test_parse_prompt_unknown_word_lists_vocabulary():
    with pytest.raises(UsageError, match="vocabulary"):
        parse_prompt("purple circle")


def test_prompt_rejects_out_of_vocab_ids():
    with pytest.raises(ParameterError):
        PromptSpec((16,) + (0,) * 7, (0,))


# ---------------------------------------------------------------- denoiser

@pytest.fixture(scope="module")
def model64():
    return DenoiserModel(seed=3, dtype=np.float64).requires_grad_(False)


def test_forward_is_deterministic():
    z = np.random.default_rng(2).normal(size=(32, 32, 3)).astype(np.float32)
    outs = []
    for _ in range(2):
        m = DenoiserModel(seed=5).requires_grad_(False)
        eps, maps = denoiser_forward(z, 400, PROMPT, m)
        outs.append((eps.data.tobytes(), maps.probs.data.tobytes()))
    assert outs[0] == outs[1]


def test_maps_rows_sum_to_one_and_are_probabilities(model64):
    z = np.random.default_rng(3).normal(size=(32, 32, 3))
    eps, maps = denoiser_forward(z, 700, PROMPT, model64)
    assert eps.shape == (32, 32, 3)
    assert maps.probs.shape == (64, 8)
    np.testing.assert_allclose(maps.probs.data.sum(axis=1), 1.0, atol=1e-5)
    assert np.all((maps.probs.data >= 0) & (maps.probs.data <= 1))
    assert maps.grid(1).shape == (8, 8)


def test_map_column_gradient_matches_finite_differences(model64):
    rng = np.random.default_rng(4)
    z0 = rng.normal(size=(32, 32, 3))
    token = 4

    def f(z):
        with ad.no_grad():
            return denoiser_forward(z, 300, PROMPT, model64)[1].column(token).data.sum()

    zt = ad.Tensor(z0, requires_grad=True)
    _, maps = denoiser_forward(zt, 300, PROMPT, model64)
    ad.backward(ad.sum(maps.column(token)))
    idx = rng.choice(z0.size, size=20, replace=False)
    fd = numerical_grad(f, z0, h=1e-4, indices=idx)
    assert relative_error(zt.grad.reshape(-1)[idx], fd) < 1e-4


def test_non_finite_input_names_index(model64):
    z = np.zeros((32, 32, 3))
    z[3, 5, 1] = np.nan
    with pytest.raises(NumericError, match=r"\(3, 5, 1\)"):
        denoiser_forward(z, 10, PROMPT, model64)


def test_initial_loss_scale_at_last_timestep():
    m = DenoiserModel(seed=0)
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, size=(8, 32, 32, 3)).astype(np.float32)
    eps = rng.normal(size=x0.shape).astype(np.float32)
    t = np.full(8, 999)
    loss = diffusion_loss(m, x0, np.tile(PROMPT.ids, (8, 1)), t, eps, build_schedule()).item()
    assert np.isfinite(loss) and loss < 2.0


def test_checkpoint_round_trip_bit_identical(tmp_path):
    m = DenoiserModel(seed=7).requires_grad_(False)
    s = build_schedule()
    save_checkpoint(tmp_path / "ck", m, s, {"note": "test"}, {"init": 7})
    m2, s2, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["architecture_hash"] == m.architecture_hash()
    assert manifest["vocab"][:2] == ["<pad>", "and"]
    z = np.random.default_rng(6).normal(size=(32, 32, 3)).astype(np.float32)
    a = denoiser_forward(z, 123, PROMPT, m)
    b = denoiser_forward(z, 123, PROMPT, m2)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].probs.data.tobytes() == b[1].probs.data.tobytes()
    np.testing.assert_array_equal(s.alpha_bar, s2.alpha_bar)


# ---------------------------------------------------------------- training

def _tiny_dataset(n=1, seed=0):
    from attnguide import scenes
    images, ids, _ = scenes.make_dataset(n, seed)
    return images, ids


def test_zero_learning_rate_keeps_weights():
    m = DenoiserModel(seed=1)
    before = m.state_dict()
    train(m, _tiny_dataset(4), build_schedule(), TrainConfig(steps=3, batch=4, lr=0.0, log_every=0,
                                                             target_loss=10.0))
    after = m.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_divergence_aborts_with_diagnostics():
    m = DenoiserModel(seed=1)
    m.params["out_b"].data[:] = np.nan
    with pytest.raises(NumericError, match="diverged at step 0"):
        train(m, _tiny_dataset(2), build_schedule(), TrainConfig(steps=2, batch=2, log_every=0))


def test_training_writes_checkpoint(tmp_path):
    m = DenoiserModel(seed=2)
    with pytest.warns(RuntimeWarning, match="above target"):
        res = train(m, _tiny_dataset(8), build_schedule(),
                    TrainConfig(steps=4, batch=4, log_every=0, target_loss=1e-9), out_dir=tmp_path / "ck")
    _, _, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["training"]["steps_done"] == 4
    assert len(res.losses) == 4


@pytest.mark.slow
def test_single_sample_memorization():
    """500 steps on one image drive its training loss below 0.01."""
    m = DenoiserModel(seed=0)
    cfg = TrainConfig(steps=500, batch=16, lr=2e-3, warmup=50, log_every=0, target_loss=1.0, seed=1)
    res = train(m, _tiny_dataset(1, seed=3), build_schedule(), cfg)
    assert res.losses[-50:].mean() < 0.01
