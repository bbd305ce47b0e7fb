import numpy as np
import pytest

from petcascade.network import PRESETS, Adam, NetConfig, Preconditioner, ScoreNetwork

from gradcheck import numeric_grad, rel_err

TINY = NetConfig(base_channels=4, emb_dim=8, noise_features=4, pos_features=2, groups=2)


def _randomise_out(net, seed=0):
    # the output conv starts at zero, which would hide most of the graph from a gradient check
    rng = np.random.default_rng(seed)
    for k in ("out.weight", "out.bias"):
        p = net.params[k]
        p.data = (0.1 * rng.standard_normal(p.shape)).astype(net.dtype)


def test_preconditioning_coefficients():
    pc = Preconditioner(0.5)
    s = np.array([0.002, 0.5, 80.0])
    np.testing.assert_allclose(pc.c_skip(s), 0.25 / (s ** 2 + 0.25))
    np.testing.assert_allclose(pc.c_out(s), s * 0.5 / np.sqrt(s ** 2 + 0.25))
    np.testing.assert_allclose(pc.c_in(s), 1 / np.sqrt(s ** 2 + 0.25))
    np.testing.assert_allclose(pc.c_noise(s), np.log(s) / 4)
    # c_out^2 is the error variance of the skip-only estimate
    np.testing.assert_allclose(pc.c_skip(s) ** 2 * (0.25 + s ** 2) - 2 * pc.c_skip(s) * 0.25 + 0.25,
                               pc.c_out(s) ** 2, rtol=1e-9)


def test_fresh_network_is_identity_times_c_skip():
    net = ScoreNetwork(TINY, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 2, 4, 4, 4)).astype(np.float32)
    sigma = np.array([0.3, 2.0])
    D = net.denoise(x, sigma, np.zeros((2, 4)))
    c_skip = net.precond.c_skip(sigma).reshape(-1, 1, 1, 1, 1)
    np.testing.assert_allclose(D, c_skip * x, rtol=1e-6)


def test_output_shape_and_validation():
    net = ScoreNetwork(TINY, seed=0)
    with pytest.raises(ValueError):
        net.denoise(np.zeros((1, 2, 4, 4, 4)), 0.0, np.zeros((1, 4)))
    with pytest.raises(ValueError):
        net.denoise(np.zeros((1, 3, 4, 4, 4)), 1.0, np.zeros((1, 4)))
    with pytest.raises(ValueError):
        net.denoise(np.zeros((1, 2, 5, 4, 4)), 1.0, np.zeros((1, 4)))
    assert net.denoise(np.zeros((3, 2, 4, 6, 8)), 1.0, np.zeros((3, 4))).shape == (3, 2, 4, 6, 8)


def test_image_conditioning_and_position_are_required_when_configured():
    cfg = NetConfig(**{**TINY.to_dict(), "image_cond_channels": 2, "use_position": True})
    net = ScoreNetwork(cfg, seed=0)
    x = np.zeros((1, 2, 4, 4, 4))
    with pytest.raises(ValueError):
        net.denoise(x, 1.0, np.zeros((1, 4)), pos=np.zeros((1, 3)))
    with pytest.raises(ValueError):
        net.denoise(x, 1.0, np.zeros((1, 4)), image_cond=np.zeros((1, 2, 4, 4, 4)))
    net.denoise(x, 1.0, np.zeros((1, 4)), pos=np.zeros((1, 3)), image_cond=np.zeros((1, 2, 4, 4, 4)))


def test_backward_without_forward_raises():
    with pytest.raises(RuntimeError):
        ScoreNetwork(TINY).backward(np.zeros((1, 2, 4, 4, 4)))


def _loss_and_grad(net, x, sigma, cond, proj, pos=None, ic=None):
    D = net.denoise(x, sigma, cond, pos, ic)
    return float(np.sum(D.astype(np.float64) * proj)), net.backward(proj)


@pytest.mark.parametrize("flavour", ["global", "sr"])
def test_full_network_gradient_f32_against_f64_shadow(flavour):
    cfg = TINY if flavour == "global" else NetConfig(
        **{**TINY.to_dict(), "image_cond_channels": 2, "use_position": True})
    net = ScoreNetwork(cfg, seed=1)
    _randomise_out(net)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 4, 4, 4))
    sigma = np.array([0.4, 1.7])
    cond = rng.uniform(0, 1, (2, 4))
    pos = rng.uniform(0, 1, (2, 3)) if flavour == "sr" else None
    ic = rng.uniform(0, 1, (2, 2, 4, 4, 4)) if flavour == "sr" else None
    proj = rng.standard_normal(x.shape)
    _, g32 = _loss_and_grad(net, x, sigma, cond, proj, pos, ic)
    shadow = net.astype(np.float64)
    _, g64 = _loss_and_grad(shadow, x, sigma, cond, proj, pos, ic)
    for name in ("enc.in.weight", "enc0.conv1.weight", "mid.affine.weight", "emb.demo.weight",
                 "out.bias"):
        def f():
            return _loss_and_grad(shadow, x, sigma, cond, proj, pos, ic)[0]
        idx, num = numeric_grad(f, shadow.params[name].data, eps=1e-6, n_coords=12, rng=rng)
        assert rel_err(g64[name].reshape(-1)[idx], num) < 1e-6, name
        assert rel_err(g32[name].reshape(-1)[idx], num) < 1e-2, name


def test_state_dict_round_trip_and_astype():
    a = ScoreNetwork(TINY, seed=3)
    b = ScoreNetwork(TINY, seed=4)
    b.load_state_dict(a.state_dict())
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})
    assert a.astype(np.float64).params["enc.in.weight"].data.dtype == np.float64


def test_presets_build_and_parameter_count_scales():
    counts = [ScoreNetwork(NetConfig(**PRESETS[p])).parameter_count() for p in ("toy", "desk")]
    assert counts[0] < counts[1]


def test_unknown_objective_rejected():
    with pytest.raises(ValueError):
        NetConfig(objective="gan")


def test_config_dict_round_trip():
    cfg = NetConfig(**PRESETS["production"], objective="flow")
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_adam_zero_lr_keeps_parameters_bitwise():
    net = ScoreNetwork(TINY, seed=0)
    before = net.state_dict()
    grads = {k: np.ones_like(p.data) for k, p in net.params.items()}
    Adam(net.params).step(grads, lr=0.0)
    for k, v in before.items():
        assert np.array_equal(v, net.params[k].data)


def test_adam_clips_global_norm():
    net = ScoreNetwork(TINY, seed=0)
    grads = {k: np.full_like(p.data, 10.0) for k, p in net.params.items()}
    opt = Adam(net.params, lr=1e-3, grad_clip=1.0)
    norm = opt.step(grads)
    assert norm > 1.0
    # after one step m = (1 - beta1) * clipped gradient
    clipped = np.sqrt(sum(np.sum((m / 0.1) ** 2) for m in opt.m.values()))
    assert clipped == pytest.approx(1.0, rel=1e-5)
