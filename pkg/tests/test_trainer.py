import numpy as np
import pytest

from geoproto import numerics as nx
from geoproto import trainer as T
from geoproto.config import ConfigKeyError, TrainConfig, load_config, read_config_text
from geoproto.episodes import Episode
from geoproto.numerics import ContractError, DiffTensor
from gradcheck import NonSmoothPoint, assert_grad

SMALL = TrainConfig(channels="3,4", image_size=16, G=2, K=4, hidden=3, heldout_episodes=0)


def toy_episode(rng, shots=1):
    def pair():
        m = np.zeros((16, 16), bool)
        r0, c0 = rng.integers(2, 6, size=2)
        m[r0:r0 + rng.integers(6, 10), c0:c0 + rng.integers(6, 10)] = True
        img = np.where(m, 0.7, 0.3) + rng.normal(0, 0.1, m.shape)
        return DiffTensor(img[None]), m

    return Episode([pair() for _ in range(shots)], pair(), "toy", "source", int(rng.integers(1 << 30)))


def episode_loss_check(rng, cfg):
    """Gradient-check the total episode loss on one random toy episode.

    The loss depends on hard decisions (the predicted query mask drives the
    alignment term, argmax bins drive the ordinal gap). Returns False without
    checking when a probe flips any of them, since the loss jumps there, or
    when a leaf sits mostly on ReLU kinks.
    """
    params = T.ModelParams.init(cfg, int(rng.integers(1 << 30)))
    for t in (params.mlp.W1, params.mlp.W2, params.pe_proj):
        t.values = rng.normal(0, 0.5, t.shape)
    # zero-initialised biases leave dead receptive fields exactly on the ReLU kink
    for t in params.encoder.biases:
        t.values = rng.normal(0, 0.1, t.shape)
    ep = toy_episode(rng, shots=int(rng.integers(1, 3)))
    base = T.forward(params, ep, cfg)
    flips = []

    def f(_t):
        out = T.forward(params, ep, cfg)
        flips.append(not np.array_equal(out.scores.mask, base.scores.mask)
                     or any(not np.array_equal(a.hard, b.hard)
                            for a, b in zip(out.binpred_s, base.binpred_s)))
        return T.episode_losses(out, cfg).total

    everything = list(params.named().values())
    errors, kinked = [], False
    for name in ("encoder.conv0.weight", "encoder.conv1.bias", "osb.head.weight", "gape.W1",
                 "gape.W2", "pe.proj"):
        try:
            assert_grad(f, params.named()[name], everything)
        except NonSmoothPoint:
            kinked = True
        except AssertionError as exc:
            errors.append(f"{name}: {exc}")
    if any(flips) or kinked:
        return False
    assert not errors, errors
    return True


def test_full_episode_loss_gradients():
    rng = np.random.default_rng(0)
    cfg = SMALL.replace(position_embedding=True, fusion="scale_gate", alpha=5.0)
    checked = 0
    for _ in range(60):
        checked += episode_loss_check(rng, cfg)
        if checked == 20:
            break
    assert checked == 20


def test_sgd_step_oracle():
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0, lr_decay=0.5, lr_decay_every=2)
    theta = nx.param(np.array([1.0]))
    state = T.OptimizerState({}, cfg.lr)
    theta.grad = np.array([1.0])
    T.sgd_step({"t": theta}, state, cfg)
    assert theta.values[0] == pytest.approx(0.9)
    T.sgd_step({"t": theta}, state, cfg)
    assert theta.values[0] == pytest.approx(0.9 - 0.1 * 1.9)
    assert state.lr == pytest.approx(0.05)
    wd = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.5)
    theta = nx.param(np.array([2.0]))
    theta.grad = np.array([0.0])
    T.sgd_step({"t": theta}, T.OptimizerState({}, wd.lr), wd)
    assert theta.values[0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_sgd_step_needs_a_gradient():
    with pytest.raises(ContractError):
        T.sgd_step({"t": nx.param(np.ones(2))}, T.OptimizerState({}, 0.1), TrainConfig())


def test_active_groups():
    assert T.active_groups(TrainConfig(enrichment=False, osb_loss=False)) == {"encoder"}
    assert T.active_groups(TrainConfig()) == {"encoder", "osb", "gape"}
    full = TrainConfig(fusion="concat_proj", position_embedding=True, bg_enrich=True)
    assert T.active_groups(full) == {"encoder", "osb", "gape", "proj", "pe", "bg"}


def test_sinusoid_code_shape_and_range():
    code = T.sinusoid_code(16, 16)
    assert code.shape == (T.PE_CHANNELS, 16, 16)
    assert np.abs(code).max() <= 1.0


def test_train_smoke_and_checkpoint_roundtrip(tmp_path):
    cfg = TrainConfig(channels="4,4,8,8", episodes=6, checkpoint_every=3, heldout_episodes=2)
    res = T.train(cfg, 5, tmp_path)
    assert [p.name for p in res.checkpoints] == ["ck_0", "ck_3", "ck_6"]
    assert [r["episode"] for r in res.log] == list(range(1, 7))
    assert all(np.isfinite(r["L_seg"]) for r in res.log)
    params, cfg2, meta = T.load_checkpoint(tmp_path / "ck_6")
    assert cfg2 == cfg and meta["ckpt_episode"] == "6"
    for k, v in res.params.state().items():
        np.testing.assert_array_equal(params.state()[k], v)
    recs = T.evaluate(params, cfg, 3, "both")
    assert len(recs) == 6 and {r.domain for r in recs} == {"source", "target"}


def test_train_zero_episodes_gives_initial_checkpoint(tmp_path):
    res = T.train(TrainConfig(channels="4,4,8,8", episodes=0, heldout_episodes=0), 0, tmp_path)
    assert [p.name for p in res.checkpoints] == ["ck_0"] and res.log == []


# -- config ---------------------------------------------------------------------------
def test_config_parsing(tmp_path):
    text = "# comment\nK = 5  # inline\nenrichment = false\nlr=0.01\n"
    assert read_config_text(text) == {"K": 5, "enrichment": False, "lr": 0.01}
    p = tmp_path / "c.cfg"
    p.write_text(text)
    cfg = load_config(p, ["G=4"])
    assert (cfg.K, cfg.G, cfg.enrichment) == (5, 4, False)
    assert read_config_text(cfg.to_lines()) == {k: getattr(cfg, k) for k in cfg.as_dict()}


@pytest.mark.parametrize("bad, word", [("bogus = 1", "bogus"), ("K = ten", "K"),
                                       ("fusion = sum", "fusion"), ("K = 1", "K"),
                                       ("just text", "expected")])
def test_config_rejects(bad, word):
    with pytest.raises(ConfigKeyError, match=word):
        TrainConfig().replace(**read_config_text(bad))
