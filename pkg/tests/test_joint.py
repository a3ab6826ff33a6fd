import numpy as np
import pytest

from gradchecks import check_bank, small_bank
from xdesc.config import TrainConfig
from xdesc.descriptors import binary_spec, real_spec
from xdesc.errors import DatasetError, FormatError, ShapeError, SpecError
from xdesc.joint import (
    _batch_objective,
    bank_objective,
    build_bank,
    decode,
    encode,
    load_bank,
    loads_xbnk,
    save_bank,
    TrainLog,
    train_bank,
    translate_via_bank,
)
from xdesc.losses import LossConfig
from xdesc.mlp import dumps_xmlp, predict
from xdesc.pair import translation_loss
from xdesc.synthetic import default_families, gen_dataset, gen_latents

SPECS = [real_spec("r", 6, nonnegative=True), binary_spec("b", 8), real_spec("l", 5, learned=True)]


def toy_batch(rng, n=6):
    r = np.abs(rng.standard_normal((n, 6)))
    b = (rng.random((n, 8)) > 0.5).astype(float)
    l = rng.standard_normal((n, 5))
    return {"r": r / np.linalg.norm(r, axis=1, keepdims=True), "b": b,
            "l": l / np.linalg.norm(l, axis=1, keepdims=True)}


@pytest.fixture(scope="module")
def small():
    fams = default_families(0)
    train = gen_dataset(gen_latents(640, seed=1), fams, noise_seed=2)
    test = gen_dataset(gen_latents(100, seed=3), fams, noise_seed=4)
    return train, test


@pytest.fixture(scope="module")
def bank(small):
    return train_bank(small[0], train_cfg=TrainConfig(epochs=1), embed_dim=16)


@pytest.mark.parametrize("variant,alpha", [("quadratic", 0.1), ("quadratic", 0.0),
                                           ("linear", 0.1), ("auto_encoder", 0.1)])
def test_full_objective_gradient(variant, alpha):
    rng = np.random.default_rng(11)
    cfg = LossConfig(alpha=alpha, variant=variant)
    perm = np.array([2, 0, 1]) if variant == "linear" else None
    for seed in range(2):
        assert check_bank(small_bank(SPECS, cfg, seed), toy_batch(rng), perm) < 1e-4


def test_single_algorithm_bank_is_an_auto_encoder():
    rng = np.random.default_rng(0)
    cfg = LossConfig(alpha=0.1)
    bank = small_bank(SPECS[:1], cfg, 0)
    batch = {"r": toy_batch(rng)["r"]}
    total, lt, lm, _ = _batch_objective(bank, batch, cfg, None, train=False)
    assert lt.shape == (1, 1)
    assert total == pytest.approx(lt[0, 0] + 0.1 * lm[0, 0])


def test_auto_encoder_without_matching_is_mean_reconstruction():
    rng = np.random.default_rng(1)
    cfg = LossConfig(alpha=0.0, variant="auto_encoder")
    bank = small_bank(SPECS, cfg, 3)
    batch = toy_batch(rng)
    total, _, _, _ = _batch_objective(bank, batch, cfg, None, train=False)
    recon = []
    for spec in SPECS:
        emb = predict(bank.encoders[spec.name], batch[spec.name])
        out = predict(bank.decoders[spec.name], emb)
        recon.append(translation_loss(spec, out, batch[spec.name])[0])
    assert total == pytest.approx(np.mean(recon))


def test_bank_layout(bank):
    assert len(bank.networks()) == 2 * len(bank.names)
    for name in bank.names:
        assert bank.encoders[name].out_dim == 16
        assert bank.decoders[name].in_dim == 16
    assert bank.decoders["brief"].layers[-1].kind == "sigmoid"
    assert bank.decoders["sift"].layers[-1].kind == "unit_l2"
    assert bank.decoders["sift"].layers[-2].kind == "relu"


def test_encode_is_unit_norm_and_deterministic(bank, small):
    for name in bank.names:
        e = encode(bank, name, small[1][name])
        np.testing.assert_allclose(np.linalg.norm(e.values, axis=1), 1, atol=1e-5)
        assert e.values.tobytes() == encode(bank, name, small[1][name]).values.tobytes()
    with pytest.raises(SpecError):
        encode(bank, "sift", small[1]["hardnet"])


def test_decode_contracts(bank, small):
    e = encode(bank, "hardnet", small[1]["hardnet"])
    bits = decode(bank, "brief", e)
    assert set(np.unique(bits.values)) <= {0.0, 1.0}
    np.testing.assert_array_equal(bits.patch_ids, small[1]["hardnet"].patch_ids)
    sift = decode(bank, "sift", e)
    assert np.all(sift.values >= 0)
    np.testing.assert_allclose(np.linalg.norm(sift.values, axis=1), 1, atol=1e-5)
    with pytest.raises(ShapeError):
        decode(bank, "sift", np.zeros((3, 15)))
    via = translate_via_bank(bank, "hardnet", "brief", small[1]["hardnet"])
    assert via.values.tobytes() == bits.values.tobytes()


def test_training_is_deterministic(small):
    cfg = TrainConfig(epochs=1, seed=5)
    a = train_bank(small[0].select(["hardnet", "sosnet"]), train_cfg=cfg, embed_dim=8)
    b = train_bank(small[0].select(["hardnet", "sosnet"]), train_cfg=cfg, embed_dim=8)
    for p, q in zip(a.networks(), b.networks()):
        assert dumps_xmlp(p) == dumps_xmlp(q)


def test_training_reduces_objective(bank, small):
    untrained = build_bank(bank.specs, 16, seed=0)
    untrained.eval()
    before = bank_objective(untrained, small[1], LossConfig())["objective"]
    after = bank_objective(bank, small[1], LossConfig())["objective"]
    assert after < before


def test_dataset_must_cover_bank(small):
    with pytest.raises(DatasetError):
        train_bank(small[0].select(["sift"]), specs=SPECS[:1], train_cfg=TrainConfig(epochs=1))


def test_xbnk_round_trip(bank, small, tmp_path):
    save_bank(bank, tmp_path / "b.xbnk")
    back = load_bank(tmp_path / "b.xbnk")
    assert back.names == bank.names and back.embed_dim == bank.embed_dim
    assert back.loss_cfg == bank.loss_cfg
    x = small[1]["sift"]
    assert encode(back, "sift", x).values.tobytes() == encode(bank, "sift", x).values.tobytes()
    blob = (tmp_path / "b.xbnk").read_bytes()
    with pytest.raises(FormatError):
        loads_xbnk(blob + b"\0")
    with pytest.raises(FormatError):
        loads_xbnk(b"NOPE" + blob[4:])


def test_near_degenerate_batchnorm_converges_quadratically():
    # a 3-wide hidden layer whose BN column has almost no spread: the
    # fixed-step check is dominated by truncation error, but the error
    # shrinks as eps^2, which only a correct analytic gradient does
    from gradchecks import _objective_with_signature
    from oracles import central_differences, rel_error

    rng = np.random.default_rng(0)
    cfg = LossConfig()
    bank = small_bank(SPECS, cfg, 0, embed_dim=3, hidden=3)
    batch = {k: np.asarray(v, float) for k, v in toy_batch(rng).items()}
    _, _, _, grads = _batch_objective(bank, batch, cfg, None, train=True)
    offset = sum(len(net.parameters()) for net in bank.networks()[:2])
    p, a = bank.encoders["l"].parameters()[1], grads[offset + 1]
    errs = []
    for eps in (1e-4, 1e-5, 1e-6):
        num, valid = central_differences(lambda: _objective_with_signature(bank, batch, cfg, None), p, eps)
        errs.append(rel_error(a, num, valid))
    assert errs[1] < errs[0] / 50 and errs[2] < errs[1] / 50
    assert errs[2] < 1e-6


def test_single_algorithm_training_reduces_reconstruction(small):
    log = TrainLog()
    train_bank(small[0].select(["hardnet"]), train_cfg=TrainConfig(epochs=3), embed_dim=8, history=log)
    assert log.epochs[-1] < log.epochs[0]
