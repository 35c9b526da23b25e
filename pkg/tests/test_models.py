import numpy as np
import pytest
import torch

from facebound import models as M
from facebound.errors import ConfigError, ContractError, DependencyError


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(resolution=48)
    with pytest.raises(ConfigError):
        M.ModelConfig(resolution=256)
    with pytest.raises(ConfigError):
        M.ModelConfig(ch=0)
    assert M.ModelConfig().cond_dim == 148


def test_config_hash_ignores_classifier_width():
    assert M.ModelConfig(id_classes=3).hash() == M.ModelConfig(id_classes=9).hash()
    assert M.ModelConfig(ch=16).hash() != M.ModelConfig().hash()


def test_init_is_deterministic_and_seed_sensitive(tiny_model_config):
    a = M.init_networks(tiny_model_config, 0)
    b = M.init_networks(tiny_model_config, 0)
    c = M.init_networks(tiny_model_config, 1)
    for name in M.NETWORK_NAMES:
        assert params_equal(a[name], b[name])
    assert any(not params_equal(a[n], c[n]) for n in M.NETWORK_NAMES)


def test_network_init_independent_of_build_order(tiny_model_config):
    alone = M.build_network("g_dec_i", tiny_model_config, 5)
    bundle = M.init_networks(tiny_model_config, 5)
    assert params_equal(alone, bundle["g_dec_i"])


def test_default_shapes():
    cfg = M.ModelConfig()
    torch.manual_seed(0)
    x = torch.rand(2, 3, 64, 64)
    nets = {n: M.build_network(n, cfg, 0).eval() for n in M.NETWORK_NAMES}
    z, b_hat = M.forward_boundary_autoencoder(nets["enc"], nets["dec"], x, torch.zeros(2, 3), torch.zeros(2, 17))
    assert z.shape == (2, 128) and b_hat.shape == x.shape
    f_b, f_i, img = M.forward_synthesis(nets["g_enc_b"], nets["g_enc_i"], nets["g_dec_i"], x, x * 2 - 1)
    assert f_b.shape == (2, 128, 8, 8) and f_i.shape == (2, 64) and img.shape == x.shape
    assert nets["g_dec_i"].in_channels == 192
    maps = M.forward_discriminators(nets["d"], img, x)
    assert len(maps) == 3
    assert [m.shape[-1] for m in maps] == [16, 8, 4]
    pool, fc = M.identity_features(nets["proxy"], img)
    assert pool.shape == (2, 64) and fc.shape == (2, cfg.id_classes)


def test_output_ranges_and_purity(tiny_model_config):
    nets = M.init_networks(tiny_model_config, 0)
    for n in M.NETWORK_NAMES:
        nets[n].eval()
    g = torch.Generator().manual_seed(3)
    b = torch.rand(4, 3, 32, 32, generator=g)
    p, e = torch.randn(4, 3, generator=g), torch.rand(4, 17, generator=g)
    with torch.no_grad():
        _, b_hat = M.forward_boundary_autoencoder(nets["enc"], nets["dec"], b, p, e)
        _, b_hat2 = M.forward_boundary_autoencoder(nets["enc"], nets["dec"], b, p, e)
        p_hat, e_hat = M.forward_estimators(nets["f_p"], nets["f_e"], b)
        img = M.forward_synthesis(nets["g_enc_b"], nets["g_enc_i"], nets["g_dec_i"], b, b * 2 - 1)[2]
        img2 = M.forward_synthesis(nets["g_enc_b"], nets["g_enc_i"], nets["g_dec_i"], b, b * 2 - 1)[2]
        maps = M.forward_discriminators(nets["d"], img, b)
        f1 = M.identity_features(nets["proxy"], img)
        f2 = M.identity_features(nets["proxy"], img)
    assert torch.equal(b_hat, b_hat2) and torch.equal(img, img2)
    assert torch.equal(f1[0], f2[0]) and torch.equal(f1[1], f2[1])
    assert b_hat.min() >= 0 and b_hat.max() <= 1
    assert img.min() >= -1 and img.max() <= 1
    assert p_hat.shape == (4, 3) and e_hat.shape == (4, 17)
    assert e_hat.min() >= 0 and e_hat.max() <= 1
    assert all(m.min() > 0 and m.max() < 1 for m in maps)
    assert f1[1].shape == (4, tiny_model_config.id_classes)


def test_contract_errors(tiny_model_config):
    nets = M.init_networks(tiny_model_config, 0)
    b = torch.rand(2, 3, 32, 32)
    with pytest.raises(ContractError):
        M.forward_boundary_autoencoder(nets["enc"], nets["dec"], b, torch.zeros(2, 2), torch.zeros(2, 17))
    with pytest.raises(ContractError):
        M.forward_boundary_autoencoder(nets["enc"], nets["dec"], b, torch.zeros(2, 3), torch.zeros(3, 17))
    with pytest.raises(ContractError):
        M.forward_estimators(nets["f_p"], nets["f_e"], torch.rand(2, 3, 64, 64))
    with pytest.raises(ContractError):
        M.forward_synthesis(nets["g_enc_b"], nets["g_enc_i"], nets["g_dec_i"], b, torch.rand(2, 3, 64, 64))
    with pytest.raises(ContractError):
        M.forward_discriminators(nets["d"], b, torch.rand(2, 3, 16, 16))
    with pytest.raises(ContractError):
        M.identity_features(nets["proxy"], torch.rand(2, 1, 32, 32))
    with pytest.raises(ContractError):  # texture code width disagrees with the decoder
        wide = M.build_network("g_enc_i", M.ModelConfig(resolution=32, z_dim=16, c_b=8, d_id=12, ch=4), 0)
        M.forward_synthesis(nets["g_enc_b"], wide, nets["g_dec_i"], b, b)


def test_checkpoint_round_trip(tmp_path, tiny_model_config):
    nets = M.init_networks(tiny_model_config, 7)
    path = M.save_checkpoint(tmp_path / "c.pt", "stage1", 12, tiny_model_config,
                             {"enc": nets["enc"], "dec": nets["dec"]}, {"batch": {"x": 1}}, {"note": "hi"})
    ck = M.load_checkpoint(path, tiny_model_config)
    assert (ck.stage, ck.step, ck.config) == ("stage1", 12, tiny_model_config)
    assert ck.meta["note"] == "hi" and ck.meta["rng_state"] == {"batch": {"x": 1}}
    enc = ck.build("enc")
    assert params_equal(enc, nets["enc"]) and not enc.training
    assert not list(tmp_path.glob(".tmp-*"))
    with pytest.raises(DependencyError):
        ck.build("proxy")
    with pytest.raises(DependencyError):
        ck.require_stage("synth")
    assert ck.require_stage("stage1", "synth") is ck


def test_checkpoint_errors(tmp_path, tiny_model_config):
    with pytest.raises(DependencyError):
        M.load_checkpoint(tmp_path / "none.pt")
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(DependencyError):
        M.load_checkpoint(bad)
    path = M.save_checkpoint(tmp_path / "c.pt", "proxy", 0, tiny_model_config, {})
    other = M.ModelConfig(resolution=32, z_dim=16, c_b=8, d_id=8, ch=8)
    with pytest.raises(DependencyError, match="config_hash"):
        M.load_checkpoint(path, other)
    assert M.load_checkpoint(path, other, force=True).stage == "proxy"


def test_checkpoint_bytes_are_reproducible(tmp_path, tiny_model_config):
    digests = []
    for k in range(2):
        nets = M.init_networks(tiny_model_config, 3, names=("f_p",))
        p = M.save_checkpoint(tmp_path / f"{k}.pt", "estimators", 1, tiny_model_config, nets.nets,
                              {"batch": np.random.default_rng(0).bit_generator.state}, {"v": [1.5]})
        digests.append(M.file_digest(p))
    assert digests[0] == digests[1]


def test_parameter_count(tiny_model_config):
    bundle = M.init_networks(tiny_model_config, 0)
    assert bundle.parameter_count() == sum(M.count_parameters(n) for n in bundle.nets.values()) > 0
