import numpy as np
import pytest

import graspil.tensor as T
from graspil.model import (ModelConfig, decode, encode, image_features, infer_chunk,
                           init_params, load_model, loss, reparameterize, save_model)
from graspil.optim import Adam
from graspil.tensor import DimensionError, Tensor

from fdcheck import check_param_gradients

MICRO = ModelConfig(d_model=8, d_z=4, c_img=8, n1=1, n2=1, p_hist=3, k_chunk=2,
                    d_state=4, expand=2, img_h=16, img_w=16)


@pytest.fixture(scope="module")
def micro():
    return init_params(MICRO, seed=42)


def _micro_batch(rng, B=2):
    images = rng.uniform(0, 1, (B, 16, 16, 3))
    hists = rng.normal(size=(B, MICRO.p_hist, MICRO.h_dim))
    chunks = rng.normal(size=(B, MICRO.k_chunk, MICRO.n_joints))
    return images, hists, chunks


class TestImageFeatures:
    def test_default_grid_is_8x10(self):
        cfg = ModelConfig(c_img=8, n1=1, n2=1)
        params = init_params(cfg, seed=0)
        img = np.random.default_rng(0).uniform(0, 1, (240, 320, 3))
        feats = image_features(params, img)
        assert feats.shape == (1, 8, 10, 8)

    def test_zero_image_zero_biases_gives_zero(self, micro):
        feats = image_features(micro, np.zeros((16, 16, 3)))
        np.testing.assert_array_equal(feats.data, np.zeros_like(feats.data))

    def test_deterministic(self, micro):
        img = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
        a = image_features(micro, img).data
        b = image_features(micro, img).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_dims_rejected(self, micro):
        with pytest.raises(DimensionError):
            image_features(micro, np.zeros((17, 16, 3)))


class TestEncode:
    def test_output_shapes(self, micro):
        rng = np.random.default_rng(2)
        _, hists, chunks = _micro_batch(rng)
        mu, lv = encode(micro, hists, chunks)
        assert mu.shape == (2, MICRO.d_z) and lv.shape == (2, MICRO.d_z)
        mu1, lv1 = encode(micro, hists[0], chunks[0])
        assert mu1.shape == (MICRO.d_z,) and lv1.shape == (MICRO.d_z,)

    def test_deterministic(self, micro):
        rng = np.random.default_rng(3)
        _, hists, chunks = _micro_batch(rng)
        a = encode(micro, hists, chunks)
        b = encode(micro, hists, chunks)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_kl_finite_nonnegative_at_init(self, micro):
        rng = np.random.default_rng(4)
        _, hists, chunks = _micro_batch(rng)
        mu, lv = encode(micro, hists, chunks)
        kl = T.kl_std_normal(mu, lv).item()
        assert np.isfinite(kl) and kl >= 0.0


class TestReparameterize:
    def test_zero_eps_returns_mu(self):
        mu = np.array([1.0, -2.0])
        z = reparameterize(mu, np.array([0.3, 0.7]), np.zeros(2))
        np.testing.assert_allclose(z.data, mu)

    def test_standard_prior_returns_eps(self):
        eps = np.array([0.5, -1.5])
        z = reparameterize(np.zeros(2), np.zeros(2), eps)
        np.testing.assert_allclose(z.data, eps)

    def test_closed_form_case(self):
        z = reparameterize(np.array([1.0]), np.array([np.log(4.0)]), np.array([0.5]))
        assert z.data[0] == pytest.approx(2.0, abs=1e-12)


class TestDecode:
    def test_output_shape(self, micro):
        rng = np.random.default_rng(5)
        images, hists, _ = _micro_batch(rng)
        z = rng.normal(size=(2, MICRO.d_z))
        chunk = decode(micro, images, hists, z)
        assert chunk.shape == (2, MICRO.k_chunk, MICRO.n_joints)
        single = decode(micro, images[0], hists[0], z[0])
        assert single.shape == (MICRO.k_chunk, MICRO.n_joints)

    def test_default_chunk_shape_is_20x6(self):
        cfg = ModelConfig(d_model=16, d_z=4, c_img=8, n1=1, n2=1, d_state=4,
                          img_h=64, img_w=64)
        params = init_params(cfg, seed=1)
        rng = np.random.default_rng(6)
        chunk = decode(params, rng.uniform(0, 1, (64, 64, 3)),
                       rng.normal(size=(30, 36)), rng.normal(size=4))
        assert chunk.shape == (20, 6)

    def test_deterministic(self, micro):
        rng = np.random.default_rng(7)
        images, hists, _ = _micro_batch(rng, B=1)
        z = rng.normal(size=(1, MICRO.d_z))
        a = decode(micro, images, hists, z).data
        b = decode(micro, images, hists, z).data
        np.testing.assert_array_equal(a, b)

    def test_latent_sensitivity(self, micro):
        rng = np.random.default_rng(8)
        images, hists, _ = _micro_batch(rng, B=1)
        z1 = rng.normal(size=(1, MICRO.d_z))
        z2 = z1 + 1.0
        a = decode(micro, images, hists, z1).data
        b = decode(micro, images, hists, z2).data
        assert np.abs(a - b).max() > 1e-9

    def test_position_encoding_is_used(self, micro):
        rng = np.random.default_rng(9)
        images, hists, _ = _micro_batch(rng, B=1)
        z = rng.normal(size=(1, MICRO.d_z))
        base = decode(micro, images, hists, z).data
        perm = hists.copy()
        perm[0] = perm[0][::-1]  # permute history tokens, positions stay fixed
        moved = decode(micro, images, perm, z).data
        assert np.abs(base - moved).max() > 1e-12


@pytest.mark.parametrize("d_model", [8, 64, 256])
def test_shape_contract_across_widths(d_model):
    cfg = ModelConfig(d_model=d_model, d_z=4, c_img=8, n1=1, n2=1, p_hist=4,
                      k_chunk=3, d_state=4, img_h=32, img_w=32)
    params = init_params(cfg, seed=d_model)
    rng = np.random.default_rng(d_model)
    images = rng.uniform(0, 1, (2, 32, 32, 3))
    hists = rng.normal(size=(2, 4, 36))
    chunks = rng.normal(size=(2, 3, 6))
    mu, lv = encode(params, hists, chunks)
    assert mu.shape == (2, 4) and lv.shape == (2, 4)
    out = decode(params, images, hists, reparameterize(mu, lv, np.zeros((2, 4))))
    assert out.shape == (2, 3, 6)


class TestLoss:
    def test_nonnegative_and_parts(self, micro):
        rng = np.random.default_rng(10)
        batch = _micro_batch(rng)
        eps = rng.standard_normal((2, MICRO.d_z))
        total, parts = loss(micro, batch, eps)
        assert total.item() >= 0.0
        assert total.item() == pytest.approx(parts["l1"] + MICRO.beta * parts["kl"])

    def test_perfect_reconstruction_standard_prior_is_zero(self):
        # both loss terms vanish exactly in the matched case
        assert T.l1_loss(np.ones((4, 6)), np.ones((4, 6))).item() == 0.0
        assert T.kl_std_normal(np.zeros(4), np.zeros(4)).item() == 0.0

    def test_overfit_single_batch_10x(self):
        params = init_params(MICRO, seed=7)
        rng = np.random.default_rng(11)
        images, hists, _ = _micro_batch(rng, B=2)
        chunks = rng.uniform(-0.5, 0.5, (2, MICRO.k_chunk, MICRO.n_joints))
        batch = (images, hists, chunks)
        eps = np.zeros((2, MICRO.d_z))
        opt = Adam(params.named_parameters(), lr=3e-3)
        first = None
        for step in range(200):
            opt.zero_grad()
            total, parts = loss(params, batch, eps)
            if first is None:
                first = total.item()
            total.backward()
            opt.step()
        final, _ = loss(params, batch, eps)
        assert final.item() < first / 10.0, f"{first} -> {final.item()}"


class TestInferChunk:
    def test_mean_mode_deterministic(self, micro):
        rng = np.random.default_rng(12)
        images, hists, _ = _micro_batch(rng, B=1)
        a = infer_chunk(micro, images[0], hists[0])
        b = infer_chunk(micro, images[0], hists[0])
        np.testing.assert_array_equal(a, b)

    def test_output_within_joint_limits(self, micro):
        rng = np.random.default_rng(13)
        images, hists, _ = _micro_batch(rng, B=1)
        stats = (np.full(6, 50.0), np.full(6, 1000.0))  # huge std forces clamping
        chunk = infer_chunk(micro, images[0], hists[0], action_stats=stats)
        assert chunk.min() >= 0.0 and chunk.max() <= 100.0

    def test_sampled_latents_differ(self, micro):
        rng = np.random.default_rng(14)
        images, hists, _ = _micro_batch(rng, B=1)
        a = infer_chunk(micro, images[0], hists[0], mode="sample",
                        rng=np.random.default_rng(1))
        b = infer_chunk(micro, images[0], hists[0], mode="sample",
                        rng=np.random.default_rng(2))
        assert np.abs(a - b).max() > 0


def test_end_to_end_micro_gradcheck():
    params = init_params(MICRO, seed=3)
    rng = np.random.default_rng(15)
    images, hists, chunks = _micro_batch(rng, B=1)
    chunks = chunks + 2.0  # keep |pred - target| away from the L1 kink
    eps = rng.standard_normal((1, MICRO.d_z))
    named = params.named_parameters()

    def total():
        t, _ = loss(params, (images, hists, chunks), eps)
        return t

    check_param_gradients(total, named, tol=1e-3, max_coords=2, seed=4)


class TestCheckpointRoundTrip:
    def test_save_load_identical(self, micro, tmp_path):
        path = tmp_path / "model.vtmv"
        save_model(path, micro, extra={"opt.step": np.array([5.0])})
        loaded, rest = load_model(path)
        assert rest["opt.step"][0] == 5.0
        a = micro.named_parameters()
        b = loaded.named_parameters()
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)
        assert loaded.cfg == micro.cfg

    def test_missing_param_rejected(self, micro, tmp_path):
        from graspil.checkpoint import load_checkpoint, save_checkpoint
        path = tmp_path / "model.vtmv"
        save_model(path, micro)
        arrays = load_checkpoint(path)
        del arrays["param.cls1"]
        save_checkpoint(path, arrays)
        with pytest.raises(DimensionError):
            load_model(path)
