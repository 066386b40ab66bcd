import numpy as np
import pytest

from diffprobe.codec import IdentityCodec, PatchifyCodec, TinyAutoencoderCodec, build_codec

RNG = np.random.default_rng(5)


def test_identity_round_trip():
    c = IdentityCodec(channels=3)
    x = RNG.random((2, 3, 8, 8))
    np.testing.assert_array_equal(c.decode(c.encode(x)), x)
    assert c.latent_channels() == 3


def test_patchify_geometry_and_exact_inverse():
    c = PatchifyCodec(channels=3, stride=2)
    x = RNG.random((2, 3, 8, 6)).astype(np.float32)
    z = c.encode(x)
    assert z.shape == (2, 12, 4, 3)
    np.testing.assert_array_equal(c.decode(z), x)


def test_patchify_block_layout():
    # one channel, one 2x2 image: latent channels must hold the block row-major
    c = PatchifyCodec(channels=1, stride=2)
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    z = c.encode(x)
    np.testing.assert_array_equal(z.reshape(4), [0.0, 1.0, 2.0, 3.0])


def test_patchify_rejects_indivisible():
    c = PatchifyCodec(stride=2)
    with pytest.raises(ValueError, match="divisible"):
        c.encode(RNG.random((1, 3, 7, 8)))


def test_tiny_autoencoder_shape_contract_and_determinism():
    c = TinyAutoencoderCodec(channels=3, latent_dim=6, seed=3)
    x = RNG.random((2, 3, 8, 8)).astype(np.float32)
    z = c.encode(x)
    assert z.shape == (2, 6, 4, 4)
    y = c.decode(z)
    assert y.shape == x.shape
    c2 = TinyAutoencoderCodec(channels=3, latent_dim=6, seed=3)
    np.testing.assert_array_equal(c2.encode(x), z)


def test_tiny_autoencoder_is_frozen():
    c = TinyAutoencoderCodec()
    for block in (c._enc1, c._enc2, c._dec1, c._dec2):
        assert all(not p.requires_grad for p in block.parameters())


def test_build_codec_factory():
    assert build_codec(None).kind == "patchify"
    assert build_codec("identity").kind == "identity"
    assert build_codec({"kind": "tiny-autoencoder", "latent_dim": 4}).latent_channels() == 4
    with pytest.raises(ValueError, match="unknown codec"):
        build_codec("vae")


def test_codec_round_trips_through_dict():
    c = PatchifyCodec(channels=4, stride=2)
    c2 = build_codec(c.to_dict())
    assert c2.stride == 2 and c2.channels == 4


def test_affine_latent_standardization():
    c = PatchifyCodec(channels=3, stride=2, shift=0.5, scale=4.0)
    x = RNG.random((2, 3, 8, 8)).astype(np.float32)
    z = c.encode(x)
    np.testing.assert_allclose(z, (PatchifyCodec().encode(x) - 0.5) * 4.0, rtol=1e-6)
    y = c.decode(z)
    assert y.shape == x.shape
    np.testing.assert_allclose(y, x, rtol=1e-5, atol=1e-6)
    c2 = build_codec(c.to_dict())
    assert c2.shift == 0.5 and c2.scale == 4.0
