"""Latent codec: shape contracts, quantization oracle, straight-through
gradients, training behaviour, freezing."""

import numpy as np
import pytest

from camogen.autograd import Tensor, square, tsum
from camogen.codec import Codec, CodecConfig, nearest_entries, train_codec
from camogen.errors import ConfigError, DimensionError, InputError
from camogen.rng import Rng


def small_images(n=4, size=32, seed=0):
    rng = Rng(seed, "imgs")
    return [rng.uniform(0.0, 1.0, (size, size, 3), dtype=np.float32) for _ in range(n)]


# -- shape contracts ------------------------------------------------------------


def test_latent_shape_default_config():
    codec = Codec(CodecConfig(), Rng(0))
    out = codec.encode(np.zeros((64, 64, 3), dtype=np.float32))
    assert out.shape == (16, 16, 3)


@pytest.mark.parametrize("stages", [1, 2, 3])
def test_shape_contract_for_all_factors(stages):
    cfg = CodecConfig(image_size=64, downsample_stages=stages, codebook_size=16)
    codec = Codec(cfg, Rng(0))
    size = 64 // (2 ** stages)
    latent = codec.encode(np.zeros((64, 64, 3), dtype=np.float32))
    assert latent.shape == (size, size, 3)
    recon = codec.decode(latent)
    assert recon.shape == (64, 64, 3)
    assert recon.min() >= 0.0 and recon.max() <= 1.0


def test_encode_rejects_wrong_dims():
    codec = Codec(CodecConfig(), Rng(0))
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((32, 64, 3), dtype=np.float32))
    with pytest.raises(DimensionError):
        codec.decode(np.zeros((8, 8, 3), dtype=np.float32))


def test_encode_deterministic():
    codec = Codec(CodecConfig(image_size=32, codebook_size=8), Rng(1))
    img = small_images(1)[0]
    np.testing.assert_array_equal(codec.encode(img), codec.encode(img))


def test_config_validation():
    with pytest.raises(ConfigError):
        CodecConfig(image_size=30, downsample_stages=2).validate()
    with pytest.raises(ConfigError):
        CodecConfig(codebook_size=0).validate()


# -- quantization -----------------------------------------------------------------


def test_quantize_exact_entry_match():
    codec = Codec(CodecConfig(image_size=32, codebook_size=16), Rng(2))
    latent = np.tile(codec.codebook[7], (8, 8, 1)).astype(np.float32)
    zq, idx = codec.quantize(latent)
    assert (idx == 7).all()
    np.testing.assert_array_equal(zq, latent)


def test_quantize_idempotent():
    codec = Codec(CodecConfig(image_size=32, codebook_size=16), Rng(3))
    latent = Rng(4).normal((8, 8, 3))
    zq1, idx1 = codec.quantize(latent)
    zq2, idx2 = codec.quantize(zq1)
    np.testing.assert_array_equal(zq1, zq2)
    np.testing.assert_array_equal(idx1, idx2)


def test_quantize_matches_bruteforce_oracle():
    rng = Rng(5, "quant")
    entries = rng.normal((16, 3), dtype=np.float64)
    vectors = rng.normal((100, 3), dtype=np.float64)
    got = nearest_entries(vectors, entries)
    for i, v in enumerate(vectors):
        best, best_d = -1, np.inf
        for j, e in enumerate(entries):
            d = float(((v - e) ** 2).sum())
            if d < best_d:
                best, best_d = j, d
        assert got[i] == best


def test_quantize_tie_breaks_to_lowest_index():
    entries = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    idx = nearest_entries(np.array([[[1.0, 0.0]]]), entries)
    assert idx[0, 0] == 0  # entry 2 is equally near but has a higher index


def test_quantize_empty_codebook():
    with pytest.raises(ConfigError):
        nearest_entries(np.zeros((2, 2, 3)), np.zeros((0, 3)))


def test_quantize_dim_mismatch():
    with pytest.raises(DimensionError):
        nearest_entries(np.zeros((2, 2, 4)), np.zeros((5, 3)))


def test_straight_through_gradient_copies():
    codec = Codec(CodecConfig(image_size=32, codebook_size=8), Rng(6))
    z = Tensor(Rng(7).normal((8, 8, 3), dtype=np.float32), requires_grad=True)
    zq, _ = codec.quantize_t(z)
    loss = tsum(square(zq))
    loss.backward()
    # d(sum zq^2)/dzq = 2 zq must arrive at z unchanged
    np.testing.assert_array_equal(z.grad, 2.0 * zq.data)


def test_decode_idempotent_under_quantization():
    codec = Codec(CodecConfig(image_size=32, codebook_size=16), Rng(8))
    z = Rng(9).normal((8, 8, 3))
    zq, _ = codec.quantize(z)
    np.testing.assert_array_equal(codec.decode(z), codec.decode(zq))


# -- training -------------------------------------------------------------------


def test_training_reduces_reconstruction_error():
    imgs = small_images(1, seed=10)
    cfg = CodecConfig(image_size=32, codebook_size=16)
    _, log = train_codec(imgs, cfg, seed=0, steps=300, batch_size=2)
    assert log.recon[-1] < log.recon[0]


def test_training_deterministic():
    imgs = small_images(2, seed=11)
    cfg = CodecConfig(image_size=32, codebook_size=8)
    c1, _ = train_codec(imgs, cfg, seed=42, steps=60, batch_size=2)
    c2, _ = train_codec(imgs, cfg, seed=42, steps=60, batch_size=2)
    for name in c1.tensors:
        np.testing.assert_array_equal(c1.tensors[name].data, c2.tensors[name].data)


def test_all_codebook_entries_used_after_training():
    imgs = small_images(4, seed=12)
    cfg = CodecConfig(image_size=32, codebook_size=16)
    codec, _ = train_codec(imgs, cfg, seed=1, steps=400, batch_size=4)
    hist = np.zeros(16, dtype=np.int64)
    for img in imgs:
        _, idx = codec.quantize(codec.encode(img))
        hist += np.bincount(idx.reshape(-1), minlength=16)
    assert (hist > 0).all(), f"unused entries: {np.flatnonzero(hist == 0)}"


def test_training_requires_nonempty_dataset():
    with pytest.raises(InputError):
        train_codec([], CodecConfig(), seed=0, steps=1)


def test_frozen_codec_has_no_trainable_params():
    imgs = small_images(1, seed=13)
    codec, _ = train_codec(imgs, CodecConfig(image_size=32, codebook_size=8),
                           seed=0, steps=20, batch_size=1)
    assert codec.frozen
    assert codec.params is None
    assert all(not t.requires_grad for t in codec.tensors.values())
    crc = codec.checksum()
    codec.encode(imgs[0])
    codec.decode(codec.encode(imgs[0]))
    assert codec.checksum() == crc


@pytest.mark.slow
def test_roundtrip_psnr_target():
    """Stage-1 quality gate: decode(quantize(encode(x))) >= 25 dB on the
    training images of a small synthetic set."""
    from camogen.dataset import synth_dataset, load_samples
    from camogen.metrics import masked_psnr
    man = synth_dataset(seed=5, n_images=8, height=64, width=64,
                        out_dir="/tmp/camogen_test_psnr")
    samples = load_samples(man, 64)
    codec, _ = train_codec([s.image for s in samples], CodecConfig(), seed=0,
                           steps=500, batch_size=4)
    full = np.ones((64, 64), dtype=np.uint8)
    for s in samples:
        rec = codec.decode(codec.encode(s.image))
        psnr = masked_psnr(rec * 255.0, s.image * 255.0, full)
        assert psnr >= 25.0, f"{s.name}: {psnr:.2f} dB"
