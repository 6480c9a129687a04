import numpy as np
import pytest

from maskr import dsp
from maskr.codec import (
    CODEGRAM_HEADER_SIZE,
    CodebookSet,
    CodecConfig,
    Codegram,
    codebook_utilization,
    codegram_from_bytes,
    codegram_to_bytes,
    ema_kmeans,
    encode_clip,
    read_codegram,
    reencode_agreement,
    rvq_decode,
    rvq_encode,
    rvq_quantize,
    train_codec,
    write_codegram,
)
from maskr.data import synth_speech
from maskr.errors import CorruptCodegramError, DimensionError, FormatError, NotTrainedError


def brute_force_codes(latent, books):
    """Exhaustive per-frame scan; strict < keeps the lowest id on ties."""
    C = books.shape[0]
    out = np.zeros((C, latent.shape[0]), dtype=np.int64)
    for n, v in enumerate(latent):
        r = v.copy()
        for c in range(C):
            best, best_d = 0, np.inf
            for k in range(books.shape[1]):
                d = float(np.sum((r - books[c, k]) ** 2))
                if d < best_d:
                    best, best_d = k, d
            out[c, n] = best
            r = r - books[c, best]
    return out


@pytest.fixture(scope="module")
def held_out_frames(small_codec):
    clips = [synth_speech(2.0, 100 + s) for s in range(3)]
    return np.concatenate([dsp.compressed_spectrogram(c, 1024, 256).frames for c in clips])


# -- file format ------------------------------------------------------------------


def test_codegram_size_full_preset_shape(rng):
    cg = Codegram(rng.integers(0, 1024, size=(9, 259)), 1024, 44100 / 512)
    buf = codegram_to_bytes(cg)
    assert CODEGRAM_HEADER_SIZE == 17
    assert len(buf) == 17 + 9 * 259 * 2
    assert codegram_from_bytes(buf) == cg


def test_codegram_file_roundtrip(tmp_path, rng):
    cg = Codegram(rng.integers(0, 256, size=(4, 31)), 256, 62.5)
    write_codegram(tmp_path / "x.cgrm", cg)
    assert read_codegram(tmp_path / "x.cgrm") == cg


def test_codegram_layout_codebook_major():
    cg = Codegram(np.array([[1, 2], [3, 4]]), 8, 10.0)
    body = codegram_to_bytes(cg)[17:]
    assert np.frombuffer(body, "<u2").tolist() == [1, 2, 3, 4]


def test_codegram_bad_input():
    buf = codegram_to_bytes(Codegram(np.zeros((2, 5), int), 4, 1.0))
    with pytest.raises(FormatError):
        codegram_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        codegram_from_bytes(buf[:10])
    with pytest.raises(FormatError):
        codegram_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        codegram_from_bytes(buf[:4] + bytes([9]) + buf[5:])
    with pytest.raises(CorruptCodegramError):
        Codegram(np.array([[4]]), 4, 1.0)


# -- encoder / decoder ------------------------------------------------------------------


def test_centroid_input_has_zero_residual(small_codec):
    k = 17
    latent = small_codec.codebooks[0][k][None]
    codes, norms = rvq_quantize(latent, small_codec)
    assert codes[0, 0] == k
    assert norms[1, 0] == 0.0


def test_residual_norms_non_increasing(small_codec, rng):
    latent = rng.normal(size=(500, small_codec.latent_dim)) * 3
    _, norms = rvq_quantize(latent, small_codec)
    assert np.all(np.diff(norms, axis=0) <= 1e-12)


def test_encoder_matches_brute_force(small_codec, held_out_frames):
    frames = held_out_frames[:1000]
    latent = frames @ small_codec.projection_in
    want = brute_force_codes(latent, small_codec.codebooks)
    np.testing.assert_array_equal(rvq_encode(frames, small_codec).tokens, want)


def test_decode_mse_non_increasing_with_stages(small_codec, held_out_frames):
    cg = rvq_encode(held_out_frames, small_codec)
    target = held_out_frames @ small_codec.projection_in @ small_codec.projection_out
    target = np.maximum(target, 0.0)
    mse = [np.mean((rvq_decode(cg, small_codec, stages=s).frames - target) ** 2)
           for s in range(1, small_codec.num_codebooks + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(mse, mse[1:]))
    assert mse[1] < mse[0]


def test_zero_residual_reconstructs_projection(small_codec, rng):
    tokens = rng.integers(0, small_codec.codebook_size, size=(small_codec.num_codebooks, 12))
    z = sum(small_codec.codebooks[c][tokens[c]] for c in range(small_codec.num_codebooks))
    frames = rvq_decode(Codegram(tokens, small_codec.codebook_size, small_codec.frame_rate),
                        small_codec).frames
    np.testing.assert_allclose(frames, np.maximum(z @ small_codec.projection_out, 0), atol=1e-12)


def test_decode_deterministic_and_checked(small_codec, rng):
    cg = Codegram(rng.integers(0, 256, (4, 20)), 256, small_codec.frame_rate)
    np.testing.assert_array_equal(rvq_decode(cg, small_codec).frames, rvq_decode(cg, small_codec).frames)
    with pytest.raises(DimensionError):
        rvq_decode(Codegram(np.zeros((3, 5), int), 256, 1.0), small_codec)


def test_frame_rate_and_alignment(small_codec, speech_clips):
    assert small_codec.frame_rate == 16000 / 256
    cg = encode_clip(speech_clips[0], small_codec)
    assert cg.num_frames == dsp.num_frames(len(speech_clips[0]), 256)


def test_untrained_codec_raises():
    cb = CodebookSet(np.zeros((2, 4, 3)), np.zeros((2, 4)), np.zeros((5, 3)), np.zeros((3, 5)), 8, 4, 100)
    with pytest.raises(NotTrainedError):
        rvq_encode(np.ones((2, 5)), cb)


# -- training -----------------------------------------------------------------------


def test_kmeans_two_clusters(rng):
    data = np.concatenate([np.full(500, -1.0), np.full(500, 1.0)])[:, None]
    data += rng.normal(scale=1e-3, size=data.shape)
    cents, counts = ema_kmeans(data, 2, rng, iterations=300, batch_size=256, init=[[-0.2], [0.3]])
    np.testing.assert_allclose(np.sort(cents[:, 0]), [-1.0, 1.0], atol=1e-2)
    assert np.all(counts >= 0)


def test_codebook_utilization(small_codec, speech_clips):
    frames = np.concatenate([dsp.compressed_spectrogram(c, 1024, 256).frames for c in speech_clips])
    assert np.all(codebook_utilization(small_codec, frames) > 0.5)


def test_two_stages_beat_one_on_held_out(small_codec, held_out_frames):
    latent = held_out_frames @ small_codec.projection_in
    _, norms = rvq_quantize(latent, small_codec)
    assert np.mean(norms[2] ** 2) < np.mean(norms[1] ** 2)


def test_train_codec_rejects_tiny_corpus():
    with pytest.raises(DimensionError):
        train_codec([np.ones((10, 513))], CodecConfig())


def test_codec_save_load(tmp_path, small_codec, speech_clips):
    path = tmp_path / "c.mskr"
    small_codec.save(path)
    back = CodebookSet.load(path)
    assert (back.window, back.hop, back.sample_rate) == (1024, 256, 16000)
    a = encode_clip(speech_clips[1], back)
    assert a.tokens.shape == (4, 125)
    with pytest.raises(FormatError):
        from maskr.nn_core import save_checkpoint
        save_checkpoint(tmp_path / "x.mskr", {"a": np.zeros(1)}, {"kind": "other"})
        CodebookSet.load(tmp_path / "x.mskr")


def test_reencode_agreement_is_a_fraction(small_codec, speech_clips):
    cg = encode_clip(speech_clips[2], small_codec)
    v = reencode_agreement(cg, small_codec)
    assert 0.0 <= v <= 1.0


def test_no_duplicate_codes(small_codec):
    for book in small_codec.codebooks:
        assert np.unique(book, axis=0).shape[0] == book.shape[0]
