import math

import numpy as np
import pytest

from conftest import mini_config
from maskr.codec import CodecConfig, Codegram, encode_clip, train_codec
from maskr.dsp import AudioClip
from maskr.errors import DimensionError, DomainError
from maskr.masked_lm import RestorerModel
from maskr.metrics import (EvalReport, HeldOutItem, bench_decode, evaluate, lsd, measured_snr,
                           read_csv, summarize, sweep_guidance, token_accuracy, write_csv)
from maskr.sampler import DecodeConfig


def noise(rng, n=16000, sr=16000, scale=0.1):
    return AudioClip(rng.normal(scale=scale, size=n), sr)


# -- LSD ------------------------------------------------------------------------


def test_lsd_identical_is_zero(rng):
    x = noise(rng)
    assert lsd(x, x) == 0.0


def test_lsd_gain_of_ten_is_two(rng):
    x = noise(rng)
    y = AudioClip(10 * x.samples, x.sample_rate)
    assert lsd(x, y) == pytest.approx(2.0, abs=1e-6)


def test_lsd_symmetric_and_positive(rng):
    x, y = noise(rng), noise(rng)
    assert lsd(x, y) == pytest.approx(lsd(y, x), rel=1e-12)
    assert lsd(x, y) > 0


def test_lsd_rate_mismatch(rng):
    with pytest.raises(DomainError):
        lsd(noise(rng), noise(rng, sr=8000))


# -- token accuracy -------------------------------------------------------------------


def test_token_accuracy_per_codebook():
    truth = Codegram(np.array([[0, 1, 2, 3], [4, 4, 4, 4]]), 8, 10.0)
    pred = Codegram(np.array([[0, 1, 0, 0], [4, 4, 4, 4]]), 8, 10.0)
    np.testing.assert_array_equal(token_accuracy(pred, truth), [0.5, 1.0])
    np.testing.assert_array_equal(token_accuracy(truth, truth), [1.0, 1.0])


def test_token_accuracy_random_is_one_over_k(rng):
    T, K = 10_000, 256
    a = rng.integers(0, K, size=(3, T))
    b = rng.integers(0, K, size=(3, T))
    acc = token_accuracy(a, b)
    sigma = math.sqrt((1 / K) * (1 - 1 / K) / T)
    assert np.all(np.abs(acc - 1 / K) < 3 * sigma)


def test_token_accuracy_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        token_accuracy(np.zeros((2, 3), int), np.zeros((2, 4), int))
    with pytest.raises(DimensionError):
        token_accuracy(np.zeros((2, 0), int), np.zeros((2, 0), int))


# -- SNR ----------------------------------------------------------------------------


def test_measured_snr(rng):
    x = noise(rng)
    assert measured_snr(x, x) == math.inf
    n = rng.normal(size=len(x))
    n *= np.sqrt(np.mean(x.samples**2) / np.mean(n**2)) / math.sqrt(10)
    assert measured_snr(x, AudioClip(x.samples + n, 16000)) == pytest.approx(10.0, abs=1e-9)
    lo = measured_snr(x, AudioClip(x.samples + 2 * n, 16000))
    assert lo == pytest.approx(10.0 - 20 * math.log10(2), abs=1e-9)
    with pytest.raises(DimensionError):
        measured_snr(x, AudioClip(x.samples[:-1], 16000))


# -- reports ----------------------------------------------------------------------------


def test_csv_roundtrip(tmp_path):
    rep = EvalReport(["clip", "tag", "lsd", "acc_1"])
    rep.add(clip=0, tag="bandlimited", lsd=1.25, acc_1=0.5)
    rep.add(clip=1, tag="", lsd=0.123456789, acc_1=float("nan"))
    rep.to_csv(tmp_path / "r.csv")
    back = EvalReport.from_csv(tmp_path / "r.csv")
    assert back.columns == rep.columns
    assert back.rows[0] == {"clip": 0, "tag": "bandlimited", "lsd": 1.25, "acc_1": 0.5}
    assert back.rows[1]["lsd"] == pytest.approx(0.123457)
    assert math.isnan(back.rows[1]["acc_1"])


def test_report_validation():
    rep = EvalReport(["lsd", "acc_1"])
    with pytest.raises(DomainError):
        rep.add(lsd=-0.1, acc_1=0.5)
    with pytest.raises(DomainError):
        rep.add(lsd=0.1, acc_1=1.5)
    with pytest.raises(KeyError):
        rep.add(lsd=0.1)


def test_write_csv_formats(tmp_path):
    write_csv(tmp_path / "a.csv", ["a", "b"], [{"a": True, "b": np.float32(0.1)}])
    cols, rows = read_csv(tmp_path / "a.csv")
    assert rows == [{"a": 1, "b": 0.1}]


def test_summarize_by_tag():
    rep = EvalReport(["clip", "tag", "lsd_restored", "snr_db"])
    rep.add(clip=0, tag="bandlimited", lsd_restored=1.0, snr_db=math.inf)
    rep.add(clip=1, tag="bandlimited", lsd_restored=3.0, snr_db=5.0)
    rep.add(clip=2, tag="", lsd_restored=10.0, snr_db=7.0)
    s = summarize(rep, "bandlimited")
    assert s["n"] == 2 and s["lsd_restored"] == 2.0 and s["snr_db"] == 5.0
    assert summarize(rep)["n"] == 3


# -- model-driven helpers ------------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_setup():
    rng = np.random.default_rng(0)
    clips = [AudioClip(rng.normal(size=4000) * 0.1, 16000) for _ in range(2)]
    codec = train_codec(clips, CodecConfig(num_codebooks=2, codebook_size=8, latent_dim=4, window=64,
                                           hop=16, iterations=20, min_frames=16))
    items = []
    for i in range(2):
        clean = AudioClip(rng.uniform(-0.3, 0.3, 320), 16000)
        noisy = AudioClip(clean.samples + rng.normal(scale=0.05, size=320), 16000)
        items.append(HeldOutItem(clean, noisy, encode_clip(clean, codec).tokens, "noisy"))
    return codec, items


def test_bench_decode_counts():
    m = RestorerModel(mini_config())
    rep = bench_decode(m, [0.02, 0.04], ["parallel", "hierarchical"], repeats=1,
                       cfg=DecodeConfig(iterations=3))
    assert len(rep.rows) == 4
    for r in rep.rows:
        assert r["sweeps"] == r["expected_sweeps"]
        assert r["runtime_s"] > 0
    assert rep.where(decoder="hierarchical")[0]["sweeps"] == 3 + 1
    ar = bench_decode(RestorerModel(mini_config(objective="ar")), [0.02], ["ar"], cfg=DecodeConfig())
    assert ar.rows[0]["sweeps"] == 2 * ar.rows[0]["frames"]


def test_evaluate_columns(mini_setup):
    codec, items = mini_setup
    m = RestorerModel(mini_config(), codec)
    rep = evaluate(m, codec, items, DecodeConfig(iterations=2), window_s=0.02)
    assert rep.columns == ["clip", "tag", "lsd_corrupted", "lsd_restored", "snr_db", "acc_1", "acc_2"]
    assert len(rep.rows) == 2
    assert all(r["lsd_restored"] >= 0 and 0 <= r["acc_1"] <= 1 for r in rep.rows)


def test_sweep_guidance_grid(mini_setup):
    codec, items = mini_setup
    m = RestorerModel(mini_config(), codec)
    rep = sweep_guidance(m, codec, items[:1], (0.0, 1.0, 2.0), DecodeConfig(iterations=2), window_s=0.02)
    assert rep.column("w") == [0.0, 1.0, 2.0]
    assert rep.columns == ["w", "lsd", "acc_1", "acc_2"]
