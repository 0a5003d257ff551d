import json

import numpy as np
import pytest

from bpcse import bpc, corpus, dsp


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestMixAtSnr:
    def test_equal_power_at_zero_db_gives_unit_gain(self, rng):
        clean = dsp.Waveform(rng.normal(0, 0.1, 8000))
        noise = dsp.Waveform(clean.samples[::-1].copy())
        mixed = corpus.mix_at_snr(clean, noise, 0.0)
        assert np.allclose(mixed.samples, clean.samples + noise.samples, atol=1e-12)

    def test_large_snr_approaches_clean(self, rng):
        clean = dsp.Waveform(rng.normal(0, 0.1, 4000))
        noise = dsp.Waveform(rng.normal(0, 0.1, 4000))
        mixed = corpus.mix_at_snr(clean, noise, 120.0)
        assert np.max(np.abs(mixed.samples - clean.samples)) < 1e-5

    def test_remeasured_snr_within_hundredth_db(self, rng):
        clean = dsp.Waveform(rng.normal(0, 0.2, 16000))
        noise = dsp.Waveform(rng.normal(0, 0.5, 16000))
        mixed = corpus.mix_at_snr(clean, noise, 5.0)
        assert abs(corpus.measure_snr(clean, mixed) - 5.0) < 0.01

    def test_silent_inputs_rejected(self, rng):
        live = dsp.Waveform(rng.normal(0, 0.1, 1000))
        dead = dsp.Waveform(np.zeros(1000))
        with pytest.raises(ValueError, match="zero power"):
            corpus.mix_at_snr(dead, live, 0.0)
        with pytest.raises(ValueError, match="zero power"):
            corpus.mix_at_snr(live, dead, 0.0)

    def test_short_noise_is_tiled(self, rng):
        clean = dsp.Waveform(rng.normal(0, 0.1, 5000))
        noise = dsp.Waveform(rng.normal(0, 0.1, 1200))
        mixed = corpus.mix_at_snr(clean, noise, 3.0)
        assert len(mixed) == 5000
        assert abs(corpus.measure_snr(clean, mixed) - 3.0) < 0.01

    def test_long_noise_cropped_with_seeded_offset(self, rng):
        clean = dsp.Waveform(rng.normal(0, 0.1, 2000))
        noise = dsp.Waveform(rng.normal(0, 0.1, 9000))
        a = corpus.mix_at_snr(clean, noise, 0.0, np.random.default_rng(7))
        b = corpus.mix_at_snr(clean, noise, 0.0, np.random.default_rng(7))
        assert np.array_equal(a.samples, b.samples)


class TestRir:
    def test_paper_geometry_direct_path_delay(self):
        rir = corpus.generate_rir(corpus.RoomSpec(t60_s=0.4))
        first = np.nonzero(rir.samples)[0][0]
        assert abs(first - round(2.0 / 343.0 * 16000)) <= 1

    def test_length_is_4096(self):
        rir = corpus.generate_rir(corpus.RoomSpec(t60_s=0.3))
        assert len(rir) == 4096
        assert np.all(np.isfinite(rir.samples))

    def test_longer_t60_decays_slower(self):
        short = corpus.generate_rir(corpus.RoomSpec(t60_s=0.3))
        long = corpus.generate_rir(corpus.RoomSpec(t60_s=0.9))
        assert corpus.fit_t60(long) > corpus.fit_t60(short)

    @pytest.mark.parametrize("t60", [0.3, 0.6, 0.9])
    def test_schroeder_fit_within_20_percent(self, t60):
        rir = corpus.generate_rir(corpus.RoomSpec(t60_s=t60))
        assert abs(corpus.fit_t60(rir) - t60) / t60 < 0.20

    def test_unreachable_t60_rejected(self):
        with pytest.raises(ValueError, match="unreachable"):
            corpus.generate_rir(corpus.RoomSpec(t60_s=0.05))

    def test_positions_validated(self):
        with pytest.raises(ValueError, match="inside"):
            corpus.RoomSpec(source_m=(9.0, 1.0, 1.0))


class TestApplyRir:
    def test_unit_impulse_identity(self, rng):
        x = dsp.normalize(dsp.Waveform(rng.normal(0, 0.3, 3000)))
        kernel = np.zeros(64)
        kernel[0] = 1.0
        out = corpus.apply_rir(x, dsp.Waveform(kernel))
        assert np.allclose(out.samples, x.samples, atol=1e-10)

    def test_delayed_impulse_shifts(self, rng):
        samples = rng.normal(0, 0.3, 3000)
        samples[100] = 1.0  # pin the peak early so truncation keeps it
        x = dsp.Waveform(samples)
        kernel = np.zeros(64)
        kernel[5] = 1.0
        out = corpus.apply_rir(x, dsp.Waveform(kernel))
        assert np.allclose(out.samples[5:], x.samples[:-5] / np.max(np.abs(x.samples)), atol=1e-10)
        assert np.allclose(out.samples[:5], 0.0)

    def test_matches_naive_convolution(self, rng):
        x = dsp.Waveform(rng.normal(0, 0.3, 400))
        h = dsp.Waveform(rng.normal(0, 0.1, 50))
        out = corpus.apply_rir(x, h)
        naive = np.zeros(400 + 50 - 1)
        for i, xi in enumerate(x.samples):
            for j, hj in enumerate(h.samples):
                naive[i + j] += xi * hj
        naive = naive[:400]
        naive /= np.max(np.abs(naive))
        assert np.max(np.abs(out.samples - naive)) < 1e-9


class TestToySynth:
    def test_deterministic(self):
        seq = ["sil", "s", "ɑ", "m", "i", "sil"]
        w1, l1 = corpus.synth_toy_utterance(seq, seed=5)
        w2, l2 = corpus.synth_toy_utterance(seq, seed=5)
        assert np.array_equal(w1.samples, w2.samples)
        assert l1 == l2

    def test_duration_bookkeeping(self):
        seq = ["p", "ɑ", "s"]
        w, labels = corpus.synth_toy_utterance(seq, seed=1)
        # every phone lasts 80-240 ms
        assert 3 * 0.08 * 16000 <= len(w) <= 3 * 0.24 * 16000 + 3
        assert len(labels) == dsp.frame_count(len(w))

    def test_vowel_centroid_below_fricative(self):
        w, labels = corpus.synth_toy_utterance(["sil", "ɑ", "s", "sil"], seed=2)
        spec = dsp.magnitude(dsp.stft(w))
        freqs = np.arange(257) * 16000 / 512

        def centroid(phone):
            rows = [i for i, p in enumerate(labels) if p == phone]
            mag = spec.frames[rows].mean(axis=0)
            return np.sum(freqs * mag) / np.sum(mag)

        assert centroid("ɑ") < centroid("s")

    def test_unknown_phone_rejected(self):
        with pytest.raises(ValueError, match="xx"):
            corpus.synth_toy_utterance(["xx"], seed=0)

    def test_labels_cover_only_sequence_phones(self):
        seq = ["sil", "t", "u", "n", "sil"]
        _, labels = corpus.synth_toy_utterance(seq, seed=3)
        assert set(labels) <= set(seq)


class TestManifest:
    def scheme(self):
        return bpc.manner_scheme(bpc.english_inventory())

    def test_empty_corpus_gives_empty_manifest(self, tmp_path):
        (tmp_path / "clean").mkdir()
        m = corpus.build_manifest(tmp_path, self.scheme())
        assert m.entries == []
        assert corpus.Manifest.from_json(m.to_json()).entries == []

    def test_three_pairs_sorted(self, tmp_path):
        corpus.synth_corpus(tmp_path, n_utts=3, seed=0)
        corpus.mix_corpus(tmp_path, [0.0, 5.0], seed=1)
        m = corpus.build_manifest(tmp_path, self.scheme())
        assert [e.utt_id for e in m.entries] == ["utt0000", "utt0001", "utt0002"]
        for e in m.entries:
            assert e.snr_db in (0.0, 5.0)
            assert e.bpc_transcript == bpc.transcript_to_bpc(e.phone_transcript, self.scheme())
            assert (tmp_path / e.clean_path).exists()
            assert (tmp_path / e.distorted_path).exists()

    def test_missing_pair_member_names_utt(self, tmp_path):
        corpus.synth_corpus(tmp_path, n_utts=2, seed=0)
        corpus.mix_corpus(tmp_path, [0.0], seed=1)
        (tmp_path / "distorted" / "utt0001.wav").unlink()
        with pytest.raises(ValueError, match="utt0001"):
            corpus.build_manifest(tmp_path, self.scheme())

    def test_out_of_inventory_phone_named(self, tmp_path):
        corpus.synth_corpus(tmp_path, n_utts=1, seed=0)
        corpus.mix_corpus(tmp_path, [0.0], seed=1)
        (tmp_path / "transcripts" / "utt0000.txt").write_text("sil qq sil", "utf-8")
        with pytest.raises(ValueError, match="qq"):
            corpus.build_manifest(tmp_path, self.scheme())

    def test_json_roundtrip(self, tmp_path):
        corpus.synth_corpus(tmp_path, n_utts=2, seed=0)
        corpus.mix_corpus(tmp_path, [-5.0, 0.0, 5.0], seed=1)
        m = corpus.build_manifest(tmp_path, self.scheme(), seed=9)
        back = corpus.Manifest.from_json(m.to_json(), base_dir=tmp_path)
        assert back.to_json() == m.to_json()
        assert back.scheme_name == "manner"
        assert back.seed == 9

    def test_duplicate_ids_rejected(self):
        e = corpus.ManifestEntry("u", "c.wav", "d.wav", [], [], 0.0, 10)
        with pytest.raises(ValueError, match="duplicate"):
            corpus.Manifest([e, e])


class TestPipeline:
    def test_mix_writes_normalized_distorted_files(self, tmp_path):
        corpus.synth_corpus(tmp_path, n_utts=2, seed=3)
        meta = corpus.mix_corpus(tmp_path, [-5.0], seed=4)
        assert set(meta.values()) == {-5.0}
        for utt in meta:
            w = dsp.read_wav(tmp_path / "distorted" / f"{utt}.wav")
            assert np.max(np.abs(w.samples)) <= 1.0

    def test_reverb_after_mix(self, tmp_path):
        corpus.synth_corpus(tmp_path, n_utts=1, seed=5)
        corpus.mix_corpus(tmp_path, [10.0], seed=6)
        before = dsp.read_wav(tmp_path / "distorted" / "utt0000.wav")
        meta = corpus.reverb_corpus(tmp_path, [0.3], seed=7)
        after = dsp.read_wav(tmp_path / "distorted" / "utt0000.wav")
        assert meta["utt0000"] == 0.3
        assert not np.array_equal(before.samples, after.samples)

    def test_noise_dir_source(self, tmp_path, rng):
        corpus.synth_corpus(tmp_path / "c", n_utts=1, seed=8)
        noise_dir = tmp_path / "noise"
        dsp.write_wav(noise_dir / "n0.wav", corpus.make_noise("pink", 20000, rng))
        meta = corpus.mix_corpus(tmp_path / "c", [0.0], seed=9, noise_dir=noise_dir)
        assert (tmp_path / "c" / "distorted" / "utt0000.wav").exists()
        assert meta["utt0000"] == 0.0

    def test_make_noise_kinds(self, rng):
        for kind in ("white", "pink", "tonal"):
            w = corpus.make_noise(kind, 4000, rng)
            assert len(w) == 4000
            assert np.max(np.abs(w.samples)) <= 1.0
        with pytest.raises(ValueError, match="unknown noise kind"):
            corpus.make_noise("brown", 100, rng)
