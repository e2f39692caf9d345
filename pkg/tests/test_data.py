import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from submodels.data import (
    DEV,
    TEST,
    TRAIN,
    corpus_bytes,
    distort,
    gen_catalog,
    gen_corpus,
    gen_speaker,
    load_corpus,
    make_population,
    profile_from_record,
    read_manifest,
    save_corpus,
    split_counts,
    typical_speakers,
    write_manifest,
)
from submodels.errors import FormatError


@pytest.fixture(scope="module")
def catalog():
    return gen_catalog(4, 16, seed=0)


class TestCatalog:
    def test_deterministic(self):
        assert gen_catalog(3, 8, 5).matrices.tobytes() == gen_catalog(3, 8, 5).matrices.tobytes()

    def test_seed_matters(self):
        assert not np.array_equal(gen_catalog(3, 8, 5).matrices, gen_catalog(3, 8, 6).matrices)

    def test_frobenius_norm_near_sqrt_d(self):
        cat = gen_catalog(4, 32, seed=1)
        norms = np.linalg.norm(cat.matrices, axis=(1, 2))
        assert cat.matrices.shape == (4, 32, 32)
        np.testing.assert_allclose(norms, np.sqrt(32), rtol=0.2)

    def test_needs_two_etiologies(self):
        with pytest.raises(ValueError):
            gen_catalog(1, 8, 0)


class TestSpeaker:
    def test_typical_is_identity(self, catalog):
        s = gen_speaker(catalog, 2, "typical", 7)
        assert np.array_equal(s.distortion(), np.eye(16))

    def test_distortion_formula(self, catalog):
        s = gen_speaker(catalog, 1, "moderate", 7)
        expected = np.eye(16) + 0.3 * (catalog.matrices[1] + 0.3 * s.idiosyncrasy)
        np.testing.assert_array_equal(s.distortion(), expected)

    def test_severity_is_linear(self, catalog):
        mild = gen_speaker(catalog, 0, "mild", 3).distortion() - np.eye(16)
        severe = gen_speaker(catalog, 0, "severe", 3).distortion() - np.eye(16)
        ratio = np.linalg.norm(mild) / np.linalg.norm(severe)
        assert ratio == pytest.approx(0.1 / 0.6, rel=1e-12)

    def test_bad_etiology(self, catalog):
        with pytest.raises(ValueError):
            gen_speaker(catalog, 4, "mild", 0)

    def test_same_etiology_closer_on_average(self, catalog):
        same, diff = [], []
        for k in range(20):
            s = gen_speaker(catalog, 0, "moderate", 1000 + 3 * k).distortion()
            t = gen_speaker(catalog, 0, "moderate", 1001 + 3 * k).distortion()
            u = gen_speaker(catalog, 1 + k % 3, "moderate", 1002 + 3 * k).distortion()
            same.append(np.linalg.norm(s - t))
            diff.append(np.linalg.norm(s - u))
        assert np.mean(same) < np.mean(diff)

    def test_severity_names(self, catalog):
        assert gen_speaker(catalog, 0, 0.6, 1).severity_name == "severe"
        assert gen_speaker(catalog, 0, 0.45, 1).severity_name == "0.45"


class TestDistort:
    def test_identity_without_noise(self, catalog):
        s = gen_speaker(catalog, 0, "typical", 1, noise=0.0)
        y = np.random.default_rng(0).standard_normal((5, 16))
        np.testing.assert_array_equal(distort(s, y, np.random.default_rng(1)), y)

    def test_linear_without_noise(self, catalog):
        s = gen_speaker(catalog, 2, "severe", 1, noise=0.0)
        y = np.random.default_rng(0).standard_normal(16)
        rng = np.random.default_rng(1)
        np.testing.assert_allclose(distort(s, 2 * y, rng), 2 * distort(s, y, rng), atol=1e-12)

    def test_noise_magnitude(self, catalog):
        s = gen_speaker(catalog, 2, "severe", 1)
        y = np.random.default_rng(0).standard_normal((4000, 16))
        resid = distort(s, y, np.random.default_rng(1)) - y @ s.distortion().T
        assert resid.std() == pytest.approx(0.05, rel=0.05)

    @settings(max_examples=30)
    @given(st.integers(0, 3), st.sampled_from(["mild", "moderate", "severe"]), st.integers(0, 10_000))
    def test_norm_growth_bounded(self, etiology, severity, seed):
        cat = gen_catalog(4, 8, 0)
        s = gen_speaker(cat, etiology, severity, seed, noise=0.0)
        y = np.random.default_rng(seed).standard_normal(8)
        r = np.linalg.norm(s.etiology_matrix + s.kappa * s.idiosyncrasy, 2)
        bound = (1 + s.severity * r) * np.linalg.norm(y)
        assert np.linalg.norm(distort(s, y, np.random.default_rng(0))) <= bound * (1 + 1e-12)


class TestCorpus:
    def test_default_split(self, catalog):
        c = gen_corpus(gen_speaker(catalog, 0, "mild", 1))
        assert [len(c.utterances(k)) for k in (TRAIN, DEV, TEST)] == [240, 30, 30]
        assert c.x.shape == (300, 16, 16) and c.x.dtype == np.float32

    @given(st.integers(10, 2000))
    def test_split_counts_partition(self, n):
        tr, dv, te = split_counts(n)
        assert tr + dv + te == n and tr == int(0.8 * n + 1e-9) and dv == n // 10

    def test_splits_disjoint(self, catalog):
        c = gen_corpus(gen_speaker(catalog, 0, "mild", 1), n_utts=57)
        sets = [set(c.utterances(k)) for k in ("train", "dev", "test")]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert set.union(*sets) == set(range(57))

    def test_typical_noiseless_x_equals_y(self, catalog):
        c = gen_corpus(gen_speaker(catalog, 0, "typical", 1, noise=0.0), n_utts=20)
        assert c.x.tobytes() == c.y.tobytes()

    def test_deterministic_bytes(self, catalog):
        s = gen_speaker(catalog, 1, "severe", 2)
        assert corpus_bytes(gen_corpus(s, 40, seed=3)) == corpus_bytes(gen_corpus(s, 40, seed=3))

    def test_clean_frames_standard_normal(self, catalog):
        c = gen_corpus(gen_speaker(catalog, 1, "severe", 2))
        assert abs(c.y.mean()) < 0.02 and c.y.std() == pytest.approx(1.0, abs=0.02)

    def test_too_small(self, catalog):
        with pytest.raises(ValueError):
            gen_corpus(gen_speaker(catalog, 0, "mild", 1), n_utts=9)

    def test_explicit_counts(self, catalog):
        c = gen_corpus(gen_speaker(catalog, 0, "mild", 1), n_utts=250, counts=(50, 0, 200))
        assert [len(c.utterances(k)) for k in (TRAIN, DEV, TEST)] == [50, 0, 200]
        with pytest.raises(ValueError):
            gen_corpus(gen_speaker(catalog, 0, "mild", 1), n_utts=250, counts=(50, 0, 100))

    def test_frames_flatten_utterances(self, catalog):
        c = gen_corpus(gen_speaker(catalog, 0, "mild", 1), n_utts=20, T=4)
        x, y = c.frames("dev")
        assert x.shape == (2 * 4, 16)
        np.testing.assert_array_equal(x[:4], c.x[c.utterances(DEV)[0]])


class TestCorpusFile:
    def test_round_trip(self, tmp_path, catalog):
        s = gen_speaker(catalog, 3, "moderate", 4, speaker_id=12)
        c = gen_corpus(s, 30, T=5)
        save_corpus(c, tmp_path / "c.corp")
        back = load_corpus(tmp_path / "c.corp", s)
        assert corpus_bytes(back) == corpus_bytes(c)

    def test_bad_magic(self, tmp_path, catalog):
        s = gen_speaker(catalog, 3, "moderate", 4)
        raw = bytearray(corpus_bytes(gen_corpus(s, 10, T=2)))
        raw[:4] = b"XXXX"
        (tmp_path / "c.corp").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_corpus(tmp_path / "c.corp", s)
        assert err.value.code == "BAD_MAGIC"

    def test_truncated(self, tmp_path, catalog):
        s = gen_speaker(catalog, 3, "moderate", 4)
        (tmp_path / "c.corp").write_bytes(corpus_bytes(gen_corpus(s, 10, T=2))[:-3])
        with pytest.raises(FormatError) as err:
            load_corpus(tmp_path / "c.corp", s)
        assert err.value.code == "TRUNCATED"


class TestPopulation:
    def test_default_shape(self):
        pop = make_population()
        assert len(pop.speakers) == 16
        assert [s.etiology for s in pop.speakers[:5]] == [0, 1, 2, 3, 0]
        assert {s.severity for s in pop.speakers} == {0.1, 0.3, 0.6}

    def test_deterministic(self):
        a, b = make_population(seed=3), make_population(seed=3)
        assert all(np.array_equal(x.distortion(), y.distortion()) for x, y in zip(a.speakers, b.speakers))

    def test_typical_speakers(self, catalog):
        ts = typical_speakers(catalog, n=3)
        assert [t.speaker_id for t in ts] == [1000, 1001, 1002]
        assert all(np.array_equal(t.distortion(), np.eye(16)) for t in ts)

    def test_manifest_rebuilds_profiles(self, tmp_path):
        pop = make_population(n_speakers=5, n_etiologies=3, d_in=6, seed=2)
        write_manifest(tmp_path / "m.jsonl", pop.speakers, {"group": "atypical"})
        recs = read_manifest(tmp_path / "m.jsonl")
        assert recs[0]["group"] == "atypical"
        for rec, s in zip(recs, pop.speakers):
            back = profile_from_record(rec, 3)
            assert back.speaker_id == s.speaker_id
            np.testing.assert_array_equal(back.distortion(), s.distortion())
