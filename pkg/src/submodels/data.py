"""Synthetic speaker corpora: per-speaker linear distortions of clean frames.

A speaker's distortion is ``A_s = I + severity * (R_e + kappa * P_s)`` where
``R_e`` is shared by everyone with etiology ``e`` and ``P_s`` is the speaker's
own idiosyncrasy.  Clean frames ``y ~ N(0, I)``; observed ``x = A_s y + noise``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

SEVERITY_LEVELS = {"typical": 0.0, "mild": 0.1, "moderate": 0.3, "severe": 0.6}
KAPPA = 0.3
NOISE_STD = 0.05
TRAIN, DEV, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "dev": DEV, "test": TEST}


@dataclass
class EtiologyCatalog:
    matrices: np.ndarray  # (E, d_in, d_in), float64
    names: list[str]
    seed: int

    @property
    def d_in(self) -> int:
        return self.matrices.shape[1]

    def __len__(self) -> int:
        return self.matrices.shape[0]


def gen_catalog(n_etiologies: int, d_in: int, seed: int) -> EtiologyCatalog:
    if n_etiologies < 2:
        raise ValueError("gen_catalog: need at least two etiologies")
    if d_in < 1:
        raise ValueError("gen_catalog: d_in must be >= 1")
    rng = np.random.default_rng([seed, 0xE71])
    mats = rng.standard_normal((n_etiologies, d_in, d_in)) / np.sqrt(d_in)
    return EtiologyCatalog(mats, [f"etiology-{i}" for i in range(n_etiologies)], seed)


@dataclass
class SpeakerProfile:
    speaker_id: int
    etiology: int
    severity: float
    etiology_matrix: np.ndarray
    idiosyncrasy: np.ndarray
    seed: int
    noise: float = NOISE_STD
    kappa: float = KAPPA
    catalog_seed: int | None = None
    etiology_name: str = ""

    @property
    def d_in(self) -> int:
        return self.idiosyncrasy.shape[0]

    @property
    def severity_name(self) -> str:
        for name, value in SEVERITY_LEVELS.items():
            if value == self.severity:
                return name
        return f"{self.severity:g}"

    def distortion(self) -> np.ndarray:
        d = self.d_in
        return np.eye(d) + self.severity * (self.etiology_matrix + self.kappa * self.idiosyncrasy)

    def to_record(self) -> dict:
        return {"speaker_id": self.speaker_id, "etiology": self.etiology,
                "etiology_name": self.etiology_name, "severity": self.severity,
                "severity_name": self.severity_name, "kappa": self.kappa, "noise": self.noise,
                "seed": self.seed, "catalog_seed": self.catalog_seed, "d_in": self.d_in}


def gen_speaker(catalog: EtiologyCatalog, etiology: int, severity: float | str, speaker_seed: int,
                speaker_id: int | None = None, noise: float = NOISE_STD,
                kappa: float = KAPPA) -> SpeakerProfile:
    if not 0 <= etiology < len(catalog):
        raise ValueError(f"gen_speaker: etiology {etiology} outside 0..{len(catalog) - 1}")
    if isinstance(severity, str):
        severity = SEVERITY_LEVELS[severity]
    rng = np.random.default_rng([speaker_seed, 0x5EA])
    d = catalog.d_in
    idio = rng.standard_normal((d, d)) / np.sqrt(d)
    return SpeakerProfile(
        speaker_id=speaker_seed if speaker_id is None else speaker_id,
        etiology=etiology, severity=float(severity),
        etiology_matrix=catalog.matrices[etiology], idiosyncrasy=idio,
        seed=speaker_seed, noise=noise, kappa=kappa, catalog_seed=catalog.seed,
        etiology_name=catalog.names[etiology])


def distort(speaker: SpeakerProfile, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``x = A_s y + noise * eta`` for frames along the last axis."""
    y = np.asarray(y, dtype=np.float64)
    x = y @ speaker.distortion().T
    if speaker.noise:
        x = x + speaker.noise * rng.standard_normal(y.shape)
    return x


@dataclass
class Corpus:
    speaker: SpeakerProfile
    x: np.ndarray  # (n_utts, T, d_in) float32
    y: np.ndarray
    split: np.ndarray  # (n_utts,) uint8 of TRAIN/DEV/TEST
    seed: int = 0

    @property
    def speaker_id(self) -> int:
        return self.speaker.speaker_id

    @property
    def n_utts(self) -> int:
        return self.x.shape[0]

    @property
    def frames_per_utt(self) -> int:
        return self.x.shape[1]

    def utterances(self, split: str | int) -> np.ndarray:
        code = SPLIT_NAMES[split] if isinstance(split, str) else split
        return np.flatnonzero(self.split == code)

    def frames(self, split: str | int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.utterances(split)
        d = self.x.shape[2]
        return self.x[idx].reshape(-1, d), self.y[idx].reshape(-1, d)


def split_counts(n_utts: int) -> tuple[int, int, int]:
    n_train = int(n_utts * 8 // 10)
    n_dev = int(n_utts // 10)
    return n_train, n_dev, n_utts - n_train - n_dev


def gen_corpus(speaker: SpeakerProfile, n_utts: int = 300, T: int = 16, seed: int = 0,
               counts: tuple[int, int, int] | None = None) -> Corpus:
    """Generate ``n_utts`` utterances of ``T`` frames, split 80/10/10 unless ``counts`` given."""
    if counts is None:
        if n_utts < 10:
            raise ValueError(f"gen_corpus: n_utts={n_utts} is too small to split 80/10/10")
        counts = split_counts(n_utts)
    elif sum(counts) != n_utts or min(counts) < 0:
        raise ValueError(f"gen_corpus: split counts {counts} do not sum to {n_utts}")
    if T < 1:
        raise ValueError("gen_corpus: T must be >= 1")
    rng = np.random.default_rng([seed, speaker.seed, 0xC0])
    y = rng.standard_normal((n_utts, T, speaker.d_in))
    x = distort(speaker, y, rng)
    order = rng.permutation(n_utts)
    split = np.empty(n_utts, dtype=np.uint8)
    n_train, n_dev, _ = counts
    split[order[:n_train]] = TRAIN
    split[order[n_train:n_train + n_dev]] = DEV
    split[order[n_train + n_dev:]] = TEST
    return Corpus(speaker, x.astype(np.float32), y.astype(np.float32), split, seed)


@dataclass
class Population:
    catalog: EtiologyCatalog
    speakers: list[SpeakerProfile] = field(default_factory=list)


def make_population(n_speakers: int = 16, n_etiologies: int = 4, d_in: int = 16, seed: int = 0,
                    severities: Sequence[str] = ("mild", "moderate", "severe"),
                    first_id: int = 1, kappa: float = KAPPA, noise: float = NOISE_STD,
                    catalog: EtiologyCatalog | None = None) -> Population:
    """Speakers cycle through etiologies, severities rotate within each etiology."""
    catalog = catalog or gen_catalog(n_etiologies, d_in, seed)
    E = len(catalog)
    speakers = []
    for i in range(n_speakers):
        sid = first_id + i
        sev = severities[(i // E) % len(severities)]
        speakers.append(gen_speaker(catalog, i % E, sev, speaker_seed=seed * 100_003 + sid,
                                    speaker_id=sid, noise=noise, kappa=kappa))
    return Population(catalog, speakers)


def typical_speakers(catalog: EtiologyCatalog, n: int = 8, seed: int = 0, first_id: int = 1000,
                     noise: float = NOISE_STD) -> list[SpeakerProfile]:
    return [gen_speaker(catalog, 0, "typical", speaker_seed=seed * 100_003 + first_id + i,
                        speaker_id=first_id + i, noise=noise) for i in range(n)]


# --------------------------------------------------------------------------
# corpus binary format
# --------------------------------------------------------------------------

_CORPUS = struct.Struct("<4sHHQIII4x")  # 32 bytes
CORPUS_MAGIC = b"CORP"


def corpus_bytes(corpus: Corpus) -> bytes:
    n, T, d = corpus.x.shape
    head = _CORPUS.pack(CORPUS_MAGIC, 1, 0, corpus.speaker_id, n, T, d)
    return b"".join([head, corpus.split.astype(np.uint8).tobytes(),
                     corpus.x.astype("<f4").tobytes(), corpus.y.astype("<f4").tobytes()])


def save_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(corpus_bytes(corpus))
    os.replace(tmp, path)


def load_corpus(path: str | os.PathLike, speaker: SpeakerProfile) -> Corpus:
    raw = Path(path).read_bytes()
    if len(raw) < _CORPUS.size:
        raise FormatError(f"{path}: shorter than corpus header", "TRUNCATED")
    magic, version, _flags, sid, n, T, d = _CORPUS.unpack_from(raw)
    if magic != CORPUS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", "BAD_MAGIC")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}", "BAD_VERSION")
    if sid != speaker.speaker_id:
        raise ValueError(f"{path}: corpus for speaker {sid}, profile is {speaker.speaker_id}")
    need = _CORPUS.size + n + 2 * 4 * n * T * d
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}", "TRUNCATED")
    off = _CORPUS.size
    split = np.frombuffer(raw, np.uint8, n, off).copy()
    off += n
    x = np.frombuffer(raw, "<f4", n * T * d, off).astype(np.float32).reshape(n, T, d)
    off += 4 * n * T * d
    y = np.frombuffer(raw, "<f4", n * T * d, off).astype(np.float32).reshape(n, T, d)
    return Corpus(speaker, x, y, split)


def write_manifest(path: str | os.PathLike, profiles: Iterable[SpeakerProfile], extra: dict | None = None) -> None:
    lines = []
    for p in profiles:
        rec = p.to_record()
        if extra:
            rec.update(extra)
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def profile_from_record(rec: dict, n_etiologies: int) -> SpeakerProfile:
    """Rebuild a profile (including its matrices) from a manifest record."""
    catalog = gen_catalog(n_etiologies, rec["d_in"], rec["catalog_seed"])
    return gen_speaker(catalog, rec["etiology"], rec["severity"], rec["seed"],
                       speaker_id=rec["speaker_id"], noise=rec["noise"], kappa=rec["kappa"])
