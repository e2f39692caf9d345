"""Training regimes, evaluation and the approach comparison table."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import F32, AdamHyper, AdamState, DiffRecord, Node, Param, adam_step, backward
from .data import TRAIN, Corpus
from .errors import DimensionMismatch, TrainingDiverged, UnknownSpeaker
from .model import (
    AdapterParams,
    Basemodel,
    BasemodelConfig,
    EmbeddingBundle,
    OneHotBundle,
    Submodel,
    apply_adapter,
    base_forward,
    check_embedding,
    check_submodel,
    forward_with_embedding,
    forward_with_submodel,
    mixture_hook,
    run_encoder,
    submodel_hook,
)

log = logging.getLogger(__name__)

FER_THRESHOLD = 0.1
MIN_ADAPT_UTTS = 50
NEW_ROW_VARIANCE = 0.1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


class _Sampler:
    """Draws ``batch_size`` (speaker, utterance) pairs uniformly from the pooled train splits."""

    def __init__(self, corpora: Sequence[Corpus], seed: int):
        self.corpora = list(corpora)
        pairs = [(k, u) for k, c in enumerate(self.corpora) for u in c.utterances(TRAIN)]
        if not pairs:
            raise ValueError("no training utterances")
        self.pairs = np.array(pairs, dtype=np.intp)
        self.rng = np.random.default_rng([seed, 0xBA7C])

    def draw(self, batch_size: int):
        pick = self.pairs[self.rng.integers(0, len(self.pairs), batch_size)]
        T = self.corpora[0].frames_per_utt
        xs, ys, who = [], [], []
        for k, u in pick:
            c = self.corpora[k]
            xs.append(c.x[u])
            ys.append(c.y[u])
            who.append(np.full(T, k, dtype=np.intp))
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(who)


def _fit(trainable: Sequence[Param], corpora: Sequence[Corpus], cfg: TrainConfig,
         predict: Callable[[DiffRecord, Node, np.ndarray], Node],
         losses: list[float] | None = None) -> list[float]:
    sampler = _Sampler(corpora, cfg.seed)
    state = AdamState()
    hyper = AdamHyper(lr=cfg.lr)
    history = [] if losses is None else losses
    for step in range(cfg.steps):
        xb, yb, who = sampler.draw(cfg.batch_size)
        rec = DiffRecord(trainable)
        loss = rec.mse(predict(rec, rec.const(xb), who), rec.const(yb))
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        history.append(value)
        adam_step(trainable, backward(rec, loss), state, hyper)
    return history


def _check_speakers(corpora: Sequence[Corpus], min_count: int) -> list[int]:
    ids = [c.speaker_id for c in corpora]
    if len(ids) < min_count:
        raise ValueError(f"need at least {min_count} speakers, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate speaker ids")
    return ids


# --------------------------------------------------------------------------
# regimes
# --------------------------------------------------------------------------

def train_base(corpora: Sequence[Corpus], cfg: TrainConfig = TrainConfig(),
               config: BasemodelConfig | None = None, losses: list[float] | None = None) -> Basemodel:
    """Train every Basemodel weight on (typical) speech; the result is treated as frozen."""
    if not corpora:
        raise ValueError("train_base: need at least one corpus")
    d_in = corpora[0].x.shape[2]
    config = config or BasemodelConfig(d_in=d_in, d_out=d_in, seed=cfg.seed)
    base = Basemodel.init(config)
    _fit(base.parameters(), corpora, cfg, lambda rec, x, who: run_encoder(rec, base, x), losses)
    return base


def finetune_full(base: Basemodel, corpus: Corpus, cfg: TrainConfig = TrainConfig(),
                  losses: list[float] | None = None) -> Basemodel:
    """Copy the Basemodel and train all of its parameters on one speaker."""
    model = base.copy()
    _fit(model.parameters(), [corpus], cfg, lambda rec, x, who: run_encoder(rec, model, x), losses)
    return model


def train_submodel(base: Basemodel, corpus: Corpus, d_b: int, cfg: TrainConfig = TrainConfig(),
                   init: Submodel | None = None, losses: list[float] | None = None) -> Submodel:
    """Train residual adapters for one speaker with the Basemodel frozen.

    ``init`` starts from an existing Submodel (copied) instead of a random one.
    """
    if d_b < 1:
        raise ValueError("train_submodel: d_b must be >= 1")
    c = base.config
    if init is None:
        sub = Submodel.init(corpus.speaker_id, c.d_model, d_b, c.n_layers, seed=cfg.seed)
    else:
        sub = init.with_speaker(corpus.speaker_id).with_alpha(1.0)
    check_submodel(base, sub)
    hook = submodel_hook(sub, alpha=1.0)
    _fit(sub.parameters(), [corpus], cfg, lambda rec, x, who: run_encoder(rec, base, x, hook), losses)
    return sub


def init_onehot(base: Basemodel, speaker_ids: Sequence[int], d_b: int, seed: int = 0) -> OneHotBundle:
    c = base.config
    members = [Submodel.init(s, c.d_model, d_b, c.n_layers, seed=seed * 1_000_003 + s)
               for s in speaker_ids]
    return OneHotBundle(list(speaker_ids), members)


def onehot_predict(base: Basemodel, bundle: OneHotBundle, members: Sequence[int]):
    """Predictor routing each row through the adapters of its own bundle member.

    ``who`` holds per-row positions into ``members`` (bundle member indices).
    """

    def predict(rec: DiffRecord, x: Node, who: np.ndarray) -> Node:
        groups = [(k, np.flatnonzero(who == k)) for k in np.unique(who)]

        def hook(rec, l, h):
            parts = [apply_adapter(rec, bundle.submodels[members[k]].layers[l], rec.take_rows(h, rows), 1.0)
                     for k, rows in groups]
            return rec.stitch(parts, [rows for _, rows in groups], h.value.shape[0])

        return run_encoder(rec, base, x, hook)

    return predict


def train_onehot(base: Basemodel, corpora: Sequence[Corpus], d_b: int, cfg: TrainConfig = TrainConfig(),
                 losses: list[float] | None = None) -> OneHotBundle:
    """Train N per-speaker Submodels in one job; each sample only touches its own member."""
    ids = _check_speakers(corpora, 2)
    if d_b < 1:
        raise ValueError("train_onehot: d_b must be >= 1")
    bundle = init_onehot(base, ids, d_b, cfg.seed)
    members = [bundle.index[s] for s in ids]
    _fit(bundle.parameters(), corpora, cfg, onehot_predict(base, bundle, members), losses)
    return bundle


def split_bundle(bundle: OneHotBundle) -> list[Submodel]:
    """Standalone copies of each member; the speaker index map is dropped."""
    return [sub.copy() for sub in bundle.submodels]


def train_pooled(base: Basemodel, corpora: Sequence[Corpus], d_b: int = 8, cfg: TrainConfig = TrainConfig(),
                 d_b_pooled: int | None = None, speaker_id: int = 0,
                 losses: list[float] | None = None) -> Submodel:
    """One shared Submodel trained on all speakers' data, ignoring identity."""
    _check_speakers(corpora, 2)
    d_b_pooled = 2 * d_b if d_b_pooled is None else d_b_pooled
    if d_b_pooled < 1:
        raise ValueError("train_pooled: d_b_pooled must be >= 1")
    c = base.config
    sub = Submodel.init(speaker_id, c.d_model, d_b_pooled, c.n_layers, seed=cfg.seed)
    hook = submodel_hook(sub, alpha=1.0)
    _fit(sub.parameters(), corpora, cfg, lambda rec, x, who: run_encoder(rec, base, x, hook), losses)
    return sub


def init_embedding(base: Basemodel, speaker_ids: Sequence[int], n_banks: int, d_b: int,
                   seed: int = 0) -> EmbeddingBundle:
    c = base.config
    rng = np.random.default_rng([seed, 0xE3B])
    banks = [[AdapterParams.init(c.d_model, d_b, rng, prefix=f"bank{l}.{m}.") for m in range(n_banks)]
             for l in range(c.n_layers)]
    emb = rng.normal(0.0, math.sqrt(NEW_ROW_VARIANCE), (len(speaker_ids), c.n_layers * n_banks))
    return EmbeddingBundle(banks, Param("embedding", emb), list(speaker_ids))


def train_embedding(base: Basemodel, corpora: Sequence[Corpus], n_banks: int = 8, d_b: int = 8,
                    cfg: TrainConfig = TrainConfig(), losses: list[float] | None = None) -> EmbeddingBundle:
    """Jointly train M shared adapter banks per layer and a per-speaker mixing embedding."""
    ids = _check_speakers(corpora, 2)
    if n_banks < 1:
        raise ValueError("train_embedding: need at least one bank")
    eb = init_embedding(base, ids, n_banks, d_b, cfg.seed)
    rows = np.array([eb.index[s] for s in ids], dtype=np.intp)

    def predict(rec, x, who):
        weights = rec.take_rows(rec.param(eb.embedding), rows[who])
        return run_encoder(rec, base, x, mixture_hook(eb, weights))

    _fit(eb.bank_params() + [eb.embedding], corpora, cfg, predict, losses)
    return eb


class AdaptMode(enum.Enum):
    EMB_ONLY = "emb-only"
    EMB_AND_BANKS = "emb-and-banks"


@dataclass
class SpeakerEmbedding:
    """A single speaker's mixing row over a set of banks; usable as an evaluation variant."""

    bundle: EmbeddingBundle
    e_row: np.ndarray  # (L, M)


def new_embedding_row(n_layers: int, n_banks: int, rng: np.random.Generator) -> np.ndarray:
    """A fresh (1, L*M) mixing row drawn from N(0, 0.1)."""
    return rng.normal(0.0, math.sqrt(NEW_ROW_VARIANCE), (1, n_layers * n_banks))


def adapt_new_speaker(base: Basemodel, eb: EmbeddingBundle, corpus: Corpus,
                      cfg: TrainConfig = TrainConfig(), mode: AdaptMode = AdaptMode.EMB_AND_BANKS,
                      losses: list[float] | None = None) -> tuple[np.ndarray, list[list[AdapterParams]] | None]:
    """Fit a fresh (L x M) mixing row for an unseen speaker.

    The trained embedding matrix is discarded; the new row starts from
    N(0, 0.1).  In EMB_AND_BANKS mode the banks are copied and fine-tuned too.
    Returns ``(e_row, banks)`` with ``banks`` None in EMB_ONLY mode.
    """
    n_train = len(corpus.utterances(TRAIN))
    if n_train < MIN_ADAPT_UTTS:
        raise ValueError(f"adapt_new_speaker: {n_train} training utterances, need >= {MIN_ADAPT_UTTS}")
    check_embedding(base, eb)
    mode = AdaptMode(mode)
    L, M = eb.n_layers, eb.n_banks
    rng = np.random.default_rng([cfg.seed, corpus.speaker_id, 0xAD])
    row = Param("e_row", new_embedding_row(L, M, rng))
    if mode is AdaptMode.EMB_AND_BANKS:
        banks = [[a.copy(alpha=1.0) for a in layer] for layer in eb.banks]
    else:
        banks = eb.banks
    work = EmbeddingBundle(banks, row, [corpus.speaker_id], eb.alpha)
    trainable = [row] + (work.bank_params() if mode is AdaptMode.EMB_AND_BANKS else [])

    def predict(rec, x, who):
        return run_encoder(rec, base, x, mixture_hook(work, rec.param(row)))

    _fit(trainable, [corpus], cfg, predict, losses)
    e_row = row.value.reshape(L, M).copy()
    return e_row, (banks if mode is AdaptMode.EMB_AND_BANKS else None)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def predict(base: Basemodel, variant, speaker_id: int, x: np.ndarray) -> np.ndarray:
    """Dispatch over the variant kinds the harness compares.

    ``variant`` may be None (Basemodel), a Submodel (shared by every speaker),
    a Basemodel (fully fine-tuned), a OneHotBundle, an EmbeddingBundle, a
    SpeakerEmbedding, or a mapping from speaker id to any of those.
    """
    if variant is None:
        return base_forward(base, x)
    if isinstance(variant, Mapping):
        try:
            inner = variant[speaker_id]
        except KeyError:
            raise UnknownSpeaker(f"no model for speaker {speaker_id}") from None
        return predict(base, inner, speaker_id, x)
    if isinstance(variant, Submodel):
        return forward_with_submodel(base, variant, x)
    if isinstance(variant, Basemodel):
        return base_forward(variant, x)
    if isinstance(variant, OneHotBundle):
        return forward_with_submodel(base, variant.member(speaker_id), x)
    if isinstance(variant, EmbeddingBundle):
        return forward_with_embedding(base, variant, variant.row(speaker_id), x)
    if isinstance(variant, SpeakerEmbedding):
        return forward_with_embedding(base, variant.bundle, variant.e_row, x)
    raise TypeError(f"unsupported variant type {type(variant).__name__}")


@dataclass(frozen=True)
class SpeakerScore:
    speaker_id: int
    mse: float
    fer: float
    n_frames: int


@dataclass
class EvalReport:
    approach: str
    split: str
    rows: list[SpeakerScore]
    test_set: tuple = ()

    @property
    def mses(self) -> list[float]:
        return [r.mse for r in self.rows]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.mses)

    @property
    def median(self) -> float:
        return statistics.median(self.mses)

    @property
    def stdev(self) -> float:
        return statistics.stdev(self.mses) if len(self.rows) > 1 else 0.0

    @property
    def fer_mean(self) -> float:
        return statistics.fmean(r.fer for r in self.rows)

    def by_speaker(self) -> dict[int, float]:
        return {r.speaker_id: r.mse for r in self.rows}

    def to_records(self) -> list[dict]:
        return [{"approach": self.approach, "split": self.split, "speaker_id": r.speaker_id,
                 "mse": r.mse, "fer": r.fer, "n_frames": r.n_frames} for r in self.rows]


def _test_set_key(corpus: Corpus, split: str) -> tuple:
    idx = corpus.utterances(split)
    x, _ = corpus.frames(split)
    return corpus.speaker_id, len(idx), hashlib.sha256(x.tobytes()).hexdigest()[:16]


def evaluate(base: Basemodel, variant, corpora: Sequence[Corpus], split: str = "dev",
             approach: str = "") -> EvalReport:
    rows, key = [], []
    for c in corpora:
        x, y = c.frames(split)
        if len(x) == 0:
            raise ValueError(f"speaker {c.speaker_id} has an empty {split} split")
        out = predict(base, variant, c.speaker_id, x).astype(np.float64)
        per_frame = np.mean((out - y.astype(np.float64)) ** 2, axis=1)
        rows.append(SpeakerScore(c.speaker_id, float(per_frame.mean()),
                                 float(np.mean(per_frame > FER_THRESHOLD)), len(x)))
        key.append(_test_set_key(c, split))
    return EvalReport(approach, split, rows, tuple(key))


@dataclass
class ComparisonTable:
    reports: list[EvalReport]
    orderings: list[tuple[str, bool]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["approach\tmean_mse\tmedian_mse\tstdev_mse\tmean_fer\tn_speakers"]
        for r in self.reports:
            lines.append(f"{r.approach}\t{r.mean:.6f}\t{r.median:.6f}\t{r.stdev:.6f}"
                         f"\t{r.fer_mean:.4f}\t{len(r.rows)}")
        for claim, ok in self.orderings:
            lines.append(f"# {claim}\t{'PASS' if ok else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        recs = [{"approach": r.approach, "split": r.split, "mean": r.mean, "median": r.median,
                 "stdev": r.stdev, "fer_mean": r.fer_mean, "n_speakers": len(r.rows)}
                for r in self.reports]
        recs += [{"ordering": claim, "holds": ok} for claim, ok in self.orderings]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)

    def mean(self, approach: str) -> float:
        for r in self.reports:
            if r.approach == approach:
                return r.mean
        raise KeyError(approach)


# (left, relation, right, relative slack); "<" demands left to sit at least slack below right,
# "<=" allows left up to right * (1 + slack), "~" is two-sided parity.
ORDERING_CLAIMS = [
    ("full-finetune", "<=", "submodel", 0.10),
    ("submodel", "~", "one-hot", 0.10),
    ("one-hot", "<", "real-embedding", 0.05),
    ("real-embedding", "<", "pooled", 0.05),
    ("pooled", "<", "basemodel", 0.05),
]


def check_claim(left: float, relation: str, right: float, slack: float) -> bool:
    if relation == "<=":
        return left <= right * (1 + slack)
    if relation == "~":
        return abs(left - right) <= slack * right
    if relation == "<":
        return left <= right * (1 - slack)
    raise ValueError(relation)


def comparison_report(reports: Sequence[EvalReport], claims=ORDERING_CLAIMS) -> ComparisonTable:
    """Per-approach summary plus ordering checks; all reports must cover identical test sets."""
    reports = list(reports)
    if not reports:
        raise ValueError("comparison_report: no reports")
    key = reports[0].test_set
    for r in reports[1:]:
        if r.test_set != key or r.split != reports[0].split:
            raise DimensionMismatch(f"approach {r.approach!r} was evaluated on a different test set")
    means = {r.approach: r.mean for r in reports}
    orderings = []
    for left, rel, right, slack in claims:
        if left in means and right in means:
            orderings.append((f"{left} {rel} {right} ({slack:.0%})",
                              check_claim(means[left], rel, means[right], slack)))
    return ComparisonTable(reports, orderings)
