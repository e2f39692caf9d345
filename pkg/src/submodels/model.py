"""Toy Basemodel, residual-adapter Submodels and their bundled parameterizations.

Every forward pass in the package goes through :func:`run_encoder` with a
``DiffRecord``; inference simply uses a disabled record, so training and
serving share one arithmetic path and bit-exactness claims hold by
construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import F32, DiffRecord, Node, Param
from .errors import DimensionMismatch, UnknownSpeaker

FORMAT_VERSION = 1
HEADER_BYTES = 32
LN_EPS = 1e-5
ADAPTER_INIT_STD = 0.01


@dataclass(frozen=True)
class BasemodelConfig:
    d_in: int = 16
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 4
    d_out: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "d_model", "d_ff", "n_layers", "d_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"BasemodelConfig.{name} must be >= 1")


class Basemodel:
    """Input projection, ``n_layers`` pre-LN feed-forward residual blocks, output head."""

    def __init__(self, config: BasemodelConfig, params: dict[str, Param]):
        self.config = config
        self.params = params

    @staticmethod
    def param_shapes(config: BasemodelConfig) -> dict[str, tuple[int, ...]]:
        c = config
        shapes = {"in.w": (c.d_in, c.d_model), "in.b": (c.d_model,)}
        for l in range(c.n_layers):
            shapes[f"block{l}.ln_gamma"] = (c.d_model,)
            shapes[f"block{l}.ln_beta"] = (c.d_model,)
            shapes[f"block{l}.w1"] = (c.d_model, c.d_ff)
            shapes[f"block{l}.b1"] = (c.d_ff,)
            shapes[f"block{l}.w2"] = (c.d_ff, c.d_model)
            shapes[f"block{l}.b2"] = (c.d_model,)
        shapes["out.w"] = (c.d_model, c.d_out)
        shapes["out.b"] = (c.d_out,)
        return shapes

    @classmethod
    def init(cls, config: BasemodelConfig) -> Basemodel:
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in cls.param_shapes(config).items():
            if name.endswith("ln_gamma"):
                value = np.ones(shape)
            elif len(shape) == 2:
                value = rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                value = np.zeros(shape)
            params[name] = Param(name, value)
        return cls(config, params)

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def copy(self) -> Basemodel:
        return Basemodel(self.config, {k: p.copy() for k, p in self.params.items()})

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# adapters
# --------------------------------------------------------------------------

@dataclass
class AdapterParams:
    ln_gamma: Param
    ln_beta: Param
    w_down: Param
    b_down: Param
    w_up: Param
    b_up: Param
    alpha: float = 1.0

    FIELDS = ("ln_gamma", "ln_beta", "w_down", "b_down", "w_up", "b_up")

    def __post_init__(self):
        if self.alpha not in (0.0, 1.0):
            raise ValueError(f"alpha is a 0/1 switch, got {self.alpha!r}")

    @classmethod
    def init(cls, d_model: int, d_b: int, rng: np.random.Generator, prefix: str = "",
             std: float = ADAPTER_INIT_STD, zero_up: bool = False) -> AdapterParams:
        if d_model < 1 or d_b < 1:
            raise ValueError("adapter dimensions must be >= 1")
        w_up = np.zeros((d_b, d_model)) if zero_up else rng.normal(0.0, std, (d_b, d_model))
        b_up = np.zeros(d_model) if zero_up else rng.normal(0.0, std, d_model)
        return cls(
            Param(prefix + "ln_gamma", np.ones(d_model)),
            Param(prefix + "ln_beta", np.zeros(d_model)),
            Param(prefix + "w_down", rng.normal(0.0, std, (d_model, d_b))),
            Param(prefix + "b_down", rng.normal(0.0, std, d_b)),
            Param(prefix + "w_up", w_up),
            Param(prefix + "b_up", b_up),
        )

    @property
    def d_model(self) -> int:
        return self.w_down.value.shape[0]

    @property
    def d_b(self) -> int:
        return self.w_down.value.shape[1]

    def params(self) -> list[Param]:
        return [getattr(self, f) for f in self.FIELDS]

    def copy(self, alpha: float | None = None) -> AdapterParams:
        return AdapterParams(*(p.copy() for p in self.params()),
                             alpha=self.alpha if alpha is None else alpha)

    def check(self, d_model: int, d_b: int) -> None:
        expected = {"ln_gamma": (d_model,), "ln_beta": (d_model,), "w_down": (d_model, d_b),
                    "b_down": (d_b,), "w_up": (d_b, d_model), "b_up": (d_model,)}
        for name, shape in expected.items():
            got = getattr(self, name).value.shape
            if got != shape:
                raise DimensionMismatch(f"adapter {name}: expected {shape}, got {got}")

    def to_transport(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """The four per-layer tensors: LN stats, down (w‖b), up (w‖b), residual factor."""
        return (
            np.stack([self.ln_gamma.value, self.ln_beta.value]),
            np.vstack([self.w_down.value, self.b_down.value[None, :]]),
            np.vstack([self.w_up.value, self.b_up.value[None, :]]),
            np.array([self.alpha], dtype=F32),
        )

    @classmethod
    def from_transport(cls, ln, down, up, alpha, prefix: str = "") -> AdapterParams:
        return cls(
            Param(prefix + "ln_gamma", ln[0]), Param(prefix + "ln_beta", ln[1]),
            Param(prefix + "w_down", down[:-1]), Param(prefix + "b_down", down[-1]),
            Param(prefix + "w_up", up[:-1]), Param(prefix + "b_up", up[-1]),
            alpha=float(alpha[0]),
        )


@dataclass(frozen=True)
class SubmodelMeta:
    speaker_id: int
    d_model: int
    d_b: int
    n_layers: int
    format_version: int = FORMAT_VERSION


@dataclass
class Submodel:
    meta: SubmodelMeta
    layers: list[AdapterParams]

    def __post_init__(self):
        if len(self.layers) != self.meta.n_layers:
            raise DimensionMismatch(
                f"submodel declares {self.meta.n_layers} layers, has {len(self.layers)}")
        for a in self.layers:
            a.check(self.meta.d_model, self.meta.d_b)

    @classmethod
    def init(cls, speaker_id: int, d_model: int, d_b: int, n_layers: int, seed: int = 0,
             zero_up: bool = False) -> Submodel:
        rng = np.random.default_rng(seed)
        layers = [AdapterParams.init(d_model, d_b, rng, prefix=f"adapter{l}.", zero_up=zero_up)
                  for l in range(n_layers)]
        return cls(SubmodelMeta(speaker_id, d_model, d_b, n_layers), layers)

    @property
    def speaker_id(self) -> int:
        return self.meta.speaker_id

    def parameters(self) -> list[Param]:
        return [p for a in self.layers for p in a.params()]

    def with_alpha(self, alpha: float) -> Submodel:
        return Submodel(self.meta, [a.copy(alpha=alpha) for a in self.layers])

    def with_speaker(self, speaker_id: int) -> Submodel:
        meta = SubmodelMeta(speaker_id, self.meta.d_model, self.meta.d_b, self.meta.n_layers)
        return Submodel(meta, [a.copy() for a in self.layers])

    def copy(self) -> Submodel:
        return self.with_speaker(self.speaker_id)

    def num_values(self) -> int:
        return sum(p.value.size for p in self.parameters()) + len(self.layers)


@dataclass
class OneHotBundle:
    """N independent Submodels addressed by speaker id."""

    speaker_ids: list[int]
    submodels: list[Submodel]
    index: dict[int, int] = field(init=False)

    def __post_init__(self):
        if len(self.speaker_ids) != len(self.submodels):
            raise ValueError("speaker id count does not match member count")
        if len(set(self.speaker_ids)) != len(self.speaker_ids):
            raise ValueError("duplicate speaker ids in bundle")
        self.index = {s: i for i, s in enumerate(self.speaker_ids)}
        if self.submodels:
            m0 = self.submodels[0].meta
            for s, sub in zip(self.speaker_ids, self.submodels):
                m = sub.meta
                if (m.d_model, m.d_b, m.n_layers) != (m0.d_model, m0.d_b, m0.n_layers):
                    raise DimensionMismatch("bundle members must share (d_model, d_b, n_layers)")
                if m.speaker_id != s:
                    raise ValueError(f"member for speaker {s} carries id {m.speaker_id}")

    def member(self, speaker_id: int) -> Submodel:
        try:
            return self.submodels[self.index[speaker_id]]
        except KeyError:
            raise UnknownSpeaker(f"speaker {speaker_id} is not in the bundle") from None

    def parameters(self) -> list[Param]:
        return [p for s in self.submodels for p in s.parameters()]


@dataclass
class EmbeddingBundle:
    """M shared adapter banks per layer mixed by a per-speaker (L x M) real embedding."""

    banks: list[list[AdapterParams]]
    embedding: Param
    speaker_ids: list[int]
    alpha: float = 1.0
    index: dict[int, int] = field(init=False)

    def __post_init__(self):
        if self.alpha not in (0.0, 1.0):
            raise ValueError(f"alpha is a 0/1 switch, got {self.alpha!r}")
        L, M = len(self.banks), len(self.banks[0]) if self.banks else 0
        if L < 1 or M < 1 or any(len(row) != M for row in self.banks):
            raise DimensionMismatch("banks must be a non-empty L x M grid")
        d_model, d_b = self.banks[0][0].d_model, self.banks[0][0].d_b
        for row in self.banks:
            for a in row:
                a.check(d_model, d_b)
        if self.embedding.value.shape != (len(self.speaker_ids), L * M):
            raise DimensionMismatch(
                f"embedding {self.embedding.value.shape} vs {len(self.speaker_ids)} speakers x {L * M}")
        if len(set(self.speaker_ids)) != len(self.speaker_ids):
            raise ValueError("duplicate speaker ids in embedding bundle")
        self.index = {s: i for i, s in enumerate(self.speaker_ids)}

    @property
    def n_layers(self) -> int:
        return len(self.banks)

    @property
    def n_banks(self) -> int:
        return len(self.banks[0])

    @property
    def d_model(self) -> int:
        return self.banks[0][0].d_model

    @property
    def d_b(self) -> int:
        return self.banks[0][0].d_b

    def bank_params(self) -> list[Param]:
        return [p for row in self.banks for a in row for p in a.params()]

    def row(self, speaker_id: int) -> np.ndarray:
        try:
            i = self.index[speaker_id]
        except KeyError:
            raise UnknownSpeaker(f"speaker {speaker_id} is not in the embedding bundle") from None
        return self.embedding.value[i].reshape(self.n_layers, self.n_banks)

    def bank_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.bank_params():
            h.update(p.value.astype("<f4").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

LayerHook = Callable[[DiffRecord, int, Node], Node]


def run_encoder(rec: DiffRecord, base: Basemodel, x: Node, hook: LayerHook | None = None) -> Node:
    """Base network on a (batch, d_in) node; ``hook`` runs after each block."""
    p = base.params
    h = rec.add(rec.matmul(x, rec.param(p["in.w"])), rec.param(p["in.b"]))
    for l in range(base.config.n_layers):
        z = rec.layer_norm(h, rec.param(p[f"block{l}.ln_gamma"]), rec.param(p[f"block{l}.ln_beta"]), LN_EPS)
        z = rec.relu(rec.add(rec.matmul(z, rec.param(p[f"block{l}.w1"])), rec.param(p[f"block{l}.b1"])))
        z = rec.add(rec.matmul(z, rec.param(p[f"block{l}.w2"])), rec.param(p[f"block{l}.b2"]))
        h = rec.add(h, z)
        if hook is not None:
            h = hook(rec, l, h)
    return rec.add(rec.matmul(h, rec.param(p["out.w"])), rec.param(p["out.b"]))


def adapter_body(rec: DiffRecord, a: AdapterParams, h: Node) -> Node:
    z = rec.layer_norm(h, rec.param(a.ln_gamma), rec.param(a.ln_beta), LN_EPS)
    z = rec.relu(rec.add(rec.matmul(z, rec.param(a.w_down)), rec.param(a.b_down)))
    return rec.add(rec.matmul(z, rec.param(a.w_up)), rec.param(a.b_up))


def apply_adapter(rec: DiffRecord, a: AdapterParams, h: Node, alpha: float | None = None) -> Node:
    alpha = a.alpha if alpha is None else alpha
    if alpha == 0.0:
        return h
    body = adapter_body(rec, a, h)
    return rec.add(h, rec.mul(rec.const(np.array(alpha, dtype=body.value.dtype)), body))


def apply_mixture(rec: DiffRecord, banks: Sequence[AdapterParams], weights: Node, layer: int,
                  alpha: float, h: Node) -> Node:
    """h + alpha * sum_m weights[:, layer*M + m] * body_m(h)."""
    if alpha == 0.0:
        return h
    M = len(banks)
    acc = None
    for m, bank in enumerate(banks):
        term = rec.mul(rec.take_col(weights, layer * M + m), adapter_body(rec, bank, h))
        acc = term if acc is None else rec.add(acc, term)
    return rec.add(h, rec.mul(rec.const(np.array(alpha, dtype=acc.value.dtype)), acc))


def _as_batch(base: Basemodel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(F32, copy=False)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != base.config.d_in:
        raise DimensionMismatch(f"input frames {x.shape} do not match d_in={base.config.d_in}")
    return x, single


def _infer(base: Basemodel, x, hook: LayerHook | None) -> np.ndarray:
    xb, single = _as_batch(base, x)
    rec = DiffRecord(enabled=False)
    out = run_encoder(rec, base, rec.const(xb), hook).value
    return out[0] if single else out


def check_submodel(base: Basemodel, sub: Submodel) -> None:
    m, c = sub.meta, base.config
    if m.d_model != c.d_model or m.n_layers != c.n_layers:
        raise DimensionMismatch(
            f"submodel (d_model={m.d_model}, L={m.n_layers}) does not fit base "
            f"(d_model={c.d_model}, L={c.n_layers})")
    for a in sub.layers:
        a.check(m.d_model, m.d_b)


def base_forward(base: Basemodel, x) -> np.ndarray:
    return _infer(base, x, None)


def adapter_apply(h, a: AdapterParams) -> np.ndarray:
    h = np.asarray(h)
    single = h.ndim == 1
    hb = h[None, :] if single else h
    if hb.shape[-1] != a.d_model:
        raise DimensionMismatch(f"adapter expects width {a.d_model}, got {hb.shape}")
    rec = DiffRecord(enabled=False)
    out = apply_adapter(rec, a, rec.const(hb)).value
    return out[0] if single else out


def submodel_hook(sub: Submodel, alpha: float | None = None) -> LayerHook:
    return lambda rec, l, h: apply_adapter(rec, sub.layers[l], h, alpha)


def forward_with_submodel(base: Basemodel, sub: Submodel | None, x, alpha: float | None = None) -> np.ndarray:
    if sub is None:
        return base_forward(base, x)
    check_submodel(base, sub)
    return _infer(base, x, submodel_hook(sub, alpha))


def forward_with_bundle(base: Basemodel, bundle: OneHotBundle, speaker_id: int, x) -> np.ndarray:
    return forward_with_submodel(base, bundle.member(speaker_id), x)


def check_embedding(base: Basemodel, eb: EmbeddingBundle) -> None:
    c = base.config
    if eb.d_model != c.d_model or eb.n_layers != c.n_layers:
        raise DimensionMismatch(
            f"embedding bundle (d_model={eb.d_model}, L={eb.n_layers}) does not fit base "
            f"(d_model={c.d_model}, L={c.n_layers})")


def mixture_hook(eb: EmbeddingBundle, weights: Node) -> LayerHook:
    return lambda rec, l, h: apply_mixture(rec, eb.banks[l], weights, l, eb.alpha, h)


def forward_with_embedding(base: Basemodel, eb: EmbeddingBundle, e_row, x) -> np.ndarray:
    check_embedding(base, eb)
    e_row = np.asarray(e_row, dtype=F32)
    if e_row.shape != (eb.n_layers, eb.n_banks):
        raise DimensionMismatch(
            f"embedding row {e_row.shape} does not match L x M = {(eb.n_layers, eb.n_banks)}")
    weights = e_row.reshape(1, -1)

    def hook(rec, l, h):
        return apply_mixture(rec, eb.banks[l], rec.const(weights), l, eb.alpha, h)

    return _infer(base, x, hook)


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------

def count_params(d_model: int, d_b: int, n_layers: int) -> int:
    """Stored values of a Submodel: LN(2d) + down(W+b) + up(W+b) + residual factor, per layer."""
    if min(d_model, d_b, n_layers) < 1:
        raise ValueError("count_params: dimensions must be >= 1")
    per_layer = 2 * d_model + d_model * d_b + d_b + d_b * d_model + d_model + 1
    return n_layers * per_layer


def serialized_size(param_count: int) -> int:
    if param_count < 0:
        raise ValueError("serialized_size: negative parameter count")
    return HEADER_BYTES + 4 * param_count


def embedding_param_count(d_model: int, d_b: int, n_layers: int, n_banks: int, n_speakers: int) -> int:
    """Trainable values of an embedding bundle: L*M adapter bodies + N*L*M mixing weights."""
    body = count_params(d_model, d_b, 1) - 1
    return n_layers * n_banks * body + n_speakers * n_layers * n_banks


def onehot_param_count(d_model: int, d_b: int, n_layers: int, n_speakers: int) -> int:
    return n_speakers * count_params(d_model, d_b, n_layers)
