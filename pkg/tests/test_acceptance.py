"""End-to-end acceptance checks at desk scale.

Each test prints one PASS/FAIL line (collected in the terminal summary) and
asserts at the pinned tolerance.  Trained models are shared through
module-scoped fixtures so every regime is trained once.

    pytest tests/test_acceptance.py -v
"""

import statistics
import threading
import time

import numpy as np
import pytest

from submodels.analysis import embedding_vectors, probe_separability
from submodels.core import Param, grad_check
from submodels.data import gen_corpus, gen_speaker, make_population, typical_speakers
from submodels.errors import DimensionMismatch, FormatError
from submodels.model import (
    AdapterParams,
    Basemodel,
    BasemodelConfig,
    EmbeddingBundle,
    Submodel,
    apply_adapter,
    base_forward,
    count_params,
    forward_with_bundle,
    forward_with_submodel,
    mixture_hook,
    run_encoder,
    serialized_size,
)
from submodels.serving import Client, bench_load, build_bench_fixture, serve
from submodels.store import SubmodelStore, load_submodel, save_basemodel, save_submodel, write_split
from submodels.training import (
    SpeakerEmbedding,
    TrainConfig,
    adapt_new_speaker,
    comparison_report,
    evaluate,
    finetune_full,
    init_onehot,
    onehot_predict,
    split_bundle,
    train_base,
    train_embedding,
    train_onehot,
    train_pooled,
    train_submodel,
)

D_B = 8
STEPS = 1000  # per separately trained speaker; the one-hot job gets 16x this
SHARED_STEPS = 8000  # pooled and real-embedding jobs
ADAPT_STEPS = 300
LR = 1e-3


class Timer:
    def __init__(self):
        self.seconds = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.seconds[name] = time.perf_counter() - t0
        return out


@pytest.fixture(scope="module")
def timer():
    return Timer()


@pytest.fixture(scope="module")
def desk(timer):
    pop = make_population(16, 4, 16, seed=0)
    typical = [gen_corpus(s, 300, 16, seed=0) for s in typical_speakers(pop.catalog, 8, 0)]
    corpora = [gen_corpus(s, 300, 16, seed=0) for s in pop.speakers]
    base = timer.run("base", train_base, typical, TrainConfig(steps=2000, lr=LR))
    return pop, corpora, base


@pytest.fixture(scope="module")
def separate(desk, timer):
    _, corpora, base = desk
    cfg = TrainConfig(steps=STEPS, lr=LR)
    return timer.run("separate", lambda: {c.speaker_id: train_submodel(base, c, D_B, cfg) for c in corpora})


@pytest.fixture(scope="module")
def onehot(desk, timer):
    _, corpora, base = desk
    return timer.run("onehot", train_onehot, base, corpora, D_B, TrainConfig(steps=16 * STEPS, lr=LR))


@pytest.fixture(scope="module")
def pooled(desk, timer):
    _, corpora, base = desk
    return timer.run("pooled", train_pooled, base, corpora, D_B, TrainConfig(steps=SHARED_STEPS, lr=LR))


@pytest.fixture(scope="module")
def embedding(desk, timer):
    _, corpora, base = desk
    return timer.run("embedding", train_embedding, base, corpora, 8, D_B,
                     TrainConfig(steps=SHARED_STEPS, lr=LR))


@pytest.fixture(scope="module")
def full(desk, timer):
    _, corpora, base = desk
    cfg = TrainConfig(steps=STEPS, lr=LR)
    return timer.run("full", lambda: {c.speaker_id: finetune_full(base, c, cfg) for c in corpora})


def rel(a, b):
    return abs(a - b) / abs(b)


# --------------------------------------------------------------------------

def test_01_parameter_accounting(verdict):
    n = count_params(512, 64, 17)
    size = serialized_size(n)
    full_params = 165_000_000
    full_size = serialized_size(full_params)
    checks = {
        "count": n == 1_141_329,
        "size~4.6MB": rel(size, 4.6e6) <= 0.02,
        "fraction<1%": n / full_params < 0.01,
        "full~668MB": rel(full_size, 668e6) <= 0.02,
        "1024 speakers~1.3B": rel(1024 * n, 1.3e9) <= 0.15,
    }
    ok = all(checks.values())
    verdict(1, ok, f"count={n} bytes={size} fraction={n / full_params:.4%} full_bytes={full_size} "
                   f"1024x={1024 * n} failed={[k for k, v in checks.items() if not v]}")
    assert ok, checks


def test_02_deactivation_bit_exact(verdict, desk):
    _, _, base = desk
    x = np.random.default_rng(2).standard_normal((1000, 16)).astype(np.float32)
    ref = base_forward(base, x)
    mismatches = 0
    for k in range(10):
        sub = Submodel.init(k, 32, D_B, 4, seed=100 + k)
        for p in sub.parameters():
            p.value[...] = np.random.default_rng(k).standard_normal(p.value.shape)
        mismatches += forward_with_submodel(base, sub.with_alpha(0.0), x).tobytes() != ref.tobytes()
    ok = mismatches == 0
    verdict(2, ok, f"{10 - mismatches}/10 random Submodels bit-identical to base over 1000 frames")
    assert ok


def test_03_split_equivalence(verdict, desk, tmp_path):
    _, corpora, base = desk
    t0 = time.perf_counter()
    bundle = train_onehot(base, corpora[:8], D_B, TrainConfig(steps=500, lr=LR))
    paths = write_split(split_bundle(bundle), tmp_path)
    x = np.random.default_rng(3).standard_normal((100, 16)).astype(np.float32)
    matches = 0
    for path in paths:
        sub = load_submodel(path, base.config)
        matches += (forward_with_bundle(base, bundle, sub.speaker_id, x).tobytes()
                    == forward_with_submodel(base, sub, x).tobytes())
    elapsed = time.perf_counter() - t0
    ok = matches == 8 and len(paths) == 8 and elapsed < 120
    verdict(3, ok, f"{matches}/8 split files bit-identical to bundle output; {elapsed:.1f}s")
    assert ok


def test_04_gradient_correctness(verdict):
    cfg = BasemodelConfig(d_in=4, d_model=8, d_ff=8, n_layers=2, d_out=4, seed=5)
    base = Basemodel.init(cfg)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 4)).astype(np.float32)
    y = rng.standard_normal((6, 4)).astype(np.float32)

    def loss(rec, hook=None, model=base):
        return rec.mse(run_encoder(rec, model, rec.const(x), hook), rec.const(y))

    sub = Submodel.init(1, 8, 3, 2, seed=6)
    for p in sub.parameters():
        p.value[...] += rng.normal(0, 0.3, p.value.shape)
    bundle = init_onehot(base, [1, 2], 3, seed=7)
    for p in bundle.parameters():
        p.value[...] += rng.normal(0, 0.3, p.value.shape)
    who = np.array([0, 1, 1, 0, 1, 0])
    banks = [[AdapterParams.init(8, 3, rng, prefix=f"b{l}{m}.", std=0.3) for m in range(2)] for l in range(2)]
    eb = EmbeddingBundle(banks, Param("e", rng.standard_normal((1, 4))), [0])
    tuned = base.copy()

    cases = {
        "submodel": (lambda rec: loss(rec, lambda r, l, h: apply_adapter(r, sub.layers[l], h)),
                     sub.parameters()),
        "one-hot member": (lambda rec: rec.mse(onehot_predict(base, bundle, [0, 1])(rec, rec.const(x), who),
                                               rec.const(y)), bundle.parameters()),
        "embedding M=2": (lambda rec: loss(rec, mixture_hook(eb, rec.param(eb.embedding))),
                          eb.bank_params() + [eb.embedding]),
        "full fine-tune": (lambda rec: loss(rec, model=tuned), tuned.parameters()),
    }
    errs = {name: grad_check(fn, params, eps=1e-3, tol=1e-3).max_rel_err for name, (fn, params) in cases.items()}
    ok = all(e < 1e-3 for e in errs.values())
    verdict(4, ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()))
    assert ok, errs


def test_05_personalization_efficacy(verdict, desk, separate, timer):
    _, corpora, base = desk
    before = evaluate(base, None, corpora, "dev").by_speaker()
    after = evaluate(base, separate, corpora, "dev").by_speaker()
    reductions = [1 - after[s] / before[s] for s in before]
    improved = sum(after[s] < before[s] for s in before)
    seconds = timer.seconds["separate"]
    ok = statistics.fmean(reductions) >= 0.5 and improved >= 0.9 * len(before) and seconds < 600
    verdict(5, ok, f"mean dev MSE reduction {statistics.fmean(reductions):.1%}, "
                   f"{improved}/{len(before)} speakers improved; training {seconds:.0f}s")
    assert ok


def test_06_throughput_parity(verdict, desk, separate, onehot, timer):
    _, corpora, base = desk
    sep = evaluate(base, separate, corpora, "dev").mean
    joint = evaluate(base, onehot, corpora, "dev").mean
    seconds = timer.seconds["separate"] + timer.seconds["onehot"]
    ok = rel(joint, sep) <= 0.10 and seconds < 900
    verdict(6, ok, f"one-hot dev MSE {joint:.5f} vs separate {sep:.5f} ({rel(joint, sep):.1%} apart); "
                   f"training {seconds:.0f}s")
    assert ok


def test_07_approach_ordering(verdict, desk, separate, onehot, pooled, embedding, full, timer):
    _, corpora, base = desk
    variants = {"basemodel": None, "submodel": separate, "one-hot": onehot, "pooled": pooled,
                "real-embedding": embedding, "full-finetune": full}
    table = comparison_report([evaluate(base, v, corpora, "test", k) for k, v in variants.items()])
    print(table.to_text())
    seconds = sum(timer.seconds.values())
    held = [claim for claim, good in table.orderings if good]
    ok = len(held) == 5 and seconds < 1800
    means = " ".join(f"{k}={table.mean(k):.5f}" for k in variants)
    verdict(7, ok, f"{len(held)}/5 orderings hold; {means}; total training {seconds:.0f}s")
    assert ok, table.to_text()


def test_08_low_data_adaptation(verdict, desk, pooled, embedding):
    pop, _, base = desk
    t0 = time.perf_counter()
    severities = ["mild", "moderate", "severe", "moderate"]
    held = [gen_speaker(pop.catalog, i % 4, severities[i], 9000 + i, speaker_id=500 + i) for i in range(4)]
    corpora = [gen_corpus(s, 250, 16, seed=77 + i, counts=(50, 0, 200)) for i, s in enumerate(held)]
    cfg = TrainConfig(steps=ADAPT_STEPS, lr=LR)
    scratch = {c.speaker_id: train_submodel(base, c, D_B, cfg) for c in corpora}
    from_pooled = {c.speaker_id: train_submodel(base, c, pooled.meta.d_b, cfg, init=pooled) for c in corpora}
    adapted = {}
    for c in corpora:
        row, banks = adapt_new_speaker(base, embedding, c, cfg)
        adapted[c.speaker_id] = SpeakerEmbedding(
            EmbeddingBundle(banks, Param("e", row.reshape(1, -1)), [c.speaker_id]), row)
    r_scratch = evaluate(base, scratch, corpora, "test")
    r_pooled = evaluate(base, from_pooled, corpora, "test")
    r_emb = evaluate(base, adapted, corpora, "test")
    wins = sum(e < s for e, s in zip(r_emb.mses, r_scratch.mses))
    pooled_worst = r_pooled.mean > max(r_scratch.mean, r_emb.mean)
    elapsed = time.perf_counter() - t0
    ok = wins >= 3 and pooled_worst and elapsed < 600
    verdict(8, ok, f"embedding beats scratch on {wins}/4; mean test MSE embedding={r_emb.mean:.5f} "
                   f"scratch={r_scratch.mean:.5f} pooled={r_pooled.mean:.5f} "
                   f"(pooled worst: {pooled_worst}); {elapsed:.0f}s")
    assert ok


def test_09_serving(verdict, desk, separate, tmp_path):
    _, corpora, base = desk
    speakers = [c.speaker_id for c in corpora[:8]]
    store = SubmodelStore(tmp_path / "store", create=True)
    for s in speakers:
        store.save(separate[s])
    save_basemodel(base, tmp_path / "base.base")
    t0 = time.perf_counter()
    running = serve(tmp_path / "base.base", store.root, capacity=8)
    rng = np.random.default_rng(9)
    plan = []
    for i in range(1000):
        sid = None if rng.random() < 0.2 else speakers[int(rng.integers(0, 8))]
        plan.append((sid, rng.standard_normal((2, 16)).astype(np.float32)))
    responses = [None] * len(plan)

    def client(lane):
        with Client(running.address) as c:
            for i in range(lane, len(plan), 4):
                sid, x = plan[i]
                responses[i] = c.call({"type": "infer", "speaker": None if sid is None else str(sid),
                                       "frames": x.tolist()})

    try:
        threads = [threading.Thread(target=client, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        stats = running.app.stats()
    finally:
        running.stop()
    wrong = 0
    for (sid, x), resp in zip(plan, responses):
        want = forward_with_submodel(base, None if sid is None else separate[sid], x)
        if resp is None or resp.get("type") != "result" or \
                np.array(resp["frames"], np.float32).tobytes() != want.tobytes():
            wrong += 1
    lookups = stats["hits"] + stats["misses"] + stats["coalesced"]
    hit_rate = stats["hits"] / lookups
    elapsed = time.perf_counter() - t0
    ok = wrong == 0 and stats["base_loads"] == 1 and hit_rate > 0.8 and elapsed < 120
    verdict(9, ok, f"{len(plan) - wrong}/{len(plan)} responses match the offline oracle; "
                   f"base_loads={stats['base_loads']} hit rate {hit_rate:.1%}; {elapsed:.1f}s")
    assert ok


def test_10_load_latency(verdict, tmp_path):
    t0 = time.perf_counter()
    store_root, base_path = build_bench_fixture(tmp_path)
    report = bench_load(store_root, base_path, k=100)
    elapsed = time.perf_counter() - t0
    ok = report.size_ratio >= 100 and report.ratio >= 20 and report.warm_load_micros_max == 0 and elapsed < 120
    verdict(10, ok, f"cold {report.submodel_cold_mean_us / 1000:.2f}+/-{report.submodel_cold_std_us / 1000:.2f} ms, "
                    f"base reload {report.base_reload_mean_us / 1000:.1f}+/-{report.base_reload_std_us / 1000:.1f} ms, "
                    f"ratio {report.ratio:.0f}x at size ratio {report.size_ratio:.0f}x; "
                    f"warm load_micros max {report.warm_load_micros_max}; {elapsed:.1f}s")
    assert ok


def test_11_format_robustness(verdict, tmp_path):
    good = tmp_path / "1.subm"
    save_submodel(Submodel.init(1, 32, D_B, 4), good)
    raw = good.read_bytes()
    cases = {"BAD_MAGIC": b"XXXX" + raw[4:], "TRUNCATED": raw[:-7]}
    seen = {}
    for code, blob in cases.items():
        path = tmp_path / f"{code}.subm"
        path.write_bytes(blob)
        try:
            load_submodel(path)
        except FormatError as exc:
            seen[code] = exc.code
    try:
        load_submodel(good, BasemodelConfig(d_model=64))
    except DimensionMismatch as exc:
        seen["DIM_MISMATCH"] = exc.code
    ok = all(seen.get(code) == code for code in ("BAD_MAGIC", "TRUNCATED", "DIM_MISMATCH"))
    verdict(11, ok, f"observed codes {seen}")
    assert ok


def test_12_embedding_analysis(verdict, desk, embedding):
    pop, _, _ = desk
    rng = np.random.default_rng(12)
    full_shape = EmbeddingBundle([[AdapterParams.init(4, 2, rng) for _ in range(8)] for _ in range(17)],
                                  Param("e", rng.standard_normal((2, 136))), [1, 2])
    lengths = {len(r.vector) for r in embedding_vectors(full_shape)}
    profiles = {s.speaker_id: s for s in pop.speakers}
    recs = embedding_vectors(embedding, profiles)
    x = [r.vector for r in recs]
    y = [r.etiology for r in recs]
    real = probe_separability(x, y).mean
    shuffled = statistics.fmean(probe_separability(x, np.random.default_rng(s).permutation(y)).mean
                                for s in range(5))
    ok = lengths == {136} and {len(v) for v in x} == {32} and real >= 0.8 and 0.3 <= shuffled <= 0.7
    verdict(12, ok, f"export length {lengths} (17x8 shape), 32 (desk); probe mean accuracy {real:.3f}, "
                    f"shuffled labels {shuffled:.3f}")
    assert ok
