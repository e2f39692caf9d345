"""Command-line entry point: ``submodels <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, data, model, serving, store, training
from .errors import SubmodelError
from .model import Basemodel, BasemodelConfig, count_params, serialized_size
from .training import AdaptMode, TrainConfig

log = logging.getLogger("submodels")

REFERENCE_FULL_MODEL_PARAMS = 165_000_000


# --------------------------------------------------------------------------
# dataset layout helpers
# --------------------------------------------------------------------------

def _corpus_path(root: Path, speaker_id: int) -> Path:
    return root / "corpora" / f"{speaker_id}.corp"


def load_profiles(data_dir: str | Path) -> list[tuple[dict, data.SpeakerProfile]]:
    recs = data.read_manifest(Path(data_dir) / "speakers.jsonl")
    return [(r, data.profile_from_record(r, r["n_etiologies"])) for r in recs]


def load_corpora(data_dir: str | Path, group: str = "atypical", speakers: str | None = None) -> list[data.Corpus]:
    root = Path(data_dir)
    wanted = None if speakers in (None, "all") else {int(s) for s in speakers.split(",")}
    out = []
    for rec, prof in load_profiles(root):
        if wanted is not None:
            if prof.speaker_id not in wanted:
                continue
        elif rec["group"] != group:
            continue
        out.append(data.load_corpus(_corpus_path(root, prof.speaker_id), prof))
    if not out:
        raise ValueError(f"no corpora selected in {root} (group={group}, speakers={speakers})")
    return out


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, steps=args.steps, lr=args.lr, seed=args.seed)


def _write_manifest(args, outputs: list[Path], started: float) -> None:
    out = Path(args.out)
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func",)}
    rec = {"command": args.command, "config": config, "seed": getattr(args, "seed", None),
           "outputs": [str(p) for p in outputs],
           "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
           "finished": datetime.now(timezone.utc).isoformat()}
    with open(out / "manifest.jsonl", "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> list[Path]:
    out = _outdir(args)
    (out / "corpora").mkdir(exist_ok=True)
    pop = data.make_population(args.speakers, args.etiologies, args.d_in, args.seed,
                               severities=args.severities.split(","), kappa=args.kappa, noise=args.noise)
    groups = [("atypical", p, None) for p in pop.speakers]
    groups += [("typical", p, None) for p in data.typical_speakers(pop.catalog, args.typical, args.seed,
                                                                    noise=args.noise)]
    if args.heldout:
        held = data.make_population(args.heldout, args.etiologies, args.d_in, args.seed,
                                    severities=args.severities.split(","), first_id=500,
                                    kappa=args.kappa, noise=args.noise, catalog=pop.catalog)
        counts = (args.heldout_train, 0, args.heldout_test)
        groups += [("heldout", p, counts) for p in held.speakers]
    lines, paths = [], []
    for group, prof, counts in groups:
        n = sum(counts) if counts else args.utts
        corpus = data.gen_corpus(prof, n, args.frames, args.seed, counts=counts)
        path = _corpus_path(out, prof.speaker_id)
        data.save_corpus(corpus, path)
        paths.append(path)
        rec = prof.to_record()
        rec.update(group=group, n_etiologies=args.etiologies)
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "speakers.jsonl").write_text("\n".join(lines) + "\n")
    return [out / "speakers.jsonl"] + paths


def cmd_train_base(args) -> list[Path]:
    out = _outdir(args)
    corpora = load_corpora(args.data, "typical")
    d_in = corpora[0].x.shape[2]
    cfg = BasemodelConfig(d_in, args.d_model, args.d_ff, args.layers, d_in, args.seed)
    losses: list[float] = []
    base = training.train_base(corpora, _train_cfg(args), cfg, losses)
    log.info("base loss %.5f -> %.5f", losses[0], float(np.mean(losses[-20:])))
    path = out / "base.base"
    store.save_basemodel(base, path)
    return [path]


def cmd_finetune_full(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    (out / "full").mkdir(exist_ok=True)
    paths = []
    for corpus in load_corpora(args.data, "atypical", args.speakers):
        tuned = training.finetune_full(base, corpus, _train_cfg(args))
        path = out / "full" / f"{corpus.speaker_id}.base"
        store.save_basemodel(tuned, path)
        paths.append(path)
    return paths


def cmd_train_submodel(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    st = store.SubmodelStore(out / "store", create=True)
    corpora = load_corpora(args.data, "atypical", args.speakers)
    cfg = _train_cfg(args)

    def job(corpus):
        return st.save(training.train_submodel(base, corpus, args.d_b, cfg))

    with ThreadPoolExecutor(max_workers=max(1, args.parallel)) as pool:
        return list(pool.map(job, corpora))


def cmd_train_onehot(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    bundle = training.train_onehot(base, load_corpora(args.data, "atypical", args.speakers), args.d_b,
                                   _train_cfg(args))
    path = out / "bundle.bndl"
    store.save_bundle(bundle, path)
    return [path]


def cmd_split(args) -> list[Path]:
    out = _outdir(args)
    bundle = store.load_bundle(args.bundle)
    return store.write_split(training.split_bundle(bundle), out / "store")


def cmd_train_pooled(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    sub = training.train_pooled(base, load_corpora(args.data, "atypical", args.speakers), args.d_b,
                                _train_cfg(args), args.d_b_pooled)
    path = out / "pooled.subm"
    store.save_submodel(sub, path)
    return [path]


def cmd_train_embedding(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    eb = training.train_embedding(base, load_corpora(args.data, "atypical", args.speakers), args.banks,
                                  args.d_b, _train_cfg(args))
    path = out / "embedding.embm"
    store.save_embedding_bundle(eb, path)
    return [path]


def cmd_adapt_speaker(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    eb = store.load_embedding_bundle(args.embedding, base.config)
    paths = []
    for corpus in load_corpora(args.data, "heldout", args.speakers):
        e_row, banks = training.adapt_new_speaker(base, eb, corpus, _train_cfg(args), AdaptMode(args.mode))
        adapted = model.EmbeddingBundle(banks or eb.banks,
                                        model.Param("embedding", e_row.reshape(1, -1)),
                                        [corpus.speaker_id], eb.alpha)
        path = out / f"adapted-{corpus.speaker_id}.embm"
        store.save_embedding_bundle(adapted, path)
        paths.append(path)
    return paths


def load_variant(desc: str, base_cfg: BasemodelConfig):
    """``base`` | ``store:DIR`` | ``submodel:FILE`` | ``bundle:FILE`` | ``embedding:FILE`` | ``full:DIR``
    | ``adapted:DIR`` (directory of single-speaker ``adapted-<id>.embm`` files)."""
    kind, _, arg = desc.partition(":")
    if kind == "base":
        return None
    if kind == "store":
        st = store.SubmodelStore(arg)
        return {s: st.load(s, base_cfg) for s in st.speaker_ids()}
    if kind == "submodel":
        return store.load_submodel(arg, base_cfg)
    if kind == "bundle":
        return store.load_bundle(arg, base_cfg)
    if kind == "embedding":
        return store.load_embedding_bundle(arg, base_cfg)
    if kind == "full":
        return {int(p.stem): store.load_basemodel(p) for p in sorted(Path(arg).glob("*.base"))}
    if kind == "adapted":
        out = {}
        for p in sorted(Path(arg).glob("adapted-*.embm")):
            eb = store.load_embedding_bundle(p, base_cfg)
            out[eb.speaker_ids[0]] = eb
        return out
    raise ValueError(f"unknown variant descriptor {desc!r}")


def _named_variants(specs: list[str]) -> list[tuple[str, str]]:
    named = []
    for s in specs:
        name, sep, rest = s.partition("=")
        named.append((name, rest) if sep else (s.partition(":")[0], s))
    return named


def cmd_eval(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    corpora = load_corpora(args.data, args.group, args.speakers)
    name, desc = _named_variants([args.variant])[0]
    report = training.evaluate(base, load_variant(desc, base.config), corpora, args.split, name)
    table = training.comparison_report([report], claims=())
    tsv, jsonl = out / f"eval-{name}.tsv", out / f"eval-{name}.jsonl"
    tsv.write_text(table.to_text())
    jsonl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in report.to_records()))
    print(table.to_text(), end="")
    return [tsv, jsonl]


def cmd_report(args) -> list[Path]:
    out = _outdir(args)
    base = store.load_basemodel(args.base)
    corpora = load_corpora(args.data, args.group, args.speakers)
    reports = [training.evaluate(base, load_variant(desc, base.config), corpora, args.split, name)
               for name, desc in _named_variants(args.variant)]
    table = training.comparison_report(reports)
    tsv, jsonl = out / "report.tsv", out / "report.jsonl"
    tsv.write_text(table.to_text())
    jsonl.write_text(table.to_jsonl())
    print(table.to_text(), end="")
    return [tsv, jsonl]


def cmd_serve(args) -> list[Path]:
    running = serving.serve(args.base, args.store, args.capacity, args.bind, background=True)
    host, port = running.address
    print(f"listening on {host}:{port}", flush=True)
    running.wait()
    return []


def cmd_bench_load(args) -> list[Path]:
    out = _outdir(args)
    store_root, base_path = args.store, args.base
    if args.synthetic:
        store_root, base_path = serving.build_bench_fixture(out / "bench")
    if store_root is None or base_path is None:
        raise ValueError("bench-load needs --store and --base, or --synthetic")
    report = serving.bench_load(store_root, base_path, args.k)
    path = out / "bench.json"
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    print(report.to_text(), end="")
    return [path]


def cmd_export_embeddings(args) -> list[Path]:
    out = _outdir(args)
    eb = store.load_embedding_bundle(args.embedding)
    profiles = {p.speaker_id: p for _, p in load_profiles(args.data)} if args.data else None
    path = out / "embeddings.jsonl"
    analysis.export_embeddings(eb, path, profiles)
    return [path]


def cmd_probe(args) -> list[Path]:
    out = _outdir(args)
    recs = analysis.read_embeddings(args.vectors)
    if any(r.etiology is None for r in recs):
        raise ValueError("probe: every vector needs an etiology label (export with --data)")
    labels = [r.etiology for r in recs]
    if args.shuffle_seed is not None:
        labels = list(np.random.default_rng(args.shuffle_seed).permutation(labels))
    result = analysis.probe_separability([r.vector for r in recs], labels)
    path = out / "probe.tsv"
    path.write_text(result.to_text())
    print(result.to_text(), end="")
    return [path]


def cmd_params(args) -> list[Path]:
    n = count_params(args.d_model, args.d_b, args.layers)
    size = serialized_size(n)
    full = serialized_size(args.full_params)
    print(f"submodel parameters\t{n}")
    print(f"submodel bytes\t{size}\t({size / 1e6:.2f} MB)")
    print(f"fraction of {args.full_params} full-model parameters\t{n / args.full_params:.4%}")
    print(f"full model bytes\t{full}\t({full / 1e6:.1f} MB)")
    if args.speakers:
        print(f"one-hot parameters for {args.speakers} speakers\t{args.speakers * n}")
    return []


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_train_flags(p, steps: int = 2000):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="submodels", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def command(name, func, help, out=True):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic speaker corpus")
    p.add_argument("--speakers", type=int, default=16)
    p.add_argument("--etiologies", type=int, default=4)
    p.add_argument("--typical", type=int, default=8)
    p.add_argument("--heldout", type=int, default=0, help="extra unseen speakers for adapt-speaker")
    p.add_argument("--heldout-train", type=int, default=50)
    p.add_argument("--heldout-test", type=int, default=200)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--utts", type=int, default=300)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--severities", default="mild,moderate,severe")
    p.add_argument("--kappa", type=float, default=data.KAPPA)
    p.add_argument("--noise", type=float, default=data.NOISE_STD)
    p.add_argument("--seed", type=int, default=0)

    p = command("train-base", cmd_train_base, "train the Basemodel on typical speakers")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    _add_train_flags(p)

    for name, func, help in [
        ("finetune-full", cmd_finetune_full, "fine-tune a full copy of the Basemodel per speaker"),
        ("train-submodel", cmd_train_submodel, "train one Submodel per speaker"),
        ("train-onehot", cmd_train_onehot, "train all speakers' Submodels in one one-hot job"),
        ("train-pooled", cmd_train_pooled, "train one shared Submodel on pooled data"),
        ("train-embedding", cmd_train_embedding, "train shared banks + a real speaker embedding"),
        ("adapt-speaker", cmd_adapt_speaker, "adapt an embedding bundle to held-out speakers"),
    ]:
        p = command(name, func, help)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--base", type=Path, required=True)
        p.add_argument("--speakers", default=None, help="comma-separated ids (default: whole group)")
        _add_train_flags(p)
        if name in ("train-submodel", "train-onehot", "train-pooled", "train-embedding"):
            p.add_argument("--d-b", type=int, default=8)
        if name == "train-submodel":
            p.add_argument("--parallel", type=int, default=1)
        if name == "train-pooled":
            p.add_argument("--d-b-pooled", type=int, default=None)
        if name == "train-embedding":
            p.add_argument("--banks", type=int, default=8)
        if name == "adapt-speaker":
            p.add_argument("--embedding", type=Path, required=True)
            p.add_argument("--mode", choices=[m.value for m in AdaptMode], default=AdaptMode.EMB_AND_BANKS.value)

    p = command("split", cmd_split, "split a one-hot bundle into per-speaker Submodel files")
    p.add_argument("--bundle", type=Path, required=True)

    for name, func, help in [("eval", cmd_eval, "evaluate one variant"),
                             ("report", cmd_report, "compare variants on identical test sets")]:
        p = command(name, func, help)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--base", type=Path, required=True)
        p.add_argument("--variant", required=True, action="append" if name == "report" else "store",
                       help="[name=]base|store:DIR|submodel:FILE|bundle:FILE|embedding:FILE|full:DIR|adapted:DIR")
        p.add_argument("--split", default="test", choices=["train", "dev", "test"])
        p.add_argument("--group", default="atypical", choices=["atypical", "typical", "heldout"])
        p.add_argument("--speakers", default=None)

    p = command("serve", cmd_serve, "run the multi-tenant inference server", out=False)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--bind", default="127.0.0.1:7070")
    p.add_argument("--capacity", type=int, default=8)

    p = command("bench-load", cmd_bench_load, "measure Submodel cold/warm load vs Basemodel reload")
    p.add_argument("--store", type=Path, default=None)
    p.add_argument("--base", type=Path, default=None)
    p.add_argument("-k", type=int, default=100)
    p.add_argument("--synthetic", action="store_true", help="build a fixture whose base is ~145x the Submodel size")

    p = command("export-embeddings", cmd_export_embeddings, "export per-speaker L*M embedding vectors")
    p.add_argument("--embedding", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="dataset dir for etiology/severity labels")

    p = command("probe", cmd_probe, "pairwise etiology separability of exported embeddings")
    p.add_argument("--vectors", type=Path, required=True)
    p.add_argument("--shuffle-seed", type=int, default=None)

    p = command("params", cmd_params, "Submodel parameter and size accounting", out=False)
    p.add_argument("--d-model", type=int, default=512)
    p.add_argument("--d-b", type=int, default=64)
    p.add_argument("--layers", type=int, default=17)
    p.add_argument("--full-params", type=int, default=REFERENCE_FULL_MODEL_PARAMS)
    p.add_argument("--speakers", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        outputs = args.func(args)
    except (SubmodelError, ValueError, KeyError, OSError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"error [{code}]: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "out", None) is not None:
        _write_manifest(args, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
