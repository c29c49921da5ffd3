"""Command-line entry point for data preparation, training, generation and scoring.

Resolved settings follow flags > ``--config`` JSON file > defaults, and every
run records them in a ``manifest.json`` (or ``<output>.manifest.json``) beside
its outputs; passing such a manifest back as ``--config`` repeats the run's
settings. Path defaults may come from ``MHRED_DATASET``, ``MHRED_FEATURES``
and ``MHRED_CHECKPOINT``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FeatureStore,
    TranscriptError,
    Vocabulary,
    batches,
    convert_mmd_session,
    encode_example,
    extract_examples,
    read_examples,
    read_transcripts,
    synthesize_corpus,
    tokenize,
    vocab_from_examples,
    write_examples,
    write_transcripts,
)
from .metrics import METRICS, TABLE_HEADER, bootstrap_compare, corpus_eval
from .model import CheckpointError, ModelConfig, ModelParams, encode_context, generate, load_checkpoint, save_checkpoint
from .tensor import no_grad
from .trainer import TrainConfig, TrainingError, fit

log = logging.getLogger("mhred")


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    version: str = __version__
    timings: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, then the ``--config`` file, then explicitly given flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config file {args.config}: {exc}") from None
        if isinstance(from_file, dict) and "command" in from_file and "config" in from_file:
            # a previous run's manifest: reuse its resolved settings
            from_file = {k: v for k, v in from_file["config"].items() if k in defaults}
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise CliError(f"unknown keys in config file: {sorted(unknown)}")
        resolved.update(from_file)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _env_path(value, env: str, what: str) -> Path:
    value = value or os.environ.get(env)
    if not value:
        raise CliError(f"no {what} given (flag or ${env})")
    return Path(value)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> None:
    out = Path(args.out)
    t0 = time.time()
    corpus = synthesize_corpus(args.seed, args.sessions, args.style, img_dim=args.img_dim, noise=args.noise)
    out.mkdir(parents=True, exist_ok=True)
    write_transcripts(out / "transcripts.jsonl", corpus.transcripts)
    corpus.features.save(out / "features.bin")
    RunManifest(
        "synth",
        corpus.meta,
        {"seed": args.seed},
        {},
        {"transcripts": str(out / "transcripts.jsonl"), "features": str(out / "features.bin")},
        timings={"total_s": time.time() - t0},
    ).write(out / "manifest.json")
    log.info("wrote %d sessions to %s", len(corpus.transcripts), out)


# ---------------------------------------------------------------------------
# importing real data


def cmd_convert_mmd(args) -> None:
    """Raw MMD session files (``*.json``) to transcript JSONL.

    A file under a ``train``, ``valid`` or ``test`` directory keeps that split;
    its session id is the path relative to ``--input`` without the suffix.
    """
    t0 = time.time()
    root = Path(args.input)
    files = sorted(root.rglob("*.json"))
    if not files:
        raise CliError(f"no .json session files under {root}")
    transcripts = []
    for f in files:
        rel = f.relative_to(root)
        split = next((part for part in rel.parts[:-1] if part in ("train", "valid", "test")), None)
        try:
            raw = json.loads(f.read_text(encoding="utf-8"))
            transcripts.append(convert_mmd_session(raw, str(rel.with_suffix("")), split))
        except (OSError, json.JSONDecodeError, TranscriptError, AttributeError, TypeError) as exc:
            raise CliError(f"{f}: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_transcripts(out, transcripts)
    RunManifest("convert-mmd", {}, {}, {"input": str(root)}, {"transcripts": str(out)}, timings={"total_s": time.time() - t0}).write(
        Path(str(out) + ".manifest.json")
    )
    log.info("converted %d sessions", len(transcripts))


def cmd_import_features(args) -> None:
    """An ``.npz`` with ``ids`` (strings) and ``vectors`` (``[n, img_dim]``) to a feature store."""
    t0 = time.time()
    try:
        with np.load(args.npz, allow_pickle=False) as z:
            ids, vectors = [str(x) for x in z["ids"]], np.asarray(z["vectors"], dtype=np.float64)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read {args.npz}: {exc}") from None
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise CliError(f"{args.npz}: vectors {vectors.shape} do not match {len(ids)} ids")
    store = FeatureStore(vectors.shape[1], dict(zip(ids, vectors)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(out)
    RunManifest("import-features", {"img_dim": store.img_dim}, {}, {"npz": args.npz}, {"features": str(out)}, timings={"total_s": time.time() - t0}).write(
        Path(str(out) + ".manifest.json")
    )


# ---------------------------------------------------------------------------
# prepare

PREPARE_DEFAULTS = {
    "mode": "aggregated",
    "context_size": 2,
    "max_images": 5,
    "min_count": 1,
    "split_ratios": [0.8, 0.1, 0.1],
    "seed": 0,
}


def _split_sessions(transcripts, ratios, seed) -> dict[str, list]:
    splits: dict[str, list] = {"train": [], "valid": [], "test": []}
    unassigned = []
    for t in transcripts:
        if t.split is not None:
            if t.split not in splits:
                raise CliError(f"session {t.session_id}: unknown split {t.split!r}")
            splits[t.split].append(t)
        else:
            unassigned.append(t)
    if unassigned:
        r = np.asarray(ratios, dtype=float)
        if r.shape != (3,) or (r < 0).any() or r.sum() <= 0:
            raise CliError("split ratios must be three nonnegative numbers")
        order = np.random.default_rng(seed).permutation(len(unassigned))
        cuts = np.floor(np.cumsum(r / r.sum())[:2] * len(unassigned)).astype(int)
        for name, idx in zip(("train", "valid", "test"), np.split(order, cuts)):
            splits[name].extend(unassigned[i] for i in sorted(idx))
    return splits


def cmd_prepare(args) -> None:
    t0 = time.time()
    cfg = _resolve(args, PREPARE_DEFAULTS)
    transcripts_path = Path(args.transcripts)
    features_arg = args.features or os.environ.get("MHRED_FEATURES")
    features_path = Path(features_arg) if features_arg else None
    try:
        transcripts = read_transcripts(transcripts_path)
    except OSError as exc:
        raise CliError(f"cannot read transcripts: {exc}") from None
    except TranscriptError as exc:
        raise CliError(f"{transcripts_path}: {exc}") from None
    if not transcripts:
        raise CliError(f"{transcripts_path}: no transcripts")
    img_dim = None
    if features_path is not None:
        try:
            img_dim = FeatureStore.load(features_path).img_dim
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read features: {exc}") from None
    splits = _split_sessions(transcripts, cfg["split_ratios"], cfg["seed"])
    examples = {
        name: [e for t in ts for e in extract_examples(t, cfg["context_size"], cfg["mode"])] for name, ts in splits.items()
    }
    if not examples["train"]:
        raise CliError("training split has no examples")
    vocab = vocab_from_examples(examples["train"], cfg["min_count"])
    stats = {
        "sessions": len(transcripts),
        "pairs": {k: len(v) for k, v in examples.items()},
        "sessions_per_split": {k: len(v) for k, v in splits.items()},
        "mean_turns_per_session": float(np.mean([len(t.turns) for t in transcripts])),
        "mean_target_tokens": float(np.mean([len(e.target) for v in examples.values() for e in v])),
        "vocab_size": len(vocab),
    }
    out = Path(args.out)
    # build in a sibling temp dir so a failure leaves no partial dataset
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        for name, exs in examples.items():
            write_examples(tmp / f"{name}.jsonl", exs)
        vocab.save(tmp / "vocab.tsv")
        (tmp / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        dataset = {
            "mode": cfg["mode"],
            "context_size": cfg["context_size"],
            "max_images": cfg["max_images"],
            "img_dim": img_dim,
            "features": str(features_path.resolve()) if features_path else None,
        }
        (tmp / "dataset.json").write_text(json.dumps(dataset, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        RunManifest(
            "prepare",
            cfg,
            {"seed": cfg["seed"]},
            {"transcripts": str(transcripts_path), "features": str(features_path) if features_path else None},
            {"dataset": str(out)},
            timings={"total_s": time.time() - t0},
        ).write(tmp / "manifest.json")
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    log.info("prepared %s: %s", out, stats["pairs"])


# ---------------------------------------------------------------------------
# dataset loading shared by train / generate


@dataclass
class Dataset:
    path: Path
    meta: dict
    vocab: Vocabulary
    features: FeatureStore | None

    def split(self, name: str):
        p = self.path / f"{name}.jsonl"
        if not p.exists():
            raise CliError(f"dataset {self.path} has no split {name!r}")
        return read_examples(p)

    def encode(self, examples):
        dim = self.meta.get("img_dim") or 1
        return [encode_example(e, self.vocab, self.meta["max_images"], self.features, img_dim=dim) for e in examples]


def _load_dataset(path: Path, features_override: str | None = None) -> Dataset:
    try:
        meta = json.loads((path / "dataset.json").read_text(encoding="utf-8"))
        vocab = Vocabulary.load(path / "vocab.tsv")
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}") from None
    fpath = features_override or meta.get("features")
    features = None
    if fpath:
        try:
            features = FeatureStore.load(fpath)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read features {fpath}: {exc}") from None
        if meta.get("img_dim") not in (None, features.img_dim):
            raise CliError(f"features have img_dim {features.img_dim}, dataset expects {meta['img_dim']}")
        meta["img_dim"] = features.img_dim
    return Dataset(path, meta, vocab, features)


def _trim(context_size: int):
    return lambda b: b.last_turns(context_size) if b.n_turns > context_size else b


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "multimodal": True,
    "attention": True,
    "bidirectional": True,
    "tied_embeddings": True,
    "context_size": None,
    "emb_dim": 512,
    "hid_dim": 512,
    "max_decode_len": 30,
    "attend_over": "all",
    "lr": 4e-4,
    "clip_norm": 5.0,
    "batch_size": 32,
    "max_epochs": 20,
    "patience": 3,
    "max_steps": None,
    "seed": 0,
    "init_scale": 0.08,
}


def cmd_train(args) -> None:
    t0 = time.time()
    cfg = _resolve(args, TRAIN_DEFAULTS)
    dpath = _env_path(args.dataset, "MHRED_DATASET", "dataset")
    ds = _load_dataset(dpath, args.features)
    cxt = cfg["context_size"] or ds.meta["context_size"]
    if cxt > ds.meta["context_size"]:
        raise CliError(f"--context-size {cxt} exceeds the dataset's prepared context of {ds.meta['context_size']}")
    if cfg["multimodal"] and ds.features is None:
        raise CliError("multimodal model needs image features (dataset has none; pass --features or --no-multimodal)")
    try:
        mcfg = ModelConfig(
            vocab_size=len(ds.vocab),
            emb_dim=cfg["emb_dim"],
            hid_dim=cfg["hid_dim"],
            img_dim=ds.meta.get("img_dim") or 1,
            max_images=ds.meta["max_images"],
            context_size=cxt,
            multimodal=cfg["multimodal"],
            use_attention=cfg["attention"],
            bidirectional_encoder=cfg["bidirectional"],
            tied_embeddings=cfg["tied_embeddings"],
            max_decode_len=cfg["max_decode_len"],
            attend_over=cfg["attend_over"],
        )
        tcfg = TrainConfig(
            learning_rate=cfg["lr"],
            clip_norm=cfg["clip_norm"],
            batch_size=cfg["batch_size"],
            max_epochs=cfg["max_epochs"],
            patience=cfg["patience"],
            seed=cfg["seed"],
            max_steps=cfg["max_steps"],
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    train, valid = ds.encode(ds.split("train")), ds.encode(ds.split("valid"))
    if not valid:
        raise CliError("validation split is empty")
    params = ModelParams.init(mcfg, seed=cfg["seed"], scale=cfg["init_scale"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s cxt=%d on %d examples", mcfg.name, cxt, len(train))
    try:
        result = fit(params, mcfg, train, valid, tcfg, prepare=_trim(cxt))
    except TrainingError as exc:
        raise CliError(str(exc)) from None
    save_checkpoint(
        out / "model.npz",
        result.params,
        mcfg,
        vocab_tokens=ds.vocab.itos,
        extra={"best_epoch": result.best_epoch, "best_valid_loss": result.best_valid_loss, "dataset_mode": ds.meta["mode"]},
    )
    result.write_history(out / "history.jsonl")
    RunManifest(
        "train",
        {**cfg, "model": mcfg.to_dict(), "train": tcfg.to_dict()},
        {"seed": cfg["seed"]},
        {"dataset": str(dpath), "features": ds.meta.get("features")},
        {"checkpoint": str(out / "model.npz"), "history": str(out / "history.jsonl")},
        timings={"total_s": time.time() - t0},
    ).write(out / "manifest.json")
    log.info("best epoch %d, valid loss %.4f", result.best_epoch, result.best_valid_loss)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> None:
    t0 = time.time()
    ckpt_path = _env_path(args.checkpoint, "MHRED_CHECKPOINT", "checkpoint")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    dpath = _env_path(args.dataset, "MHRED_DATASET", "dataset")
    ds = _load_dataset(dpath, args.features)
    if ckpt.vocab is not None and ckpt.vocab != ds.vocab.itos:
        raise CliError("checkpoint vocabulary does not match the dataset vocabulary")
    config = ckpt.config
    if args.max_decode_len is not None:
        config = ModelConfig.from_dict({**config.to_dict(), "max_decode_len": args.max_decode_len})
    if config.context_size > ds.meta["context_size"]:
        raise CliError("checkpoint context size exceeds the dataset's prepared context")
    examples = ds.split(args.split)
    items = ds.encode(examples)
    trim = _trim(config.context_size)
    lines = []
    with no_grad():
        for b in batches(items, 64):
            enc = encode_context(trim(b), ckpt.params, config)
            mode = "beam" if args.beam and args.beam > 1 else "greedy"
            for ids in generate(enc, ckpt.params, config, mode=mode, beam_width=args.beam or 1):
                lines.append(" ".join(ds.vocab.decode(ids)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    outputs = {"responses": str(out)}
    if args.refs_out:
        Path(args.refs_out).write_text("".join(" ".join(e.target) + "\n" for e in examples), encoding="utf-8")
        outputs["references"] = args.refs_out
    RunManifest(
        "generate",
        {"model": config.to_dict(), "split": args.split, "beam": args.beam},
        {},
        {"checkpoint": str(ckpt_path), "dataset": str(dpath)},
        outputs,
        timings={"total_s": time.time() - t0},
    ).write(Path(str(out) + ".manifest.json"))


# ---------------------------------------------------------------------------
# evaluate / compare


def _read_lines(path: str) -> list[list[str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [tokenize(line) for line in fh.read().splitlines()]
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_evaluate(args) -> None:
    t0 = time.time()
    hyps, refs = _read_lines(args.hyps), _read_lines(args.refs)
    if len(hyps) != len(refs):
        raise CliError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise CliError("no sentences to evaluate")
    report = corpus_eval(list(zip(hyps, refs)))
    payload = report.to_dict()
    payload["table"] = [TABLE_HEADER, report.table_row(args.model or "system", args.cxt if args.cxt is not None else "-")]
    _emit(payload, args.out)
    log.info("%s", payload["table"][1])
    if args.out:
        RunManifest("evaluate", {"model": args.model, "cxt": args.cxt}, {}, {"hyps": args.hyps, "refs": args.refs}, {"report": args.out}, timings={"total_s": time.time() - t0}).write(Path(args.out + ".manifest.json"))


def cmd_compare(args) -> None:
    t0 = time.time()
    a, b, refs = _read_lines(args.hyps_a), _read_lines(args.hyps_b), _read_lines(args.refs)
    if not (len(a) == len(b) == len(refs)):
        raise CliError(f"line counts differ: A={len(a)} B={len(b)} refs={len(refs)}")
    if not refs:
        raise CliError("no sentences to compare")
    ra, rb = corpus_eval(list(zip(a, refs))), corpus_eval(list(zip(b, refs)))
    verdicts = {
        m: bootstrap_compare(ra.per_sentence[m], rb.per_sentence[m], args.resamples, args.seed).to_dict() for m in METRICS
    }
    _emit({"verdicts": verdicts, "means_a": ra.means, "means_b": rb.means}, args.out)
    if args.out:
        RunManifest("compare", {"resamples": args.resamples}, {"seed": args.seed}, {"hyps_a": args.hyps_a, "hyps_b": args.hyps_b, "refs": args.refs}, {"report": args.out}, timings={"total_s": time.time() - t0}).write(Path(args.out + ".manifest.json"))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhred", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    bool_flag = argparse.BooleanOptionalAction

    s = sub.add_parser("synth", help="generate a synthetic transcript corpus and feature store")
    s.add_argument("--style", choices=["text_driven", "image_driven", "long_range"], default="text_driven")
    s.add_argument("--sessions", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--img-dim", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("convert-mmd", help="convert raw MMD session files to transcript JSONL")
    s.add_argument("--input", required=True, help="directory searched recursively for *.json sessions")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_convert_mmd)

    s = sub.add_parser("import-features", help="build a feature store from an .npz of ids and vectors")
    s.add_argument("--npz", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_import_features)

    s = sub.add_parser("prepare", help="extract context/response examples and a vocabulary")
    s.add_argument("--transcripts", required=True)
    s.add_argument("--features")
    s.add_argument("--mode", choices=["aggregated", "unrolled"])
    s.add_argument("--context-size", type=int)
    s.add_argument("--max-images", type=int)
    s.add_argument("--min-count", type=int)
    s.add_argument("--split-ratios", type=float, nargs=3)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("train", help="train an HRED variant with early stopping")
    s.add_argument("--dataset")
    s.add_argument("--features")
    s.add_argument("--multimodal", action=bool_flag, help="M-HRED (default) vs T-HRED")
    s.add_argument("--attention", action=bool_flag)
    s.add_argument("--bidirectional", action=bool_flag)
    s.add_argument("--tied-embeddings", action=bool_flag)
    s.add_argument("--context-size", type=int)
    s.add_argument("--emb-dim", type=int)
    s.add_argument("--hid-dim", type=int)
    s.add_argument("--max-decode-len", type=int)
    s.add_argument("--attend-over", choices=["all", "last"])
    s.add_argument("--lr", type=float)
    s.add_argument("--clip-norm", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--init-scale", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="greedy (or beam) responses for a dataset split")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--features")
    s.add_argument("--split", default="test")
    s.add_argument("--max-decode-len", type=int)
    s.add_argument("--beam", type=int, default=0)
    s.add_argument("--refs-out")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", help="sentence-level BLEU-4 / METEOR-lite / ROUGE-L")
    s.add_argument("--hyps", required=True)
    s.add_argument("--refs", required=True)
    s.add_argument("--model")
    s.add_argument("--cxt", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("compare", help="paired bootstrap comparison of two systems")
    s.add_argument("--hyps-a", required=True)
    s.add_argument("--hyps-b", required=True)
    s.add_argument("--refs", required=True)
    s.add_argument("--resamples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.fn(args)
    except CliError as exc:
        print(f"mhred {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
