"""Command-line entry point: ``invertext <subcommand> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import STRENGTHS, PasswordSpec, generate_passwords, generate_synthetic_corpus, load_jsonl_corpus, split, write_corpus_jsonl
from .defense import KINDS as DEFENSE_KINDS
from .defense import DefenseConfig, absmax_quantize, apply_defense, zeropoint_quantize
from .encoder import ToyEncoder, load_encoder
from .experiments import PARAM_SWEEP, ExperimentConfig, run_experiment, verify, write_results
from .inversion import InversionConfig, invert
from .text import CHAR, WORD, Vocabulary
from .training import (AugmentConfig, ModelConfig, TrainingConfig, augment_texts, load_checkpoint,
                       make_correction_dataset, save_checkpoint, train_base, train_corrector)

log = logging.getLogger("invertext")


def _config(args) -> dict:
    return json.loads(Path(args.config).read_text()) if args.config else {}


def _section(cfg: dict, key: str, cls):
    return cls.from_dict(cfg.get(key, {}))


def _training_sections(args):
    cfg = _config(args)
    extra = set(cfg) - {"training", "model", "augmentation"}
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    train = _section(cfg, "training", TrainingConfig)
    if args.seed is not None:
        train = TrainingConfig(**{**train.__dict__, "seed": args.seed})
    return train, _section(cfg, "model", ModelConfig), _section(cfg, "augmentation", AugmentConfig)


def cmd_datagen(args) -> int:
    out = Path(args.out)
    seed = args.seed or 0
    if args.kind == "synthetic":
        corpus = generate_synthetic_corpus(seed, args.size, args.vocab_size, args.len_min, args.len_max,
                                           id_prefix=args.id_prefix)
        write_corpus_jsonl(corpus, out / "corpus.jsonl")
        for part in split(corpus, seed=seed):
            write_corpus_jsonl(part, out / f"{part.provenance['split']}.jsonl")
    elif args.kind == "passwords":
        for strength in STRENGTHS:
            corpus = generate_passwords(PasswordSpec(strength, args.size, seed))
            write_corpus_jsonl(corpus, out / f"passwords-{strength.lower()}.jsonl")
    else:
        if not args.corpora:
            raise ValueError("--corpora is required to build an encoder vocabulary")
        texts = [t for p in args.corpora for t in load_jsonl_corpus(p, token_mode=args.mode).texts]
        enc = ToyEncoder(Vocabulary.build(texts, args.mode), args.dim, args.max_tokens, seed, args.mode)
        enc.save(out / "encoder.json")
    print(f"wrote {out}")
    return 0


def cmd_train_base(args) -> int:
    train, mcfg, aug = _training_sections(args)
    encoder = load_encoder(args.encoder)
    corpus = load_jsonl_corpus(args.corpus, token_mode=encoder.token_mode)
    vocab = Vocabulary.build(corpus.texts, encoder.token_mode)
    texts = augment_texts(corpus.texts, vocab, encoder.token_mode, aug.base_copies, aug.target_max_edits,
                          aug.seed, mcfg.max_len)
    out = Path(args.out)
    base, report = train_base(texts, encoder, train, mcfg, vocab, encoder.token_mode, out / "train_log.jsonl")
    base.meta["augmentation"] = aug.__dict__
    save_checkpoint(base, out)
    print(json.dumps({"initial_val_loss": report.initial_val_loss, "final_val_loss": report.final_val_loss}))
    return 0


def cmd_train_corrector(args) -> int:
    train, mcfg, aug = _training_sections(args)
    encoder = load_encoder(args.encoder)
    base = load_checkpoint(args.base)
    corpus = load_jsonl_corpus(args.corpus, token_mode=encoder.token_mode)
    targets = augment_texts(corpus.texts, base.vocab, encoder.token_mode, aug.corrector_copies,
                            aug.target_max_edits, aug.seed + 1, base.max_len,
                            keep_originals=aug.corrector_copies == 0)
    examples, skipped = make_correction_dataset(base, encoder, targets, seed=aug.seed,
                                                edits_per_text=aug.edit_hypotheses,
                                                max_edits=aug.hypothesis_max_edits)
    out = Path(args.out)
    corrector, report = train_corrector(examples, base.vocab, encoder.dim, train, mcfg, encoder.token_mode,
                                        out / "train_log.jsonl")
    corrector.meta["augmentation"] = aug.__dict__
    save_checkpoint(corrector, out)
    print(json.dumps({"examples": len(examples), "skipped": skipped,
                      "initial_val_loss": report.initial_val_loss, "final_val_loss": report.final_val_loss}))
    return 0


def _target_embedding(args, encoder) -> np.ndarray:
    if args.embedding:
        return np.asarray(json.loads(Path(args.embedding).read_text()), dtype=np.float64)
    return encoder.encode(args.text)


def cmd_invert(args) -> int:
    encoder = load_encoder(args.encoder)
    base = load_checkpoint(args.base)
    corrector = load_checkpoint(args.corrector, vocab=base.vocab) if args.corrector else None
    cfg = InversionConfig.from_dict(_config(args).get("inversion", {}))
    if args.seed is not None:
        cfg = InversionConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    result = invert(corrector, base, encoder, _target_embedding(args, encoder), cfg)
    print(json.dumps({"text": result.best_text, "cosine": result.best_cosine, "steps_run": result.steps_run,
                      "encoder_calls": result.encoder_calls, "trace": result.trace,
                      "warnings": result.warnings}, indent=1))
    return 0


def cmd_defend(args) -> int:
    encoder = load_encoder(args.encoder) if args.encoder else None
    if args.embedding:
        emb = np.asarray(json.loads(Path(args.embedding).read_text()), dtype=np.float64)
    elif encoder is not None and args.text:
        emb = encoder.encode(args.text)
    else:
        raise ValueError("give --embedding, or --encoder with --text")
    cfg = DefenseConfig(args.kind, args.noise_scale, args.seed or 0)
    out = {"defense": cfg.to_dict(), "embedding": apply_defense(cfg, emb).tolist()}
    if args.kind == "absmax":
        out["quantized"] = absmax_quantize(emb).to_record()
    elif args.kind == "zeropoint":
        out["quantized"] = zeropoint_quantize(emb).to_record()
    print(json.dumps(out))
    return 0


def _run(args, force_kind: str | None = None) -> int:
    if not args.config:
        raise ValueError("--config is required")
    raw = _config(args)
    if force_kind:
        raw.setdefault("kind", force_kind)
        if raw["kind"] != force_kind:
            raise ValueError(f"sweep needs kind {force_kind!r}, config has {raw['kind']!r}")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["output_dir"] = args.out
    cfg = ExperimentConfig.from_dict(raw)
    result = run_experiment(cfg)
    manifest = write_results(result)
    reports, _ = result.summary()
    print(json.dumps(reports, indent=1, sort_keys=True))
    print(f"manifest: {manifest}")
    return 0


def cmd_eval(args) -> int:
    return _run(args)


def cmd_sweep(args) -> int:
    return _run(args, PARAM_SWEEP)


def cmd_verify(args) -> int:
    target = args.dir or args.out
    if not target:
        raise ValueError("give a results directory")
    problems = verify(target)
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} discrepancies")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="invertext", parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common], help="generate corpora or a toy encoder")
    p.add_argument("--kind", choices=["synthetic", "passwords", "encoder"], default="synthetic")
    p.add_argument("--size", type=int, default=2000, help="texts (or passwords per strength)")
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--len-min", type=int, default=4)
    p.add_argument("--len-max", type=int, default=16)
    p.add_argument("--id-prefix", default="syn")
    p.add_argument("--corpora", nargs="*", help="corpora whose tokens form the encoder vocabulary")
    p.add_argument("--mode", choices=[WORD, CHAR], default=WORD)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--max-tokens", type=int, default=32)
    p.set_defaults(func=cmd_datagen)

    for name, func, help_ in (("train-base", cmd_train_base, "train the base model"),
                              ("train-corrector", cmd_train_corrector, "train the corrector")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--corpus", required=True)
        p.add_argument("--encoder", required=True)
        if name == "train-corrector":
            p.add_argument("--base", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("invert", parents=[common], help="invert one embedding")
    p.add_argument("--encoder", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--corrector")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="encode this text and invert it")
    src.add_argument("--embedding", help="JSON file holding a vector")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("defend", parents=[common], help="apply a defense to one embedding")
    p.add_argument("--kind", choices=DEFENSE_KINDS, required=True)
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--encoder")
    p.add_argument("--text")
    p.add_argument("--embedding")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("eval", parents=[common], help="run an experiment config")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("sweep", parents=[common], help="run a steps x beam sweep config")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("verify", parents=[common], help="audit a results directory")
    p.add_argument("dir", nargs="?")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
