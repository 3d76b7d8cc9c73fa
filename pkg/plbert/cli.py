#!/usr/bin/env python3
"""
plbert command line: build-vocab, prepare, train, probe, export.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, validate_checkpoint
from .config import (
    MaskPolicy,
    ModelConfig,
    OovPolicy,
    Precision,
    ProbeConfig,
    TrainConfig,
    build_section,
    load_config,
    resolve_run_config,
)
from .corpus import load_lexicon, prepare_corpus, read_examples, split_records, write_examples
from .errors import ConfigError, DataError, PLBertError
from .normalize import normalize
from .probe import masked_phoneme_eval, probe_eval, probe_train, write_report
from .training import train
from .vocab import GraphemeVocab, PhonemeVocab, build_grapheme_vocab, build_phoneme_vocab, load_vocab, save_vocab

logger = logging.getLogger(__name__)

project_root = Path(__file__).resolve().parent.parent
load_dotenv(project_root / '.env')

PHONEME_VOCAB_FILE = "phonemes.vocab"
GRAPHEME_VOCAB_FILE = "graphemes.vocab"


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERROR: {message}", file=sys.stderr)
        sys.exit(1)


def _read_lines(path: Path) -> List[str]:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, 'r', encoding='utf-8', errors='replace') as f:
        return f.read().splitlines()


def _load_valid_checkpoint(path: Path) -> Checkpoint:
    valid, error = validate_checkpoint(path)
    if not valid:
        raise DataError(f"checkpoint {path} failed validation: {error}")
    return load_checkpoint(path)


def _preset(args) -> dict:
    return load_config(args.config) if getattr(args, 'config', None) else {}


def _model_overrides(args, pvocab_size: int, gvocab_size: int) -> dict:
    return {
        'n_layers': args.n_layers,
        'hidden': args.hidden,
        'intermediate': args.intermediate,
        'heads': args.heads,
        'embed': args.embed,
        'max_len': args.max_len,
        'dropout': args.dropout,
        'precision': args.precision,
        'tie_mlm_weights': True if args.tie_mlm_weights else None,
        'phoneme_vocab_size': pvocab_size,
        'grapheme_vocab_size': gvocab_size,
    }


def _mask_overrides(args) -> dict:
    return {
        'select_prob': args.select_prob,
        'mask_prob': args.mask_prob,
        'random_prob': args.random_prob,
        'keep_prob': args.keep_prob,
    }


def _train_overrides(args) -> dict:
    return {
        'batch_size': args.batch_size,
        'max_steps': args.max_steps,
        'learning_rate': args.learning_rate,
        'warmup_ratio': args.warmup_ratio,
        'weight_decay': args.weight_decay,
        'clip_norm': args.clip_norm,
        'p2g_weight': args.p2g_weight,
        'use_mlm': False if args.no_mlm else None,
        'use_p2g': False if args.no_p2g else None,
        'score_only_msk': True if args.score_only_msk else None,
        'checkpoint_every': args.checkpoint_every,
        'keep_last_n': args.keep_last_n,
    }


def cmd_build_vocab(args) -> int:
    run = resolve_run_config('build-vocab', args.seed, {
        'lexicon': args.lexicon, 'corpus': args.corpus, 'cutoff': args.cutoff, 'out_dir': args.out_dir,
    })
    logger.info("Resolved config: %s", run.to_log_line())

    lexicon = load_lexicon(args.lexicon)
    pvocab = build_phoneme_vocab(lexicon)
    words = (word for line in _read_lines(args.corpus) for word in normalize(line))
    gvocab = build_grapheme_vocab(words, args.cutoff)

    save_vocab(pvocab, args.out_dir / PHONEME_VOCAB_FILE)
    save_vocab(gvocab, args.out_dir / GRAPHEME_VOCAB_FILE)
    print(f"phoneme_vocab={pvocab.size} grapheme_vocab={gvocab.size} out_dir={args.out_dir}")
    return 0


def cmd_prepare(args) -> int:
    run = resolve_run_config('prepare', args.seed, {
        'corpus': args.corpus, 'lexicon': args.lexicon, 'phoneme_vocab': args.phoneme_vocab,
        'grapheme_vocab': args.grapheme_vocab, 'oov_policy': args.oov_policy, 'max_len': args.max_len,
        'workers': args.workers, 'out': args.out,
    })
    logger.info("Resolved config: %s", run.to_log_line())

    lexicon = load_lexicon(args.lexicon)
    pvocab = load_vocab(args.phoneme_vocab, PhonemeVocab.kind)
    gvocab = load_vocab(args.grapheme_vocab, GraphemeVocab.kind)
    records, stats = prepare_corpus(
        _read_lines(args.corpus), lexicon, pvocab, gvocab,
        oov_policy=OovPolicy(args.oov_policy), max_len=args.max_len,
        workers=args.workers, progress=not args.quiet,
    )
    if not records:
        raise DataError(f"no sentence of {args.corpus} survived alignment (OOV rate {stats.oov_rate:.4f})")

    write_examples(records, args.out)
    stats_path = args.out.with_name(args.out.name + ".stats.json")
    with open(stats_path, 'w') as f:
        json.dump(stats.to_dict(), f, indent=2, sort_keys=True)
    print(" ".join(f"{k}={v}" for k, v in stats.to_dict().items()))
    return 0


def cmd_train(args) -> int:
    preset = _preset(args)
    pvocab = load_vocab(args.phoneme_vocab, PhonemeVocab.kind)
    gvocab = load_vocab(args.grapheme_vocab, GraphemeVocab.kind)
    model_config = build_section(ModelConfig, preset, 'model', _model_overrides(args, pvocab.size, gvocab.size))
    mask_policy = build_section(MaskPolicy, preset, 'mask', _mask_overrides(args))
    train_config = build_section(TrainConfig, preset, 'train', _train_overrides(args))
    run = resolve_run_config('train', args.seed, {
        'examples': args.examples, 'out_dir': args.out_dir, 'resume': args.resume,
        'model': model_config.model_dump(mode="json"),
        'mask': mask_policy.model_dump(mode="json"),
        'train': train_config.model_dump(mode="json"),
    })
    logger.info("Resolved config: %s", run.to_log_line())
    if args.resume is not None:
        _load_valid_checkpoint(args.resume)

    records = list(read_examples(args.examples))
    result = train(
        records, model_config, mask_policy, train_config, run.seed, args.out_dir,
        resume_from=args.resume, progress=not args.quiet,
    )
    if result.reports:
        last = result.reports[-1]
        print(f"steps={len(result.reports)} loss_mlm={last.loss_mlm:.6f} loss_p2g={last.loss_p2g:.6f} "
              f"checkpoint={result.final_checkpoint}")
    else:
        print(f"steps=0 checkpoint={result.final_checkpoint}")
    return 0


def cmd_probe(args) -> int:
    preset = _preset(args)
    probe_config = build_section(ProbeConfig, preset, 'probe', {
        'steps': args.steps, 'learning_rate': args.learning_rate, 'eval_ratio': args.eval_ratio,
    })
    mask_policy = build_section(MaskPolicy, preset, 'mask', {})
    run = resolve_run_config('probe', args.seed, {
        'checkpoint': args.checkpoint, 'examples': args.examples, 'report': args.report,
        'mlm_eval': args.mlm_eval, 'probe': probe_config.model_dump(mode="json"),
    })
    logger.info("Resolved config: %s", run.to_log_line())

    checkpoint = _load_valid_checkpoint(args.checkpoint)
    records = list(read_examples(args.examples))
    train_indices, eval_indices = split_records(len(records), probe_config.eval_ratio, run.seed)

    encoder = checkpoint.params.encoder_only()
    probe = probe_train(encoder, records, train_indices, probe_config, run.seed, progress=not args.quiet)
    report = probe_eval(probe, encoder, records, eval_indices, probe_config.batch_size)
    print(report.to_line())

    mlm_report = None
    if args.mlm_eval:
        if not checkpoint.params.has_heads:
            raise ConfigError("--mlm-eval needs a full checkpoint with the MLM head")
        mlm_report = masked_phoneme_eval(
            checkpoint.params, records, eval_indices, mask_policy, run.seed, probe_config.batch_size
        )
        print(mlm_report.to_line())

    if args.report:
        write_report(args.report, report, mlm_report)
    return 0


def cmd_export(args) -> int:
    run = resolve_run_config('export', args.seed, {'checkpoint': args.checkpoint, 'out': args.out})
    logger.info("Resolved config: %s", run.to_log_line())

    checkpoint = _load_valid_checkpoint(args.checkpoint)
    encoder = checkpoint.params.encoder_only()
    save_checkpoint(args.out, encoder)
    print(f"exported {encoder.num_parameters()} encoder parameters to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='Global seed (default: PLBERT_SEED or 0)')
    common.add_argument('--quiet', action='store_true', help='Only log warnings; no progress bars')

    parser = UsageParser(prog='plbert', description='Phoneme-level BERT pre-training and probing')
    subparsers = parser.add_subparsers(dest='command', parser_class=UsageParser)
    subparsers.required = True

    p = subparsers.add_parser('build-vocab', parents=[common], help='Build phoneme and grapheme vocabularies')
    p.add_argument('--lexicon', type=Path, required=True, help='Pronunciation lexicon (word<TAB>phonemes)')
    p.add_argument('--corpus', type=Path, required=True, help='Text corpus, one sentence per line')
    p.add_argument('--cutoff', type=int, default=1, help='Minimum word count for the grapheme vocabulary (default: 1)')
    p.add_argument('--out-dir', type=Path, required=True, help='Directory for the vocabulary files')
    p.set_defaults(func=cmd_build_vocab)

    p = subparsers.add_parser('prepare', parents=[common], help='Normalize, align and write the example file')
    p.add_argument('--corpus', type=Path, required=True)
    p.add_argument('--lexicon', type=Path, required=True)
    p.add_argument('--phoneme-vocab', type=Path, required=True)
    p.add_argument('--grapheme-vocab', type=Path, required=True)
    p.add_argument('--oov-policy', choices=[policy.value for policy in OovPolicy], default=OovPolicy.SKIP_SENTENCE.value)
    p.add_argument('--max-len', type=int, default=512, help='Maximum phonemes per example (default: 512)')
    p.add_argument('--workers', type=int, default=1, help='Alignment worker threads (default: 1)')
    p.add_argument('--out', type=Path, required=True, help='Example file to write')
    p.set_defaults(func=cmd_prepare)

    p = subparsers.add_parser('train', parents=[common], help='Pre-train the encoder with MLM and P2G')
    p.add_argument('--examples', type=Path, required=True)
    p.add_argument('--phoneme-vocab', type=Path, required=True)
    p.add_argument('--grapheme-vocab', type=Path, required=True)
    p.add_argument('--out-dir', type=Path, required=True, help='Checkpoints and metrics.log go here')
    p.add_argument('--config', type=Path, help='YAML preset (model / mask / train sections)')
    p.add_argument('--resume', type=Path, help='Continue from a full checkpoint')
    p.add_argument('--n-layers', type=int)
    p.add_argument('--hidden', type=int)
    p.add_argument('--intermediate', type=int)
    p.add_argument('--heads', type=int)
    p.add_argument('--embed', type=int)
    p.add_argument('--max-len', type=int)
    p.add_argument('--dropout', type=float)
    p.add_argument('--precision', choices=[precision.value for precision in Precision])
    p.add_argument('--tie-mlm-weights', action='store_true', help='Reuse the embeddings as the MLM output layer')
    p.add_argument('--select-prob', type=float)
    p.add_argument('--mask-prob', type=float)
    p.add_argument('--random-prob', type=float)
    p.add_argument('--keep-prob', type=float)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--max-steps', type=int)
    p.add_argument('--learning-rate', type=float)
    p.add_argument('--warmup-ratio', type=float)
    p.add_argument('--weight-decay', type=float)
    p.add_argument('--clip-norm', type=float)
    p.add_argument('--p2g-weight', type=float, help='Weight of the P2G loss (default: 1.0)')
    p.add_argument('--no-mlm', action='store_true', help='Train without the masked phoneme loss')
    p.add_argument('--no-p2g', action='store_true', help='Train without the phoneme-to-grapheme loss')
    p.add_argument('--score-only-msk', action='store_true', help='Score MLM only where <msk> was inserted')
    p.add_argument('--checkpoint-every', type=int)
    p.add_argument('--keep-last-n', type=int, help='Periodic checkpoints to keep (default: 3)')
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser('probe', parents=[common], help='Fit and evaluate a frozen-encoder P2G probe')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--examples', type=Path, required=True)
    p.add_argument('--config', type=Path, help='YAML preset (probe / mask sections)')
    p.add_argument('--eval-ratio', type=float, help='Held-out fraction of records (default: 0.2)')
    p.add_argument('--steps', type=int, help='Probe gradient steps (default: 300)')
    p.add_argument('--learning-rate', type=float)
    p.add_argument('--mlm-eval', action='store_true', help='Also report masked-phoneme accuracy')
    p.add_argument('--report', type=Path, help='Write the report as JSON')
    p.set_defaults(func=cmd_probe)

    p = subparsers.add_parser('export', parents=[common], help='Write an encoder-only checkpoint without heads')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--out', type=Path, required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main function."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )

    try:
        return args.func(args)
    except PLBertError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == '__main__':
    sys.exit(main())
