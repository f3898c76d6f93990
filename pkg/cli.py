"""
Command-line entry point.

    python cli.py train --manifest toy.jsonl --steps 10 --batch-size 8 --seed 1
    python cli.py eval-retrieval --checkpoint runs/train/checkpoints/final --manifest eval.jsonl
    python cli.py eval-zeroshot --checkpoint ... --manifest clips.jsonl --labels esc50.txt --domain sound
    python cli.py gradcheck --B 8 --seed 0
    python cli.py sample-audit --manifest toy.jsonl --draws 4000 --strategy uniform
    python cli.py compare-encoders --manifest train.jsonl --variants small=MEANPOOL_LINEAR:64 large=MEANPOOL_LINEAR:256
    python cli.py compare-losses --manifest train.jsonl
    python cli.py plot-metrics --run-dir runs/train
    python cli.py --config runs/train/run.json train --steps 20

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numeric abort.
"""
from config import apply_thread_cap

apply_thread_cap()

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import fields

import numpy as np

from config import (EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_NUMERIC_ABORT, EXIT_OK, GRADCHECK_TOL,
                    RUN_CONFIG_FILE, RUNS_FOLDER, SAMPLE_AUDIT_TOL)
from data import SamplerState, Strategy, group_frequencies, load_manifest, parse_strategy, sample_batch
from data_manager import RunDataManager, plot_metrics
from encoder_adapter import EncoderKind, EncoderSpec
from errors import ConfigError, GlapError, NumericError
from evaluation import (ZeroShotTask, evaluate_retrieval, per_domain_retrieval, template_for_domain,
                        zero_shot_by_language, zero_shot_classify, zero_shot_report)
from experiments import ExperimentRunner
from loss import LogitForm, infonce_gradcheck, siglip_gradcheck
from model import TextTower, embed_audio, load_checkpoint
from tensor_io import FeatureStore
from train import Trainer, TrainConfig

MULTI_LABEL_SEP = '|'
PLOT_CONFIG_FILE = 'plot_' + RUN_CONFIG_FILE


def setup_logging(log_file):
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True,
    )


# ========================
# Flag plumbing
# ========================

def _str2bool(value):
    if isinstance(value, bool):
        return value
    if value.lower() in ('1', 'true', 'yes', 'on'):
        return True
    if value.lower() in ('0', 'false', 'no', 'off'):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


_OPTIONAL_INT_FIELDS = {'steps', 'audio_input_dim'}


def add_train_flags(parser):
    """One flag per TrainConfig field, named after it."""
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        default = getattr(defaults, f.name)
        if f.name in _OPTIONAL_INT_FIELDS:
            kind = int
        elif isinstance(default, bool):
            kind = _str2bool
        else:
            kind = type(default)
        parser.add_argument('--' + f.name.replace('_', '-'), dest=f.name, type=kind, default=None,
                            help=f"default: {default}")


def train_config_from_args(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return TrainConfig(**overrides)


def build_parser(saved=None):
    """
    saved: a previous run.json. Its values become the defaults of the
    subcommand it was written by, and its required flags become optional.
    """
    saved = saved or {}
    parser = argparse.ArgumentParser(prog='glap', description='Desk-scale contrastive language-audio pretraining')
    parser.add_argument('--config', help=f'{RUN_CONFIG_FILE} of a previous run; its values become defaults')
    sub = parser.add_subparsers(dest='subcommand', required=True)
    subparsers = {}

    def command(name, help):
        subparsers[name] = sub.add_parser(name, help=help)
        return subparsers[name]

    def need(name, dest):
        return not (saved.get('subcommand') == name and dest in saved)

    p = command('train', 'train both towers')
    p.add_argument('--manifest', required=need('train', 'manifest'))
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'train'))
    add_train_flags(p)

    p = command('eval-retrieval', 'text-to-audio and audio-to-text retrieval')
    p.add_argument('--checkpoint', required=need('eval-retrieval', 'checkpoint'))
    p.add_argument('--manifest', required=need('eval-retrieval', 'manifest'))
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'eval_retrieval'))
    p.add_argument('--per-domain', action='store_true')

    p = command('eval-zeroshot', 'zero-shot classification with domain prompts')
    p.add_argument('--checkpoint', required=need('eval-zeroshot', 'checkpoint'))
    p.add_argument('--manifest', required=need('eval-zeroshot', 'manifest'),
                   help='clips whose caption is the true label (| separated if multi-label)')
    p.add_argument('--labels', required=need('eval-zeroshot', 'labels'), help='one label per line')
    p.add_argument('--domain', required=need('eval-zeroshot', 'domain'))
    p.add_argument('--multi-label', action='store_true')
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'eval_zeroshot'))

    p = command('gradcheck', 'finite-difference check of the loss gradients')
    p.add_argument('--B', dest='B', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--form', default=LogitForm.SIGLIP_CONSISTENT.value, choices=[f.value for f in LogitForm])
    p.add_argument('--loss', default='sigmoid', choices=['sigmoid', 'infonce'])
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'gradcheck'))

    p = command('sample-audit', 'per-group frequencies of the balanced sampler')
    p.add_argument('--manifest', required=need('sample-audit', 'manifest'))
    p.add_argument('--draws', type=int, default=4000)
    p.add_argument('--batch-size', type=int, default=8)
    p.add_argument('--strategy', default='uniform')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'sample_audit'))

    p = command('compare-encoders', 'train once per audio encoder and compare mAP10 per domain')
    p.add_argument('--manifest', required=need('compare-encoders', 'manifest'))
    p.add_argument('--eval-manifest')
    p.add_argument('--variants', nargs='+', required=need('compare-encoders', 'variants'),
                   help='name=KIND[:output_dim]')
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'compare_encoders'))
    add_train_flags(p)

    p = command('compare-losses', 'sigmoid vs InfoNCE on the same data and seed')
    p.add_argument('--manifest', required=need('compare-losses', 'manifest'))
    p.add_argument('--eval-manifest')
    p.add_argument('--out', default=os.path.join(RUNS_FOLDER, 'compare_losses'))
    add_train_flags(p)

    p = command('plot-metrics', 'plot loss, lr, tau and beta from a run directory')
    p.add_argument('--run-dir', required=need('plot-metrics', 'run_dir'))
    p.add_argument('--out')

    name = saved.get('subcommand')
    if name is not None:
        if name not in subparsers:
            raise ConfigError(f"saved config names an unknown subcommand {name!r}")
        known = {a.dest for a in subparsers[name]._actions}
        unknown = sorted(set(saved) - known - {'subcommand'})
        if unknown:
            raise ConfigError(f"saved config has unknown key(s) {', '.join(unknown)}")
        subparsers[name].set_defaults(**{k: v for k, v in saved.items() if k != 'subcommand'})
    return parser


def load_run_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, 'rb') as fh:
        try:
            return json.loads(fh.read().decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from None


def parse_args(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    known, _ = pre.parse_known_args(argv)
    saved = load_run_config(known.config) if known.config else None
    args = build_parser(saved).parse_args(argv)
    if saved and saved.get('subcommand') != args.subcommand:
        raise ConfigError(f"{known.config} is a {saved.get('subcommand')!r} run, not {args.subcommand!r}")
    return args


def write_run_config(dm: RunDataManager, args, resolved=None):
    payload = {k: v for k, v in vars(args).items() if k != 'config'}
    if resolved:
        payload.update(resolved)
    return dm.save_run_config(payload)


# ========================
# Subcommands
# ========================

def cmd_train(args):
    records = load_manifest(args.manifest)
    dm = RunDataManager(args.out)
    dm.reset_metrics()
    trainer = Trainer(records, train_config_from_args(args), FeatureStore(), dm)
    write_run_config(dm, args, trainer.cfg.to_dict())
    trainer.run()
    return EXIT_OK


def print_retrieval(reports):
    print("\n" + "=" * 72)
    print(f"{'Direction':<16} {'R@1':>8} {'R@5':>8} {'R@10':>8} {'mAP10':>8} {'Queries':>9}")
    print("-" * 72)
    for r in reports:
        print(f"{r.direction:<16} {r.r1:>8.4f} {r.r5:>8.4f} {r.r10:>8.4f} {r.map10:>8.4f} {r.n_queries:>9}")
    print("=" * 72)


def cmd_eval_retrieval(args):
    dm = RunDataManager(args.out)
    write_run_config(dm, args)
    records = load_manifest(args.manifest)
    if not records:
        raise ConfigError(f"manifest is empty: {args.manifest}")
    params = load_checkpoint(args.checkpoint)
    store = FeatureStore()
    reports = evaluate_retrieval(params, records, store)
    dm.save_report('retrieval.json', [r.to_dict() for r in reports])
    print_retrieval(reports)
    if args.per_domain:
        by_domain = per_domain_retrieval(params, records, store)
        dm.save_report('retrieval_by_domain.json',
                       {d: [r.to_dict() for r in pair] for d, pair in by_domain.items()})
    return EXIT_OK


def read_labels(path):
    if not os.path.exists(path):
        raise ConfigError(f"label file not found: {path}")
    with open(path, 'rb') as fh:
        blob = fh.read()
    try:
        text = blob.decode('utf-8')
    except UnicodeDecodeError as e:
        line_no = blob[:e.start].count(b'\n') + 1
        raise ConfigError(f"{path}: line {line_no}: invalid UTF-8") from None
    labels = [line.strip() for line in text.splitlines() if line.strip()]
    if not labels:
        raise ConfigError(f"label file is empty: {path}")
    return labels


def zero_shot_truth(records, labels, multi_label):
    """Class index per record, or a 0/1 matrix for multi-label tasks."""
    index = {label: k for k, label in enumerate(labels)}
    if multi_label:
        truth = np.zeros((len(records), len(labels)), dtype=np.int8)
        for i, r in enumerate(records):
            for label in (part.strip() for part in r.caption.split(MULTI_LABEL_SEP)):
                if label not in index:
                    raise ConfigError(f"record {r.id!r}: label {label!r} not in label file")
                truth[i, index[label]] = 1
        return truth
    missing = [r.id for r in records if r.caption not in index]
    if missing:
        raise ConfigError(f"record(s) with labels outside the label file: {', '.join(missing[:5])}")
    return np.array([index[r.caption] for r in records])


def cmd_eval_zeroshot(args):
    dm = RunDataManager(args.out)
    write_run_config(dm, args)
    template = template_for_domain(args.domain)
    labels = read_labels(args.labels)
    records = load_manifest(args.manifest)
    if not records:
        raise ConfigError(f"manifest is empty: {args.manifest}")
    params = load_checkpoint(args.checkpoint)

    task = ZeroShotTask(tuple(labels), args.domain, template, args.multi_label,
                        name=os.path.splitext(os.path.basename(args.labels))[0])
    truth = zero_shot_truth(records, labels, args.multi_label)
    audio = embed_audio(records, params, FeatureStore())
    result = zero_shot_classify(audio, task, TextTower(params))

    report = zero_shot_report(task, result, truth)
    dm.save_report('zeroshot.json', report)
    dm.save_report('prompts.json', {'domain': task.domain.value, 'prompts': task.prompts()})
    if not args.multi_label:
        by_language = zero_shot_by_language(result.predictions, truth, [r.language for r in records])
        dm.save_report('zeroshot_by_language.json', by_language.to_dict(orient='records'))
    metric = 'map' if args.multi_label else 'accuracy'
    print(f"Zero-shot {task.name} ({task.domain.value}): {metric} = {report[metric]:.4f} "
          f"over {report['n_items']} items, {report['n_labels']} labels")
    return EXIT_OK


def cmd_gradcheck(args):
    dm = RunDataManager(args.out)
    write_run_config(dm, args)
    if args.loss == 'infonce':
        error = infonce_gradcheck(args.B, args.seed)
    else:
        error = siglip_gradcheck(args.B, args.seed, LogitForm(args.form))
    passed = error < GRADCHECK_TOL
    dm.save_report('gradcheck.json', {'B': args.B, 'seed': args.seed, 'form': args.form, 'loss': args.loss,
                                      'max_rel_error': error, 'passed': passed})
    print(f"gradcheck B={args.B} seed={args.seed} {args.loss}/{args.form}: max relative error {error:.3e} "
          f"({'OK' if passed else 'FAILED'})")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def audit_failures(strategy, table, batches, records, batch_size):
    failures = []
    if strategy is Strategy.PER_EXAMPLE_UNIFORM:
        for row in table.itertuples():
            if abs(row.frequency - 0.25) > SAMPLE_AUDIT_TOL:
                failures.append(f"{row.group} frequency {row.frequency:.4f} outside 0.25 +/- {SAMPLE_AUDIT_TOL}")
        return failures
    base = batch_size // 4
    for k, batch in enumerate(batches):
        counts = group_frequencies([batch], records)['count']
        if counts.min() < base or counts.max() > base + 1 or counts.sum() != batch_size:
            failures.append(f"batch {k} group counts {counts.tolist()}")
    return failures


def cmd_sample_audit(args):
    dm = RunDataManager(args.out)
    write_run_config(dm, args)
    strategy = parse_strategy(args.strategy)
    records = load_manifest(args.manifest)
    state = SamplerState.from_records(records, args.seed, strategy)
    state.check()

    batches = []
    for _ in range(math.ceil(args.draws / args.batch_size)):
        ids, state = sample_batch(state, args.batch_size)
        batches.append(ids)
    drawn = [i for batch in batches for i in batch][:args.draws]
    table = group_frequencies([drawn], records)
    failures = audit_failures(strategy, table, batches, records, args.batch_size)

    print("\n" + "=" * 48)
    print(f"SAMPLE AUDIT - {strategy.value} | draws {len(drawn)} | B {args.batch_size}")
    print("-" * 48)
    print(table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))
    print("=" * 48)
    dm.save_report('sample_audit.json', {'strategy': strategy.value, 'draws': len(drawn),
                                         'groups': table.to_dict(orient='records'), 'failures': failures})
    for failure in failures:
        logging.error(failure)
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def parse_variant(text):
    """'name=KIND[:output_dim]'"""
    name, sep, body = text.partition('=')
    if not sep or not name:
        raise ConfigError(f"encoder variant must look like name=KIND[:dim], got {text!r}")
    kind, _, dim = body.partition(':')
    try:
        return name, EncoderKind(kind), int(dim) if dim else None
    except ValueError:
        raise ConfigError(f"bad encoder variant {text!r}") from None


def _comparison_runner(args):
    records = load_manifest(args.manifest)
    eval_records = load_manifest(args.eval_manifest) if args.eval_manifest else None
    return ExperimentRunner(records, train_config_from_args(args), FeatureStore(), eval_records)


def cmd_compare_encoders(args):
    dm = RunDataManager(args.out)
    runner = _comparison_runner(args)
    write_run_config(dm, args, runner.cfg.to_dict())
    cfg = runner.cfg
    encoders = {}
    for text in args.variants:
        name, kind, dim = parse_variant(text)
        if kind is EncoderKind.PASSTHROUGH:
            encoders[name] = EncoderSpec(kind, cfg.audio_input_dim, cfg.audio_input_dim, trainable=False)
        else:
            encoders[name] = EncoderSpec(kind, cfg.audio_input_dim, dim or cfg.audio_encoder_dim,
                                         cfg.encoders_trainable)
    table = runner.run_encoder_comparison(encoders)
    dm.save_table('encoder_comparison.csv', table)
    runner.generate_consolidated_report()
    return EXIT_OK


def cmd_compare_losses(args):
    dm = RunDataManager(args.out)
    runner = _comparison_runner(args)
    write_run_config(dm, args, runner.cfg.to_dict())
    table = runner.run_loss_comparison()
    dm.save_table('loss_comparison.csv', table)
    runner.generate_consolidated_report()
    return EXIT_OK


def cmd_plot_metrics(args):
    dm = RunDataManager(args.run_dir)
    dm.save_report(PLOT_CONFIG_FILE, {k: v for k, v in vars(args).items() if k != 'config'})
    metrics = dm.load_metrics()
    if metrics.empty:
        raise ConfigError(f"no metrics logged in {args.run_dir}")
    output = args.out or dm.get_report_filename('metrics.png')
    plot_metrics(metrics, output)
    print(f"Saved plot: {output}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'eval-retrieval': cmd_eval_retrieval,
    'eval-zeroshot': cmd_eval_zeroshot,
    'gradcheck': cmd_gradcheck,
    'sample-audit': cmd_sample_audit,
    'compare-encoders': cmd_compare_encoders,
    'compare-losses': cmd_compare_losses,
    'plot-metrics': cmd_plot_metrics,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except GlapError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    dm = RunDataManager(args.run_dir if args.subcommand == 'plot-metrics' else args.out)
    setup_logging(dm.get_log_filename())

    try:
        return COMMANDS[args.subcommand](args)
    except NumericError as e:
        logging.error(f"Numeric abort: {e}")
        return EXIT_NUMERIC_ABORT
    except GlapError as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
