"""
Argument parsing for the sbat command line
"""

import argparse
from typing import List

from config.constants import Constants
from core.exceptions import UsageError
from utils.enums import LogLevel, PatienceMetric, Variant


COMMANDS = ('generate-data', 'train', 'caption', 'eval', 'export-attention',
            'analyze-weights', 'sweep-alpha', 'ablate')


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(message)


def float_list(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one number")
    return values


def variant_list(text: str) -> List[Variant]:
    try:
        return [Variant(part.strip()) for part in text.split(',') if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _add_seed(parser: argparse.ArgumentParser, default: int = 0):
    parser.add_argument('--seed', type=int, default=None,
                        help=f"Seed for data, initialisation and shuffling (default: {default})")


def _add_model_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('model')
    group.add_argument('--variant', type=Variant, choices=list(Variant), default=None,
                       metavar='{' + ','.join(v.value for v in Variant) + '}', help="Ablation variant")
    group.add_argument('--alpha-enc', type=float, default=None, help="Mixing coefficient at encoder sites")
    group.add_argument('--n-enc', type=int, default=None, help="Encoder selection budget")
    group.add_argument('--n-dec', type=int, default=None, help="Decoder enc-dec selection budget")
    group.add_argument('--r', type=int, default=None, help="Local correlation radius (-1 disables)")
    group.add_argument('--d-model', type=int, default=None, help="Hidden size")
    group.add_argument('--heads', type=int, default=None, help="Attention heads")
    group.add_argument('--blocks', type=int, default=None, help="Encoder and decoder depth")
    group.add_argument('--dropout', type=float, default=None, help="Dropout rate while training (0 disables)")


def _add_train_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('training')
    group.add_argument('--max-epochs', type=int, default=None, help="Number of epochs")
    group.add_argument('--batch-size', type=int, default=None, help="Samples per optimizer step")
    group.add_argument('--lr-initial', type=float, default=None, help="Learning rate before the drop")
    group.add_argument('--lr-drop', type=float, default=None, help="Learning rate after the drop")
    group.add_argument('--patience-epochs', type=int, default=None, help="Stagnant epochs before the drop")
    group.add_argument('--metric-for-patience', type=PatienceMetric, choices=list(PatienceMetric), default=None,
                       metavar='{' + ','.join(m.value for m in PatienceMetric) + '}',
                       help="Validation metric that drives the drop")


def build_parser() -> CommandParser:
    parser = CommandParser(prog='sbat', description="Sparse boundary-aware transformer captioner")
    parser.add_argument('--version', action='version', version=f"%(prog)s {Constants.VERSION}")
    parser.add_argument('--log-level', type=str.lower, choices=[level.value for level in LogLevel], default=None,
                        help="Console and file log level")
    parser.add_argument('--log-file', default=None, help="Log file (default: platform log directory)")
    commands = parser.add_subparsers(dest='command', metavar='{' + ','.join(COMMANDS) + '}')
    commands.required = True

    gen = commands.add_parser('generate-data', help="Write a synthetic scenario dataset")
    gen.add_argument('--count', type=int, default=100)
    gen.add_argument('--T', type=int, default=32, dest='T')
    gen.add_argument('--k-min', type=int, default=2)
    gen.add_argument('--k-max', type=int, default=5)
    gen.add_argument('--d-feat', type=int, default=32)
    gen.add_argument('--sigma', type=float, default=0.05)
    gen.add_argument('--split-ratios', type=float_list, default=list(Constants.DEFAULT_SPLIT_RATIOS))
    gen.add_argument('--num-scenes', type=int, default=Constants.DEFAULT_NUM_SCENES)
    gen.add_argument('--out-dir', required=True)
    _add_seed(gen)

    train = commands.add_parser('train', help="Train a model and keep the best validation checkpoint")
    train.add_argument('--config', default=None, help="JSON config file or run manifest")
    train.add_argument('--data-dir', required=True)
    train.add_argument('--out-dir', required=True)
    _add_model_flags(train)
    _add_train_flags(train)
    _add_seed(train)

    caption = commands.add_parser('caption', help="Beam-search captions for a dataset file")
    caption.add_argument('--checkpoint', required=True)
    caption.add_argument('--data', required=True)
    caption.add_argument('--beam-width', type=int, default=5)
    caption.add_argument('--max-len', type=int, default=None)
    caption.add_argument('--record-id', default=None)
    _add_seed(caption)

    evaluate = commands.add_parser('eval', help="Print token accuracy, loss and BLEU-4 as metric=value lines")
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True)
    evaluate.add_argument('--beam-width', type=int, default=5)
    evaluate.add_argument('--max-len', type=int, default=None)
    _add_seed(evaluate)

    export = commands.add_parser('export-attention', help="Write encoder self-attention heatmaps of one record")
    export.add_argument('--checkpoint', required=True)
    export.add_argument('--data', required=True)
    export.add_argument('--record-id', default=None)
    export.add_argument('--out-dir', required=True)
    export.add_argument('--no-local', action='store_true', help="Blank weights admitted only by the local band")
    _add_seed(export)

    analyze = commands.add_parser('analyze-weights', help="Check the pooling inequalities on random configurations")
    analyze.add_argument('--samples', type=int, default=10000)
    analyze.add_argument('--out', default=None)
    _add_seed(analyze)

    sweep = commands.add_parser('sweep-alpha', help="Train once per encoder alpha")
    sweep.add_argument('--alphas', type=float_list, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    sweep.add_argument('--config', default=None)
    sweep.add_argument('--data-dir', required=True)
    sweep.add_argument('--out', required=True)
    _add_model_flags(sweep)
    _add_train_flags(sweep)
    _add_seed(sweep)

    ablate = commands.add_parser('ablate', help="Train every variant under one budget")
    ablate.add_argument('--variants', type=variant_list, default=list(Variant))
    ablate.add_argument('--config', default=None)
    ablate.add_argument('--data-dir', required=True)
    ablate.add_argument('--out', required=True)
    ablate.add_argument('--beam-width', type=int, default=5)
    _add_model_flags(ablate)
    _add_train_flags(ablate)
    _add_seed(ablate)

    return parser
