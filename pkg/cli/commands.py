"""
Command handlers; each returns a process exit code
"""

import argparse
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, Field

from config.app_config import ModelConfig, RunSettings, TrainConfig
from config.config_manager import ConfigManager
from config.constants import Constants
from core.analysis import ablation_table, corpus_bleu4, sweep_alpha, verify_inequalities
from core.checkpoint import load_checkpoint
from core.exceptions import TrainingError, UsageError
from core.inference import beam_search, export_attention, find_record
from core.model import SBATModel
from core.synthdata import CaptionRecord, Vocabulary, gen_dataset, load_dataset, load_split
from core.training import Trainer, evaluate
from utils.enums import Variant
from utils.logger import LogManager


MODEL_FLAGS = {
    'variant': 'variant',
    'alpha_enc': 'alpha_enc',
    'n_enc': 'n_enc',
    'n_dec': 'n_dec',
    'r': 'r',
    'd_model': 'd_model',
    'heads': 'heads',
    'blocks': 'blocks',
    'dropout': 'dropout',
}

TRAIN_FLAGS = {
    'max_epochs': 'max_epochs',
    'batch_size': 'batch_size',
    'lr_initial': 'lr_initial',
    'lr_drop': 'lr_drop',
    'patience_epochs': 'patience_epochs',
    'metric_for_patience': 'metric_for_patience',
    'seed': 'seed',
}

VANILLA_RADIUS_CONFLICT = "--variant vanilla conflicts with --r (vanilla attention has no local band)"


class RunManifest(BaseModel):
    """Everything needed to repeat a run: command, resolved config, seed, artifacts, version"""

    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    artifacts: Dict[str, str] = Field(default_factory=dict)
    version: str = Constants.VERSION

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.model_dump(mode='json'), f, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"Run manifest written to {path}")
        return path


def _seed(args: argparse.Namespace) -> int:
    return args.seed if args.seed is not None else 0


def _flag_values(args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, Any]:
    return {field: getattr(args, dest) for dest, field in mapping.items() if getattr(args, dest, None) is not None}


def _load_training_data(data_dir: Path) -> Tuple[List[CaptionRecord], List[CaptionRecord], Vocabulary]:
    data_dir = Path(data_dir)
    train_set = load_split(data_dir, 'train')
    val_set = load_split(data_dir, 'val')
    if not train_set:
        raise TrainingError(f"No training records in {data_dir}")
    vocab_path = data_dir / Constants.VOCAB_FILE
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.from_records(train_set + val_set)
    return train_set, val_set, vocab


def check_flag_conflicts(args: argparse.Namespace):
    """Reject flag combinations before any file is read"""
    if args.variant == Variant.VANILLA and args.r is not None:
        raise UsageError(VANILLA_RADIUS_CONFLICT)


def resolve_run_config(args: argparse.Namespace, train_set: Sequence[CaptionRecord],
                       vocab: Vocabulary) -> Tuple[ModelConfig, TrainConfig]:
    """defaults < config file < data-derived sizes < flags"""
    manager = ConfigManager(args.config)
    model_overrides: Dict[str, Any] = {}
    file_model = manager.file_data.get('model', {})
    if 'vocab_size' not in file_model:
        model_overrides['vocab_size'] = vocab.size
    if 'feature_dim' not in file_model:
        model_overrides['feature_dim'] = train_set[0].d_feat
    model_overrides.update(_flag_values(args, MODEL_FLAGS))

    model_cfg, train_cfg = manager.resolve(model_overrides, _flag_values(args, TRAIN_FLAGS))
    if model_cfg.variant == Variant.VANILLA and args.r is not None:
        # variant came from the config file
        raise UsageError(VANILLA_RADIUS_CONFLICT)
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def cmd_generate_data(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    out_dir = Path(args.out_dir)
    seed = _seed(args)
    RunManifest(
        command='generate-data',
        config={'data': {
            'count': args.count, 'T': args.T, 'k_min': args.k_min, 'k_max': args.k_max,
            'd_feat': args.d_feat, 'sigma': args.sigma, 'split_ratios': args.split_ratios,
            'num_scenes': args.num_scenes,
        }},
        seed=seed,
        artifacts={split: str(out_dir / name) for split, name in Constants.SPLIT_FILES.items()},
    ).write(out_dir / Constants.RUN_MANIFEST_FILE)
    gen_dataset(out_dir, args.count, args.split_ratios, args.T, (args.k_min, args.k_max),
                args.d_feat, args.sigma, seed, args.num_scenes)
    logger.success(f"Dataset written to {out_dir}")
    return Constants.EXIT_CODES['ok']


def cmd_train(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    out_dir = Path(args.out_dir)
    check_flag_conflicts(args)
    train_set, val_set, vocab = _load_training_data(Path(args.data_dir))
    model_cfg, train_cfg = resolve_run_config(args, train_set, vocab)

    RunManifest(
        command='train',
        config=ConfigManager.as_dict(model_cfg, train_cfg),
        seed=train_cfg.seed,
        artifacts={
            'data_dir': str(args.data_dir),
            'checkpoint': str(out_dir / f"{Constants.CHECKPOINT_STEM}{Constants.MANIFEST_SUFFIX}"),
            'train_log': str(out_dir / Constants.TRAIN_LOG_FILE),
        },
    ).write(out_dir / Constants.RUN_MANIFEST_FILE)
    ConfigManager.save_config(out_dir / Constants.RESOLVED_CONFIG_FILE, ConfigManager.as_dict(model_cfg, train_cfg))
    log_manager.add_run_log(out_dir / 'train.log')

    model = SBATModel(model_cfg, seed=train_cfg.seed)
    result = Trainer(model, train_cfg, out_dir, settings.threads).train(train_set, val_set)
    final = result.final
    logger.success(f"Best epoch {result.best_epoch}; final val_token_accuracy={final.val_token_accuracy:.4f}")
    return Constants.EXIT_CODES['ok']


def _max_len(model: SBATModel, requested: Optional[int]) -> int:
    return requested if requested is not None else model.cfg.max_tgt_len - 1


def cmd_caption(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    records = load_dataset(Path(args.data))
    if args.record_id is not None:
        records = [find_record(records, args.record_id)]
    vocab = Vocabulary.for_size(model.cfg.vocab_size)
    for record in records:
        tokens = beam_search(model, record, args.beam_width, _max_len(model, args.max_len))
        print(f"{record.id}\t{' '.join(vocab.decode(tokens))}")
    return Constants.EXIT_CODES['ok']


def cmd_eval(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    records = load_dataset(Path(args.data))
    if not records:
        raise TrainingError(f"No records in {args.data}")
    scores = evaluate(model, records)
    bleu = corpus_bleu4(model, records, args.beam_width, _max_len(model, args.max_len))
    print(f"token_accuracy={scores.token_accuracy:.6f}")
    print(f"bleu4={bleu:.6f}")
    print(f"loss={scores.loss:.6f}")
    return Constants.EXIT_CODES['ok']


def cmd_export_attention(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    record = find_record(load_dataset(Path(args.data)), args.record_id)
    written = export_attention(model, record, Path(args.out_dir), include_local=not args.no_local)
    logger.success(f"Wrote {len(written)} files to {args.out_dir}")
    return Constants.EXIT_CODES['ok']


def cmd_analyze_weights(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    if args.samples < 1:
        raise UsageError(f"--samples must be >= 1, got {args.samples}")
    report = verify_inequalities(args.samples, _seed(args))
    if args.out:
        report.write(Path(args.out))
    for row in report.rows():
        print(f"{row['check']}: passed={row['passed']} failed={row['failed']} ties={row['ties']}")
    print(f"failures={report.failures}")
    return Constants.EXIT_CODES['ok'] if report.ok else Constants.EXIT_CODES['runtime']


def _sweep_setup(args: argparse.Namespace, command: str, settings: RunSettings):
    check_flag_conflicts(args)
    train_set, val_set, vocab = _load_training_data(Path(args.data_dir))
    model_cfg, train_cfg = resolve_run_config(args, train_set, vocab)
    out = Path(args.out)
    RunManifest(
        command=command,
        config=ConfigManager.as_dict(model_cfg, train_cfg),
        seed=train_cfg.seed,
        artifacts={'data_dir': str(args.data_dir), 'report': str(out)},
    ).write(out.parent / Constants.RUN_MANIFEST_FILE)
    return train_set, val_set, model_cfg, train_cfg


def cmd_sweep_alpha(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    train_set, val_set, model_cfg, train_cfg = _sweep_setup(args, 'sweep-alpha', settings)
    rows = sweep_alpha(model_cfg, train_cfg, train_set, val_set, args.alphas, Path(args.out), settings.threads)
    for row in rows:
        print(f"alpha_enc={row['alpha_enc']:g} val_loss={row['val_loss']:.6f} "
              f"val_token_accuracy={row['val_token_accuracy']:.6f}")
    return Constants.EXIT_CODES['ok']


def cmd_ablate(args: argparse.Namespace, settings: RunSettings, log_manager: LogManager) -> int:
    train_set, val_set, model_cfg, train_cfg = _sweep_setup(args, 'ablate', settings)
    rows = ablation_table(model_cfg, train_cfg, train_set, val_set, args.variants, args.beam_width,
                          Path(args.out), settings.threads)
    for row in rows:
        print(f"{row['variant']:<14} val_loss={row['val_loss']:.6f} "
              f"val_token_accuracy={row['val_token_accuracy']:.6f} bleu4={row['bleu4']:.6f}")
    return Constants.EXIT_CODES['ok']


HANDLERS = {
    'generate-data': cmd_generate_data,
    'train': cmd_train,
    'caption': cmd_caption,
    'eval': cmd_eval,
    'export-attention': cmd_export_attention,
    'analyze-weights': cmd_analyze_weights,
    'sweep-alpha': cmd_sweep_alpha,
    'ablate': cmd_ablate,
}
