"""Command line entry point: `python cli.py <command> --run-dir DIR [options]`."""
import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from config import PRESETS, load_config
from corpus_splitter import STRATEGIES
from errors import NeurotextError
from monitoring import structured_logger
from pipeline import SWEEPS, Pipeline, run_lock

logger = logging.getLogger(__name__)

COMMANDS = ('synth', 'split', 'stage1', 'stage2', 'pretrain_decoder', 'stage3', 'eval', 'report', 'sweep', 'all')
ABLATIONS = ('skip_autoencoding', 'skip_alignment', 'skip_finetune', 'disable_quantizer')


def build_parser():
    parser = argparse.ArgumentParser(prog='neurotext', description='Brain-signal to text pipeline on a synthetic corpus')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--run-dir', required=True, help='Directory holding every artifact of the run')
    parser.add_argument('--config', help='key = value configuration file')
    parser.add_argument('--preset', choices=sorted(PRESETS))
    parser.add_argument('--seed', type=int)
    parser.add_argument('--strategy', choices=STRATEGIES)
    parser.add_argument('--mode', choices=('brain', 'noise'), default='brain')
    parser.add_argument('--teacher-forcing', choices=('on', 'off'), default='off')
    parser.add_argument('--sweep', choices=sorted(SWEEPS), help='Variant family for the sweep command')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override any config key (repeatable)')
    for name in ABLATIONS:
        parser.add_argument(f"--{name.replace('_', '-')}", f"--{name}", dest=name, action='store_true')
    return parser


def overrides_from(args):
    values = {}
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise NeurotextError(f"--set expects KEY=VALUE, got '{item}'")
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values['seed'] = str(args.seed)
        # an explicit --set split.seed=... keeps the split independent of --seed
        values.setdefault('split.seed', str(args.seed))
    if args.strategy:
        values['split.strategy'] = args.strategy
    for name in ABLATIONS:
        if getattr(args, name):
            values[f"ablation.{name}"] = 'true'
    return values


def run(args):
    cfg = load_config(preset=args.preset, config_file=args.config, overrides=overrides_from(args))
    pipeline = Pipeline(args.run_dir, cfg)
    with run_lock(args.run_dir):
        if args.command == 'eval':
            return pipeline.cmd_eval(args.mode, args.teacher_forcing == 'on')
        if args.command == 'sweep':
            if not args.sweep:
                raise NeurotextError("the sweep command needs --sweep ratio|codebook")
            return pipeline.cmd_sweep(args.sweep)
        if args.command == 'all':
            return pipeline.run_all()
        return getattr(pipeline, f"cmd_{args.command}")()


def main(argv=None):
    load_dotenv()
    logging.basicConfig(level=os.getenv('LOG_LEVEL', 'INFO').upper(),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except NeurotextError as e:
        structured_logger.log_error(args.command, str(e), {'run_dir': args.run_dir})
        return 2
    except Exception as e:
        structured_logger.log_error(args.command, f"unexpected {type(e).__name__}: {e}", {'run_dir': args.run_dir})
        logger.exception("unexpected failure")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
