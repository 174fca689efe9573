"""
Process entry: parse, configure logging, run a command, map failures to exit codes
"""

import sys
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from config.app_config import RunSettings
from config.constants import Constants
from core.exceptions import SBATError, UsageError
from utils.logger import setup_logging
from .commands import HANDLERS
from .parser import build_parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one command line; 0 on success, 1 on usage errors, 2 on runtime failures"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return Constants.EXIT_CODES['usage']

    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"sbat: error: {e}", file=sys.stderr)
        return Constants.EXIT_CODES['usage']
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)

    try:
        settings = RunSettings()
    except ValidationError as e:
        print(f"sbat: error: invalid {Constants.ENV_PREFIX}* environment: {e}", file=sys.stderr)
        return Constants.EXIT_CODES['usage']
    log_manager = setup_logging(args.log_level or settings.log_level, args.log_file or settings.log_file)

    try:
        return HANDLERS[args.command](args, settings, log_manager)
    except UsageError as e:
        print(f"sbat {args.command}: error: {e}", file=sys.stderr)
        return Constants.EXIT_CODES['usage']
    except (SBATError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return Constants.EXIT_CODES['runtime']


def main():
    sys.exit(dispatch())
