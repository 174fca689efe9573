"""
loguru sinks for sbat processes: colored stderr, a rotating log file and an
optional per-run mirror inside a run directory
"""

import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from config.app_dirs import app_dirs
from utils.enums import LogLevel


CONSOLE_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>"
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{line} | {message}"
RUN_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}"


class LogManager:
    """Owns the sinks installed for one command; replaces whatever was installed before"""

    def __init__(self, log_level: str = LogLevel.INFO.value, log_file: Optional[str] = None):
        self.log_level = LogLevel(log_level.lower()).value.upper()
        self.log_file = log_file
        self.sink_ids: List[int] = []

        logger.remove()
        if sys.stderr is not None:
            self.sink_ids.append(logger.add(sys.stderr, level=self.log_level, format=CONSOLE_FORMAT, colorize=True))

        if self.log_file:
            try:
                Path(self.log_file).parent.mkdir(parents=True, exist_ok=True)
                self.sink_ids.append(logger.add(self.log_file, level=self.log_level, format=FILE_FORMAT,
                                                rotation="50 MB", retention="30 days"))
            except OSError as e:
                # Console logging is enough to keep going
                logger.warning(f"File logging disabled for {self.log_file}: {e}")

    def add_run_log(self, path: Path) -> int:
        """Mirror this process's messages into a run directory"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sink_id = logger.add(str(path), level=self.log_level, format=RUN_FORMAT)
        self.sink_ids.append(sink_id)
        return sink_id


def setup_logging(log_level: str = LogLevel.INFO.value, log_file: Optional[str] = None) -> LogManager:
    """Configure loguru for a command-line process; falls back to the platform log file"""
    if log_file is None:
        default = app_dirs.default_log_file()
        log_file = str(default) if default is not None else None
    return LogManager(log_level=log_level, log_file=log_file)
