"""
Default log location for the sbat command line, resolved with platformdirs
"""

from pathlib import Path
from typing import Optional

import platformdirs


LOG_FILE_NAME = "sbat.log"


class AppDirectories:
    """Platform log directory for sbat runs, created on first use"""

    def __init__(self, app_name: str = "sbat-captioner", app_author: str = "sbat"):
        self._dirs = platformdirs.PlatformDirs(appname=app_name, appauthor=app_author, ensure_exists=False)

    @property
    def log_dir(self) -> Path:
        return Path(self._dirs.user_log_dir)

    def log_file(self, name: str = LOG_FILE_NAME) -> Path:
        return self.log_dir / name

    def default_log_file(self) -> Optional[Path]:
        """The platform log file, or None when its directory cannot be created"""
        try:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        except OSError:
            return None
        return self.log_file()


app_dirs = AppDirectories()
