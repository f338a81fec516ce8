import os
import sys
import json
import logging
import subprocess
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {'png', 'jpg', 'jpeg', 'bmp', 'tif', 'tiff'}
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def setup_logger(name: str = "src", log_dir: Optional[str] = None, log_prefix: str = "run",
                 level: str = "INFO") -> logging.Logger:
    """
    Configure console logging and, when a directory is given, a timestamped log file

    Args:
        name: Logger to configure; "src" covers every package module
        log_dir: Directory for <prefix>_<YYYYmmdd-HHMMSS>.log
        log_prefix: File name prefix
        level: Level name such as INFO or DEBUG

    Returns:
        The configured logger
    """
    log = logging.getLogger(name)
    log.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    log.propagate = False
    for handler in list(log.handlers):
        log.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    log.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        file_handler = logging.FileHandler(os.path.join(log_dir, f"{log_prefix}_{stamp}.log"), encoding="utf-8")
        file_handler.setFormatter(formatter)
        log.addHandler(file_handler)
        log.debug(f"Logging to {file_handler.baseFilename}")
    return log


def get_file_extension(filename: str) -> str:
    """
    Get the file extension from a filename

    Args:
        filename: The filename to extract extension from

    Returns:
        File extension in lowercase (without the dot)
    """
    if '.' in filename:
        return filename.rsplit('.', 1)[1].lower()
    return ''


def is_image_file(filename: str) -> bool:
    """
    Check if a file name has one of the readable image extensions

    Args:
        filename: Name or path of the file

    Returns:
        True if the extension is in IMAGE_EXTENSIONS
    """
    return get_file_extension(filename) in IMAGE_EXTENSIONS


def list_image_files(directory: str) -> List[Path]:
    """Image files directly inside a directory, sorted by name"""
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and is_image_file(p.name))


def sanitize_filename(filename: str) -> str:
    """
    Sanitize a sample id for use as a file name

    Args:
        filename: The filename to sanitize

    Returns:
        Sanitized filename
    """
    filename = os.path.basename(filename)
    for char in '<>:"/\\|?*':
        filename = filename.replace(char, '_')
    if len(filename) > 255:
        name, ext = os.path.splitext(filename)
        filename = name[:255 - len(ext)] + ext
    return filename


def cleanup_temp_files(*file_paths: Optional[str]) -> None:
    """
    Remove partially written files

    Args:
        *file_paths: Variable number of file paths to clean up
    """
    for file_path in file_paths:
        if file_path and isinstance(file_path, str):
            try:
                if os.path.exists(file_path):
                    os.remove(file_path)
                    logger.debug(f"Cleaned up temp file: {file_path}")
            except OSError as e:
                logger.warning(f"Could not clean up file {file_path}: {e}")


def git_commit() -> Optional[str]:
    """Current commit of the working tree, or None outside a git checkout"""
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


def write_manifest(run_dir: str, config: Dict[str, Any], command: str,
                   argv: Optional[Sequence[str]] = None) -> str:
    """
    Record everything needed to reproduce a run

    Args:
        run_dir: Output directory of the run
        config: Validated configuration as a flat mapping
        command: Sub-command name
        argv: Command line, defaults to sys.argv

    Returns:
        Path of the written manifest.json
    """
    from . import __version__

    os.makedirs(run_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv if argv is not None else sys.argv),
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "commit": git_commit(),
        "started": datetime.now().isoformat(timespec="seconds"),
        "python": sys.version.split()[0],
    }
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, default=str)
    logger.info(f"Run manifest written to {path}")
    return path
