"""
Atomic file output: write to a temporary sibling, then rename.
"""

import logging
import os
import shutil
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

logger = logging.getLogger(__name__)


@contextmanager
def atomic_output(path: str | os.PathLike) -> Iterator[Path]:
    """
    Yield a temporary path next to `path`; rename it over `path` on success.

    On any exception the temporary file is removed and `path` is left
    untouched, so failed commands never leave partial outputs.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    os.close(fd)
    tmp_path = Path(tmp_name)
    try:
        yield tmp_path
        os.replace(tmp_path, target)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {target}")


@contextmanager
def staged_outputs(out_dir: str | os.PathLike) -> Iterator[Path]:
    """
    Yield a staging directory for a command that writes several files.

    Everything written under the staging directory is moved into `out_dir`,
    keeping relative paths, once the block exits cleanly. If the block
    raises, the staging directory is discarded and `out_dir` gains nothing.
    """
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging.", dir=target))
    try:
        yield staging
        staged = sorted(p for p in staging.rglob("*") if p.is_file())
        for source in staged:
            destination = target / source.relative_to(staging)
            destination.parent.mkdir(parents=True, exist_ok=True)
            os.replace(source, destination)
        logger.debug(f"Moved {len(staged)} staged outputs into {target}")
    finally:
        shutil.rmtree(staging, ignore_errors=True)
