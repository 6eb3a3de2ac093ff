import logging
import os

from config import Config

_configured = False


def configure_logging(level=None):
    """Set up process-wide logging once; later calls only adjust the level."""
    global _configured
    level = (level or Config.LOG_LEVEL).upper()
    if not _configured:
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        _configured = True
    logging.getLogger().setLevel(level)


def worker_count(requested=None) -> int:
    """Parallel workers to use, never above SEGNET_THREADS."""
    cap = Config.THREADS or os.cpu_count() or 1
    if requested is None:
        return max(1, cap)
    return max(1, min(int(requested), cap))
