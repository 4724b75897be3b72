import gzip
import logging
import os
import shutil
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

from fimlab import settings


def _gz_namer(name: str) -> str:
    return name + ".gz"


def _gz_rotator(source: str, dest: str) -> None:
    try:
        with open(source, "rb") as f_in, gzip.open(dest, "wb") as f_out:
            shutil.copyfileobj(f_in, f_out)
        os.remove(source)
    except Exception:
        pass


def gzip_rotating_handler(log_dir: str, max_bytes: int, backup_count: int) -> RotatingFileHandler:
    """
    写入 fimlab.log，按大小滚动并压缩为 fimlab.log.N.gz
    """
    Path(log_dir).mkdir(parents=True, exist_ok=True)
    h = RotatingFileHandler(
        Path(log_dir) / "fimlab.log",
        maxBytes=max(0, int(max_bytes)),
        backupCount=max(1, int(backup_count)),
        encoding="utf-8",
    )
    h.namer = _gz_namer
    h.rotator = _gz_rotator
    return h


def setup_logging(service_name: str = "fimlab") -> None:
    """
    日志配置：
    - 默认只输出到 stderr（stdout 留给数据输出）
    - 环境变量 FIMLAB_LOG_DIR 非空时额外落盘（按大小滚动 + gz 压缩）
    - 级别：FIMLAB_LOG_LEVEL（默认 INFO）
    """
    root = logging.getLogger()
    if getattr(root, "_fimlab_logging_configured", False):
        return
    root.setLevel(getattr(logging, str(settings.FIMLAB_LOG_LEVEL).upper(), logging.INFO))

    fmt = logging.Formatter(
        fmt="%(asctime)s %(levelname)s %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    root.addHandler(sh)

    log_dir = settings.FIMLAB_LOG_DIR
    if log_dir:
        fh = gzip_rotating_handler(
            log_dir,
            max_bytes=settings.FIMLAB_LOG_MAX_FILE_SIZE_BYTES,
            backup_count=settings.FIMLAB_LOG_BACKUP_COUNT,
        )
        fh.setFormatter(fmt)
        root.addHandler(fh)
    setattr(root, "_fimlab_logging_configured", True)
    logging.getLogger(__name__).debug("logging configured: service=%s dir=%s", service_name, log_dir or "-")
