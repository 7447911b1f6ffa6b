import hashlib
import importlib
import json
import logging
import os
import posixpath
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional

import psutil
import yaml

FORMAT = "%(asctime)-15s [%(process)d] [%(filename)s:%(lineno)s : %(funcName)s()] %(message)s"

DATA_DIR = Path(__file__).parent / 'data'
LOCK_NAME = '.minerforge.lock'


class MinerforgeException(Exception):
    pass


class ConsistencyError(MinerforgeException):
    pass


class UsageError(MinerforgeException):
    pass


class CatalogError(MinerforgeException):
    pass


class CollectorError(MinerforgeException):
    pass


class SchemaError(CollectorError):
    pass


class LockError(MinerforgeException):
    pass


class ExtractionError(MinerforgeException):
    pass


class MissingKeyMaterial(ExtractionError):
    pass


class DecryptionFailed(ExtractionError):
    pass


class DedupError(MinerforgeException):
    pass


class SignatureMismatch(DedupError):
    pass


class RuleLoadError(MinerforgeException):
    pass


class UnknownFormatError(UsageError):
    pass


def load_config(path: Optional[str] = None, name: Optional[str] = None):
    """Resolve the active config class and apply YAML overrides.

    The class named by MINERFORGE_CONFIG is looked up in a site ``config``
    module when one is importable, otherwise in ``defaults``. Overrides are
    applied to a subclass so the shared class is never mutated.
    """
    name = name or os.environ.get('MINERFORGE_CONFIG', 'DefaultConfig')

    try:
        module = importlib.import_module('config')
    except ModuleNotFoundError as e:
        if e.name != 'config':
            raise
        module = importlib.import_module('defaults')

    base = getattr(module, name, None)

    if base is None:
        raise UsageError(f"Unknown config class {name}")

    c = type(name, (base,), {})

    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                overrides = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise UsageError(f"Cannot read config {path}: {e}") from e

        if not isinstance(overrides, dict):
            raise UsageError(f"Config {path} must be a mapping")

        for key, value in overrides.items():
            if not isinstance(key, str) or not key.isupper() or not hasattr(base, key):
                raise UsageError(f"Unknown config key {key!r} in {path}")
            setattr(c, key, value)

    return c


def setup_logging(c, name: str) -> logging.Logger:
    logging.basicConfig(format=FORMAT)

    if c.SENTRY_DSN:
        import sentry_sdk
        from sentry_sdk.integrations.logging import LoggingIntegration

        sentry_logging = LoggingIntegration(
                level=logging.INFO,  # Capture info and above as breadcrumbs
                event_level=logging.FATAL  # Only send fatal errors as events
        )
        sentry_sdk.init(dsn=c.SENTRY_DSN, integrations=[sentry_logging])

    level = logging.DEBUG if c.DEBUG else logging.INFO

    for logger_name in ['catalog', 'collector', 'extractor', 'dedup', 'scanner', 'attack', 'report', 'pipeline',
                        name]:
        logging.getLogger(logger_name).setLevel(level)

    return logging.getLogger(name)


class PidLock:
    """Single-writer lock on an output directory.

    A lock whose pid is no longer running, or whose content is not a pid,
    is treated as stale and replaced.
    """

    def __init__(self, directory: Path, logger: Optional[logging.Logger] = None) -> None:
        self.path = Path(directory) / LOCK_NAME
        self.l = logger or logging.getLogger('pipeline')

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)

        if self.path.exists():
            self.l.info(f"Lock found at {self.path}")

            with self.path.open() as f:
                pid = f.readline()

            try:
                pid = int(pid)
            except ValueError:
                self.l.info("Corrupt lock file found")
            else:
                if pid != os.getpid() and pid in psutil.pids():
                    raise LockError(f"{self.path.parent} is in use by process {pid}")
                self.l.info("Stale lock found")

        with self.path.open('wt') as f:
            f.write(str(psutil.Process().pid))

    def release(self) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.release()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path, block_size: int = 1024 * 1024) -> str:
    h = hashlib.sha256()

    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(block_size), b''):
            h.update(block)

    return h.hexdigest()


def safe_relpath(relative: str) -> Optional[str]:
    """Normalize a relative posix path; None if it is absolute or escapes upward."""
    if not relative:
        return None

    relative = relative.replace('\\', '/')

    if relative.startswith('/'):
        return None

    normalized = posixpath.normpath(relative)

    if normalized in ('.', '..') or normalized.startswith('../'):
        return None

    return normalized


def safe_join(root: Path, relative: str) -> Path:
    normalized = safe_relpath(relative)

    if normalized is None:
        raise CollectorError(f"Refusing path outside {root}: {relative!r}")

    root = Path(root).resolve()
    target = (root / normalized).resolve()

    if target != root and root not in target.parents:
        raise CollectorError(f"Refusing path outside {root}: {relative!r}")

    return target


def dumps_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False)


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open('w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(dumps_line(record))
            f.write('\n')


def iter_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    try:
        f = open(path, 'r', encoding='utf-8')
    except OSError as e:
        raise UsageError(f"Cannot read {path}: {e}") from e

    with f:
        for n, line in enumerate(f, start=1):
            line = line.strip()

            if not line:
                continue

            try:
                yield json.loads(line)
            except ValueError as e:
                raise ConsistencyError(f"{path}:{n}: not a JSON record ({e})") from e


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))


def load_yaml_data(name: str, path: Optional[str] = None) -> Any:
    """Load a YAML document, defaulting to the copy packaged in minerforge/data."""
    source = Path(path) if path else DATA_DIR / name

    try:
        with source.open('r', encoding='utf-8') as f:
            return yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise UsageError(f"Cannot read {source}: {e}") from e
