import bz2
import io
import json
import logging
import lzma
import os
import posixpath
import shutil
import stat
import struct
import subprocess
import tarfile
import tempfile
import zipfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from minerforge.decryptor import DecryptorPlugin
from minerforge.helpers import CollectorError, DecryptionFailed, ExtractionError, MissingKeyMaterial, PidLock, \
    safe_join, safe_relpath
from minerforge.models import NESTED_LAYER, ROOT_LAYER, ArtifactRecord, Completeness, FirmwareImage, Stage, \
    StageOutcome, passed, removed

logger = logging.getLogger('extractor')

SCAN_LIMIT = 1024 * 1024
IN_CHUNK = 64 * 1024
OUT_CHUNK = 1024 * 1024
STREAM_SLACK = 1024 * 1024
META_NAME = 'meta.json'
EXTRACTED_SUFFIX = '.extracted'

CANONICAL_DIRS = ('etc', 'bin', 'sbin', 'usr')
CONFIG_EXTENSIONS = ('.conf', '.cfg', '.ini', '.json', '.yaml', '.yml', '.xml', '.rc')
ELF_MAGIC = b'\x7fELF'

# detect_container kinds, in tie-break order
CONTAINER_MAGICS = [
    ('gzip', 0, b'\x1f\x8b\x08'),
    ('tar', 257, b'ustar'),
    ('zip', 0, b'PK\x03\x04'),
    ('cpio-newc', 0, b'070701'),
    ('cpio-newc', 0, b'070702'),
    ('squashfs', 0, b'hsqs'),
    ('squashfs', 0, b'sqsh'),
    ('ubi', 0, b'UBI#'),
]

# Compression layers that are only peeled at offset 0
STREAM_MAGICS = [
    ('gzip', b'\x1f\x8b'),
    ('xz', b'\xfd7zXZ\x00'),
    ('bzip2', b'BZh'),
]

CPIO_HEADER = 110
CPIO_TRAILER = 'TRAILER!!!'

REASON_EMPTY = 'empty'
REASON_TRUNCATED = 'truncated container'
REASON_SELF_CHECK = 'archive self-check failed'
REASON_MISSING_KEY = 'missing key material'
REASON_DECRYPT_FAILED = 'decryption failed'
REASON_UNSUPPORTED_FS = 'unsupported filesystem'
REASON_HANDLER_FAILED = 'filesystem handler failed'
REASON_GUARD = 'expansion guard'
REASON_ENCRYPTED = 'encrypted payload without plugin'
REASON_CORRUPT = 'corrupt container'
REASON_PARTIAL = 'partial or incremental update'


class TruncatedContainer(ExtractionError):
    pass


class CorruptContainer(ExtractionError):
    pass


class ExpansionGuard(ExtractionError):
    pass


class _Unsupported(ExtractionError):
    pass


class _HandlerFailed(ExtractionError):
    pass


@dataclass(frozen=True)
class UnpackLimits:
    max_depth: int = 8
    max_expansion_ratio: int = 100
    max_total_bytes: int = 4 * 1024 ** 3

    @classmethod
    def from_config(cls, c) -> 'UnpackLimits':
        return cls(c.UNPACK_MAX_DEPTH, c.UNPACK_MAX_RATIO, c.UNPACK_MAX_TOTAL_BYTES)


@dataclass(frozen=True)
class EntropySettings:
    threshold: float = 7.5
    window: int = 4096
    fraction: float = 0.9

    @classmethod
    def from_config(cls, c) -> 'EntropySettings':
        return cls(c.ENTROPY_THRESHOLD, c.ENTROPY_WINDOW, c.ENTROPY_WINDOW_FRACTION)


class RootfsVerdict(NamedTuple):
    completeness: Completeness
    evidence: List[str]
    system_root: str
    system_layer: str = ROOT_LAYER


class UnpackResult(NamedTuple):
    image: Optional[FirmwareImage]
    outcomes: List[StageOutcome]


# Entropy


def shannon_entropy(window: bytes) -> float:
    """Bits per byte of a non-empty window, in [0, 8]."""
    arr = np.frombuffer(bytes(window), dtype=np.uint8)

    if arr.size == 0:
        raise ExtractionError("Entropy of an empty window is undefined")

    counts = np.bincount(arr, minlength=256)
    p = counts[counts > 0] / arr.size
    h = float(-(p * np.log2(p)).sum())

    return min(8.0, max(0.0, h)) + 0.0


def windowed_entropy(data: bytes, window: int = 4096) -> List[float]:
    """Entropy of each full window; a trailing partial window is ignored."""
    n = len(data) // window

    if n == 0:
        return []

    rows = np.frombuffer(bytes(data[:n * window]), dtype=np.uint8).reshape(n, window)

    return [shannon_entropy(row) for row in rows]


def looks_encrypted(data: bytes, settings: EntropySettings) -> bool:
    values = windowed_entropy(data, settings.window)

    if not values:
        return False

    high = sum(1 for v in values if v >= settings.threshold)

    return high >= settings.fraction * len(values)


# Container detection


def detect_container(data: bytes) -> Tuple[str, int]:
    """First container magic at a 4-byte aligned offset within the first MiB."""
    view = bytes(data[:SCAN_LIMIT + 512])
    best: Optional[Tuple[int, int, str]] = None

    for rank, (kind, rel, magic) in enumerate(CONTAINER_MAGICS):
        start = rel

        while True:
            pos = view.find(magic, start)

            if pos < 0:
                break

            offset = pos - rel

            if offset % 4 == 0 and offset < SCAN_LIMIT:
                if best is None or (offset, rank) < best[:2]:
                    best = (offset, rank, kind)
                break

            start = pos + 1

    if best is None:
        return 'unknown', 0

    return best[2], best[0]


def _stream_kind(data: bytes) -> Optional[str]:
    for kind, magic in STREAM_MAGICS:
        if bytes(data[:len(magic)]) == magic:
            return kind

    return None


def _inflate(data: bytes, kind: str) -> Iterator[bytes]:
    """Decompressed output of one gzip/xz/bzip2 stream, in bounded chunks."""
    view = memoryview(data)
    pos = 0

    try:
        if kind == 'gzip':
            d = zlib.decompressobj(31)

            while True:
                if d.unconsumed_tail:
                    chunk = d.unconsumed_tail
                elif pos < len(view):
                    chunk = view[pos:pos + IN_CHUNK]
                    pos += IN_CHUNK
                else:
                    chunk = b''

                out = d.decompress(chunk, OUT_CHUNK)

                if out:
                    yield out

                if d.eof:
                    return

                if not chunk and not out:
                    raise TruncatedContainer("gzip stream ends early")

        d = lzma.LZMADecompressor() if kind == 'xz' else bz2.BZ2Decompressor()

        while not d.eof:
            if d.needs_input:
                if pos >= len(view):
                    raise TruncatedContainer(f"{kind} stream ends early")
                chunk = view[pos:pos + IN_CHUNK]
                pos += IN_CHUNK
            else:
                chunk = b''

            out = d.decompress(chunk, OUT_CHUNK)

            if out:
                yield out

    except (zlib.error, lzma.LZMAError, OSError, EOFError) as e:
        raise CorruptContainer(f"{kind}: {e}") from e


def inflate_bounded(data: bytes, kind: str, limit: int) -> bytes:
    """Decompress one stream, giving up as soon as the output passes limit bytes."""
    out = bytearray()

    for chunk in _inflate(data, kind):
        out += chunk

        if len(out) > limit:
            raise ExpansionGuard(f"{kind} stream exceeds {max(0, limit)} bytes")

    return bytes(out)


def _cpio_entries(data: bytes) -> Iterator[Tuple[str, int, int, int]]:
    """(name, mode, data offset, size) for each newc member; raises on truncation."""
    pos = 0
    n = len(data)

    while True:
        if pos + CPIO_HEADER > n:
            raise TruncatedContainer("cpio archive ends before its trailer")

        header = bytes(data[pos:pos + CPIO_HEADER])

        if header[:6] not in (b'070701', b'070702'):
            raise CorruptContainer(f"bad cpio header at {pos}")

        try:
            fields = [int(header[6 + 8 * i:14 + 8 * i], 16) for i in range(13)]
        except ValueError as e:
            raise CorruptContainer(f"bad cpio header at {pos}") from e

        mode, size, namesize = fields[1], fields[6], fields[11]
        name_end = pos + CPIO_HEADER + namesize

        if name_end > n:
            raise TruncatedContainer("cpio name runs past the end")

        name = bytes(data[pos + CPIO_HEADER:name_end - 1]).decode('utf-8', errors='replace')
        data_start = (name_end + 3) & ~3

        if name == CPIO_TRAILER:
            return

        if data_start + size > n:
            raise TruncatedContainer(f"cpio member {name} runs past the end")

        yield name, mode, data_start, size
        pos = (data_start + size + 3) & ~3


def _squashfs_truncated(data: bytes) -> bool:
    if len(data) < 48:
        return True

    fmt = '<Q' if bytes(data[:4]) == b'hsqs' else '>Q'
    bytes_used = struct.unpack(fmt, bytes(data[40:48]))[0]

    return bytes_used > len(data)


def _tar_truncated(data: bytes) -> bool:
    with tarfile.open(fileobj=io.BytesIO(bytes(data)), mode='r:') as t:
        for m in t:
            if m.isfile() and m.offset_data + m.size > len(data):
                return True

    return False


# Integrity


def validate_integrity(record: ArtifactRecord, data: bytes) -> StageOutcome:
    """Removed for empty files, truncated containers and archives failing their own check."""
    aid = record.artifact_id

    if not data:
        return removed(Stage.INTEGRITY, aid, REASON_EMPTY)

    kind = _stream_kind(data)

    try:
        if kind:
            for _ in _inflate(data, kind):
                pass
            return passed(Stage.INTEGRITY, aid, f"valid {kind} stream")

        head = bytes(data[:512])

        if head[257:262] == b'ustar':
            if _tar_truncated(data):
                return removed(Stage.INTEGRITY, aid, REASON_TRUNCATED)
            return passed(Stage.INTEGRITY, aid, "valid tar archive")

        if head[:4] == b'PK\x03\x04':
            with zipfile.ZipFile(io.BytesIO(bytes(data))) as z:
                bad = z.testzip()
            if bad is not None:
                logger.info(f"{aid}: zip member {bad} fails its CRC")
                return removed(Stage.INTEGRITY, aid, REASON_SELF_CHECK)
            return passed(Stage.INTEGRITY, aid, "valid zip archive")

        if head[:6] in (b'070701', b'070702'):
            for _ in _cpio_entries(data):
                pass
            return passed(Stage.INTEGRITY, aid, "valid cpio archive")

        if head[:4] in (b'hsqs', b'sqsh'):
            if _squashfs_truncated(data):
                return removed(Stage.INTEGRITY, aid, REASON_TRUNCATED)
            return passed(Stage.INTEGRITY, aid, "squashfs size consistent")

    except TruncatedContainer:
        return removed(Stage.INTEGRITY, aid, REASON_TRUNCATED)
    except (CorruptContainer, zipfile.BadZipFile, tarfile.TarError, EOFError, zlib.error) as e:
        logger.info(f"{aid}: {e}")
        return removed(Stage.INTEGRITY, aid, REASON_SELF_CHECK)

    return passed(Stage.INTEGRITY, aid, "no declared container")


# Unpacking


class _Unpacker:
    """One artifact's extraction into a root directory, under shared byte guards.

    Archives found inside the extracted tree expand into the nested work area,
    so root holds exactly what the container held.
    """

    def __init__(self, root: Path, nested: Path, input_size: int, limits: UnpackLimits, c) -> None:
        self.root = root
        self.nested = nested
        self.limits = limits
        self.c = c
        self.budget = min(limits.max_total_bytes, max(1, input_size) * limits.max_expansion_ratio)
        self.written = 0
        self.depth_used = 0
        self.skipped_members = 0

    def charge(self, n: int) -> None:
        self.written += n

        if self.written > self.budget:
            raise ExpansionGuard(f"{self.written} bytes exceed the expansion budget of {self.budget}")

    def inflate(self, data: bytes, kind: str) -> bytes:
        # never below STREAM_SLACK, so small tar streams still fit with their block padding
        remaining = max(self.budget - self.written, STREAM_SLACK)

        return inflate_bounded(data, kind, min(remaining, self.limits.max_total_bytes))

    def target(self, base: Path, name: str) -> Optional[Path]:
        if posixpath.normpath(name.replace('\\', '/') or '.') == '.':
            return None

        relative = safe_relpath(name)

        if relative is None:
            self.skipped_members += 1
            logger.warning(f"Skipping member with unsafe path {name!r}")
            return None

        try:
            return safe_join(base, relative)
        except CollectorError:
            self.skipped_members += 1
            logger.warning(f"Skipping member escaping the image root {name!r}")
            return None

    def write_member(self, dst: Path, src, mode: int) -> None:
        try:
            dst.parent.mkdir(parents=True, exist_ok=True)

            with dst.open('wb') as out:
                while True:
                    block = src.read(IN_CHUNK)

                    if not block:
                        break

                    self.charge(len(block))
                    out.write(block)

            os.chmod(dst, (mode & 0o755) | 0o600)
        except OSError as e:
            self.skipped_members += 1
            logger.warning(f"Cannot write {dst}: {e}")

    def extract_tar(self, data: bytes, base: Path) -> None:
        with tarfile.open(fileobj=io.BytesIO(data), mode='r:') as t:
            for m in t:
                dst = self.target(base, m.name)

                if dst is None:
                    continue

                if m.isdir():
                    dst.mkdir(parents=True, exist_ok=True)
                elif m.isfile():
                    self.write_member(dst, t.extractfile(m), m.mode)
                else:
                    logger.debug(f"Skipping non-regular tar member {m.name}")

    def extract_zip(self, data: bytes, base: Path) -> None:
        with zipfile.ZipFile(io.BytesIO(data)) as z:
            for info in z.infolist():
                dst = self.target(base, info.filename)

                if dst is None:
                    continue

                mode = info.external_attr >> 16

                if info.is_dir():
                    dst.mkdir(parents=True, exist_ok=True)
                elif stat.S_ISLNK(mode):
                    logger.debug(f"Skipping zip symlink {info.filename}")
                else:
                    with z.open(info) as src:
                        self.write_member(dst, src, mode or 0o644)

    def extract_cpio(self, data: bytes, base: Path) -> None:
        for name, mode, offset, size in _cpio_entries(data):
            dst = self.target(base, name)

            if dst is None or name in ('.', ''):
                continue

            if stat.S_ISDIR(mode):
                dst.mkdir(parents=True, exist_ok=True)
            elif stat.S_ISREG(mode):
                self.write_member(dst, io.BytesIO(data[offset:offset + size]), mode)
            else:
                logger.debug(f"Skipping non-regular cpio member {name}")

    def run_handler(self, data: bytes, kind: str, base: Path) -> None:
        template = self.c.SQUASHFS_HANDLER if kind == 'squashfs' else self.c.UBI_HANDLER

        if not template:
            raise _Unsupported(kind)

        base.mkdir(parents=True, exist_ok=True)

        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / f"image.{kind}"
            src.write_bytes(data)
            argv = [str(a).format(src=src, dst=base) for a in template]
            logger.debug(f"Running {argv}")

            try:
                subprocess.run(argv, check=True, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
            except (OSError, subprocess.CalledProcessError) as e:
                raise _HandlerFailed(f"{argv[0]}: {e}") from e

        for p in base.rglob('*'):
            if p.is_symlink():
                p.unlink()
            elif p.is_file():
                self.charge(p.stat().st_size)

    def expand(self, data: bytes, base: Path, depth: int, name: str) -> bool:
        """Peel compression layers and extract one container into base.

        Returns False when data holds no recognised container at all.
        """
        while True:
            stream = _stream_kind(data)
            kind, offset = detect_container(data)

            if stream is None and kind == 'gzip' and offset:
                data, stream = data[offset:], 'gzip'

            if stream is None or depth >= self.limits.max_depth:
                break

            data = self.inflate(data, stream)
            name = _inner_name(name)
            depth += 1
            self.depth_used = max(self.depth_used, depth)

        if kind in ('unknown', 'gzip') or depth >= self.limits.max_depth:
            if depth == 0:
                return False

            # a bare compressed file, materialized as-is
            self.write_member(base / name, io.BytesIO(data), 0o644)
            return True

        if offset:
            logger.debug(f"{kind} found at offset {offset}")
            data = data[offset:]

        depth += 1
        self.depth_used = max(self.depth_used, depth)

        if kind == 'tar':
            self.extract_tar(data, base)
        elif kind == 'zip':
            self.extract_zip(data, base)
        elif kind == 'cpio-newc':
            self.extract_cpio(data, base)
        else:
            self.run_handler(data, kind, base)

        self.descend(base, depth)

        return True

    def descend(self, base: Path, depth: int) -> None:
        """Extract containers found at offset 0 in base into _<name>.extracted directories.

        Members of root expand under the nested work area at the same relative
        path; members of a nested expansion expand next to themselves.
        """
        if depth >= self.limits.max_depth:
            return

        layer = self.nested if base == self.root else base

        for p in _regular_files(base):
            with p.open('rb') as f:
                head = f.read(512)

            kind = _stream_kind(head) or _offset0_container(head)

            if kind is None:
                continue

            if kind in ('squashfs', 'ubi') and not (self.c.SQUASHFS_HANDLER if kind == 'squashfs'
                                                    else self.c.UBI_HANDLER):
                logger.debug(f"Leaving nested {kind} {p.name} unexpanded")
                continue

            sibling = layer / p.relative_to(base).parent / f"_{p.name}{EXTRACTED_SUFFIX}"

            try:
                self.expand(p.read_bytes(), sibling, depth, p.name)
            except (CorruptContainer, TruncatedContainer, tarfile.TarError, zipfile.BadZipFile,
                    _Unsupported, _HandlerFailed) as e:
                logger.info(f"Nested {p.name} left packed: {e}")
                shutil.rmtree(sibling, ignore_errors=True)


def _inner_name(name: str) -> str:
    lowered = name.lower()

    if lowered.endswith('.tgz'):
        return name[:-4] + '.tar'

    for suffix in ('.gz', '.xz', '.bz2'):
        if lowered.endswith(suffix) and len(name) > len(suffix):
            return name[:-len(suffix)]

    return name + '.out'


def _offset0_container(head: bytes) -> Optional[str]:
    for kind, rel, magic in CONTAINER_MAGICS:
        if head[rel:rel + len(magic)] == magic:
            return kind

    return None


def _regular_files(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob('*') if p.is_file() and not p.is_symlink())


def encrypted_regions(root: Path, settings: EntropySettings) -> List[Tuple[str, float]]:
    regions = []

    for p in _regular_files(root):
        try:
            data = p.read_bytes()
        except OSError as e:
            logger.warning(f"Cannot read {p}: {e}")
            continue

        if looks_encrypted(data, settings):
            regions.append((p.relative_to(root).as_posix(), shannon_entropy(data)))

    return regions


def is_executable(path: Path) -> bool:
    try:
        if path.stat().st_mode & 0o111:
            return True

        with path.open('rb') as f:
            head = f.read(4)
    except OSError:
        return False

    return head == ELF_MAGIC or head[:2] == b'#!'


def _rootfs_candidates(root: Path, nested: Optional[Path]) -> List[Tuple[str, Path, Path]]:
    """(layer, layer base, candidate): the tree, a lone wrapper dir, then nested expansions, shallowest first."""
    candidates = [(ROOT_LAYER, root, root)]
    entries = [p for p in root.iterdir()] if root.is_dir() else []
    dirs = [p for p in entries if p.is_dir() and not p.is_symlink()]

    # a single wrapper directory around the tree
    if len(dirs) == 1 and len(entries) == 1:
        candidates.append((ROOT_LAYER, root, dirs[0]))

    if nested is not None and nested.is_dir():
        expanded = sorted((p for p in nested.rglob(f"*{EXTRACTED_SUFFIX}") if p.is_dir()),
                          key=lambda p: (len(p.relative_to(nested).parts), p.as_posix()))
        candidates += [(NESTED_LAYER, nested, p) for p in expanded]

    return candidates


def _criteria(layer: str, base: Path, candidate: Path) -> List[str]:
    def label(p: Path) -> str:
        relative = p.relative_to(base).as_posix()
        return relative if layer == ROOT_LAYER else f"{layer}/{relative}"

    evidence = []
    system_dirs = [d for d in CANONICAL_DIRS if (candidate / d).is_dir()]

    if system_dirs:
        evidence.append('system dirs: ' + ', '.join(label(candidate / d) for d in system_dirs))

    executable = None
    config = None

    for p in _regular_files(candidate):
        relative = p.relative_to(candidate)

        if executable is None and is_executable(p):
            executable = p

        if config is None and (relative.parts[0] in ('etc', 'config') and len(relative.parts) > 1
                               or p.suffix.lower() in CONFIG_EXTENSIONS):
            config = p

        if executable and config:
            break

    if executable:
        evidence.append('executable: ' + label(executable))

    if config:
        evidence.append('config: ' + label(config))

    return evidence


def assess_rootfs(root: Path, nested: Optional[Path] = None) -> RootfsVerdict:
    """Verdict over the tree and, when given, the nested expansions of archives found in it."""
    root = Path(root)

    if not root.is_dir():
        return RootfsVerdict(Completeness.PARTIAL, [], '')

    best: Tuple[int, List[str], str, str] = (0, [], '', ROOT_LAYER)

    for layer, base, candidate in _rootfs_candidates(root, nested):
        evidence = _criteria(layer, base, candidate)
        relative = '' if candidate == base else candidate.relative_to(base).as_posix()

        if len(evidence) == 3:
            return RootfsVerdict(Completeness.FULL, evidence, relative, layer)

        if len(evidence) > best[0]:
            best = (len(evidence), evidence, relative, layer)

    return RootfsVerdict(Completeness.PARTIAL, best[1], best[2], best[3])


def reconstruct_rootfs(image: FirmwareImage) -> RootfsVerdict:
    """Full when one candidate root holds a system dir, an executable and a config file."""
    verdict = assess_rootfs(image.root, image.nested_root)
    image.completeness = verdict.completeness
    image.evidence = verdict.evidence
    image.system_root = verdict.system_root
    image.system_layer = verdict.system_layer

    return verdict


def reconstruction_outcome(image: FirmwareImage, keep_partial: bool = False) -> StageOutcome:
    if image.completeness == Completeness.FULL:
        return passed(Stage.RECONSTRUCTION, image.artifact_id, 'full filesystem')

    if keep_partial:
        return passed(Stage.RECONSTRUCTION, image.artifact_id, 'partial filesystem kept')

    return removed(Stage.RECONSTRUCTION, image.artifact_id, REASON_PARTIAL)


def write_meta(image: FirmwareImage, image_dir: Path) -> None:
    with (Path(image_dir) / META_NAME).open('w', encoding='utf-8', newline='\n') as f:
        json.dump(image.to_dict(), f, indent=2, sort_keys=False)
        f.write('\n')


def load_image(image_dir: Path) -> FirmwareImage:
    image_dir = Path(image_dir)

    try:
        with (image_dir / META_NAME).open('r', encoding='utf-8') as f:
            meta = json.load(f)
    except (OSError, ValueError) as e:
        raise ExtractionError(f"{image_dir} has no readable {META_NAME}: {e}") from e

    return FirmwareImage.from_dict(meta, image_dir / ROOT_LAYER)


def load_images(out_dir: Path) -> List[FirmwareImage]:
    out_dir = Path(out_dir)

    return [load_image(p) for p in sorted(out_dir.iterdir()) if (p / META_NAME).is_file()]


def unpack(record: ArtifactRecord, data: bytes, plugins: Sequence[DecryptorPlugin], limits: UnpackLimits,
           out_dir: Path, c) -> UnpackResult:
    """Decrypt, decompress and extract one artifact into <out>/<image_id>/root.

    The Decryption outcome covers every failure to obtain a tree. When a tree
    is obtained its Reconstruction outcome follows.
    """
    aid = record.artifact_id
    image_dir = Path(out_dir) / aid
    root = image_dir / ROOT_LAYER
    entropy = EntropySettings.from_config(c)
    name = os.path.basename(record.source_path)

    def fail(reason: str) -> UnpackResult:
        shutil.rmtree(image_dir, ignore_errors=True)
        logger.info(f"{aid} ({record.source_path}): {reason}")
        return UnpackResult(None, [removed(Stage.DECRYPTION, aid, reason)])

    shutil.rmtree(image_dir, ignore_errors=True)
    root.mkdir(parents=True)

    decrypted_by = None

    for plugin in plugins:
        if not plugin.applies_to(data, name):
            continue

        try:
            data = plugin.decrypt(data)
        except MissingKeyMaterial:
            return fail(REASON_MISSING_KEY)
        except DecryptionFailed as e:
            logger.debug(str(e))
            return fail(REASON_DECRYPT_FAILED)

        decrypted_by = plugin.plugin_id
        break

    unpacker = _Unpacker(root, image_dir / NESTED_LAYER, len(data), limits, c)

    try:
        expanded = unpacker.expand(data, root, 0, name)
    except ExpansionGuard as e:
        logger.warning(f"{aid}: {e}")
        return fail(REASON_GUARD)
    except _Unsupported:
        return fail(REASON_UNSUPPORTED_FS)
    except _HandlerFailed as e:
        logger.warning(f"{aid}: {e}")
        return fail(REASON_HANDLER_FAILED)
    except (CorruptContainer, TruncatedContainer, tarfile.TarError, zipfile.BadZipFile) as e:
        logger.warning(f"{aid}: {e}")
        return fail(REASON_CORRUPT)

    if not expanded:
        if looks_encrypted(data, entropy):
            return fail(REASON_ENCRYPTED)

        try:
            unpacker.write_member(root / name, io.BytesIO(data), 0o644)
        except ExpansionGuard:
            return fail(REASON_GUARD)

    image = FirmwareImage(
            image_id=aid,
            artifact_id=aid,
            root=root,
            encrypted_regions=encrypted_regions(root, entropy),
            unpack_depth_used=unpacker.depth_used,
            manufacturer=record.manufacturer,
            generation=record.generation,
    )

    reason = f"decrypted with {decrypted_by}" if decrypted_by else 'no encryption layer'
    outcomes = [passed(Stage.DECRYPTION, aid, reason)]

    reconstruct_rootfs(image)
    outcome = reconstruction_outcome(image, c.KEEP_PARTIAL_IMAGES)
    outcomes.append(outcome)

    if outcome.removed:
        shutil.rmtree(image_dir, ignore_errors=True)
        return UnpackResult(None, outcomes)

    write_meta(image, image_dir)
    logger.info(f"{aid}: {image.completeness.value} image, depth {image.unpack_depth_used}, "
                f"{len(image.encrypted_regions)} encrypted regions")

    return UnpackResult(image, outcomes)


def extract_records(records: Sequence[ArtifactRecord], data_for: Callable[[ArtifactRecord], bytes],
                    plugins: Sequence[DecryptorPlugin], out_dir: Path,
                    c) -> Tuple[List[FirmwareImage], List[StageOutcome]]:
    """Integrity then unpack for each record, holding the output directory lock.

    data_for returns the artifact bytes; an unreadable artifact counts as empty.
    """
    limits = UnpackLimits.from_config(c)
    out_dir = Path(out_dir)

    def one(record: ArtifactRecord) -> Tuple[Optional[FirmwareImage], List[StageOutcome]]:
        data = data_for(record)
        outcome = validate_integrity(record, data)

        if outcome.removed:
            return None, [outcome]

        result = unpack(record, data, plugins, limits, out_dir, c)

        return result.image, [outcome] + result.outcomes

    with PidLock(out_dir, logger), ThreadPoolExecutor(max_workers=max(1, c.WORKER_JOBS)) as pool:
        results = list(pool.map(one, sorted(records, key=lambda r: r.artifact_id)))

    images = [image for image, _ in results if image]
    outcomes = [o for _, stage_outcomes in results for o in stage_outcomes]

    return images, outcomes


def artifact_reader(source_root: Path) -> Callable[[ArtifactRecord], bytes]:
    def read(record: ArtifactRecord) -> bytes:
        try:
            return (Path(source_root) / record.source_path).read_bytes()
        except OSError as e:
            logger.warning(f"Cannot read {record.source_path}: {e}")
            return b''

    return read


def extract_directory(records: Sequence[ArtifactRecord], source_root: Path, plugins: Sequence[DecryptorPlugin],
                      out_dir: Path, c) -> Tuple[List[FirmwareImage], List[StageOutcome]]:
    return extract_records(records, artifact_reader(source_root), plugins, out_dir, c)
