import json
import logging
import os
import re
import tarfile
import zipfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import pandas as pd

from minerforge.helpers import CatalogError, UsageError, iter_jsonl, load_yaml_data, sha256_file, write_jsonl
from minerforge.models import FIRMWARE_CLASSES, UNKNOWN, ArtifactClass, ArtifactRecord, Inventory, MinerModel

logger = logging.getLogger('catalog')

HEAD_SIZE = 1024 * 1024
ARTIFACT_ID_LENGTH = 16
METADATA_MEMBERS = ('metadata.json', 'version.json', 'fw_info.json', 'manifest.json')
METADATA_MAX_MEMBERS = 32
INVENTORY_COLUMNS = ['manufacturer', 'model_name', 'family', 'release_year']

# Ordered: the first hit decides. (offset, magic, container kind, class when the extension says nothing)
DOCUMENT_MAGICS = [
    (0, b'%PDF-'),
]

ARCHIVE_MAGICS = [
    (0, b'\x1f\x8b', 'gzip', ArtifactClass.UPDATE_PACKAGE),
    (0, b'PK\x03\x04', 'zip', ArtifactClass.UPDATE_PACKAGE),
    (0, b'\xfd7zXZ\x00', 'xz', ArtifactClass.UPDATE_PACKAGE),
    (0, b'BZh', 'bzip2', ArtifactClass.UPDATE_PACKAGE),
    (0, b"7z\xbc\xaf\x27\x1c", '7z', ArtifactClass.UPDATE_PACKAGE),
    (257, b'ustar', 'tar', ArtifactClass.UPDATE_PACKAGE),
    (0, b'070701', 'cpio-newc', ArtifactClass.FLASH_IMAGE),
    (0, b'070702', 'cpio-newc', ArtifactClass.FLASH_IMAGE),
    (0, b'hsqs', 'squashfs', ArtifactClass.FLASH_IMAGE),
    (0, b'sqsh', 'squashfs', ArtifactClass.FLASH_IMAGE),
    (0, b'UBI#', 'ubi', ArtifactClass.FLASH_IMAGE),
    (0, b'\x27\x05\x19\x56', 'uimage', ArtifactClass.FLASH_IMAGE),
    (0, b'\xd0\x0d\xfe\xed', 'fit', ArtifactClass.FLASH_IMAGE),
]

FIRMWARE_EXTENSIONS = {
    '.bmu': ArtifactClass.UPDATE_PACKAGE,
    '.aup': ArtifactClass.UPDATE_PACKAGE,
    '.swu': ArtifactClass.UPDATE_PACKAGE,
    '.upd': ArtifactClass.UPDATE_PACKAGE,
    '.ota': ArtifactClass.UPDATE_PACKAGE,
    '.tar.gz': ArtifactClass.UPDATE_PACKAGE,
    '.tgz': ArtifactClass.UPDATE_PACKAGE,
    '.img': ArtifactClass.FLASH_IMAGE,
    '.bin': ArtifactClass.FLASH_IMAGE,
    '.ubi': ArtifactClass.FLASH_IMAGE,
    '.squashfs': ArtifactClass.FLASH_IMAGE,
    '.sd': ArtifactClass.FLASH_IMAGE,
    '.nand': ArtifactClass.FLASH_IMAGE,
    '.itb': ArtifactClass.FLASH_IMAGE,
    '.img.gz': ArtifactClass.FLASH_IMAGE,
    '.img.xz': ArtifactClass.FLASH_IMAGE,
}

OTHER_EXTENSIONS = {
    '.pdf': ArtifactClass.DOCUMENTATION,
    '.doc': ArtifactClass.DOCUMENTATION,
    '.docx': ArtifactClass.DOCUMENTATION,
    '.txt': ArtifactClass.DOCUMENTATION,
    '.md': ArtifactClass.DOCUMENTATION,
    '.rtf': ArtifactClass.DOCUMENTATION,
    '.html': ArtifactClass.DOCUMENTATION,
    '.htm': ArtifactClass.DOCUMENTATION,
    '.exe': ArtifactClass.MANAGEMENT_TOOL,
    '.msi': ArtifactClass.MANAGEMENT_TOOL,
    '.dmg': ArtifactClass.MANAGEMENT_TOOL,
    '.pkg': ArtifactClass.MANAGEMENT_TOOL,
    '.apk': ArtifactClass.MANAGEMENT_TOOL,
    '.jar': ArtifactClass.MANAGEMENT_TOOL,
    '.deb': ArtifactClass.MANAGEMENT_TOOL,
    '.appimage': ArtifactClass.MANAGEMENT_TOOL,
}

PREFIXED_VERSION_RE = re.compile(r'(?<![a-z0-9])[a-z]{1,4}-?\d+(?:\.\d+)+(?![0-9])')
BARE_VERSION_RE = re.compile(r'(?<![0-9.])\d+(?:\.\d+)+(?![0-9])')
BUILD_STAMP_RE = re.compile(r'^\d{8,}$')
TOKEN_SPLIT_RE = re.compile(r'[^a-z0-9]+')


class Identity(NamedTuple):
    manufacturer: str
    family: str
    generation: str


class FamilyPattern(NamedTuple):
    regex: Any
    template: str
    case: str

    def render(self, match) -> str:
        text = self.template.format(*match.groups())

        if self.case == 'upper':
            return text.upper()
        elif self.case == 'title':
            return text.title()

        return text


def tokenize(text: str) -> List[str]:
    return [t for t in TOKEN_SPLIT_RE.split(text.lower()) if t]


class VendorAliases:
    """Alias → vendor table plus per-vendor family grammars."""

    def __init__(self, table: Dict[str, Dict[str, Any]], vendors: Optional[Sequence[str]] = None) -> None:
        self.vendors = list(vendors) if vendors else list(table.keys()) + ['Other']
        self.fallback = 'Other' if 'Other' in self.vendors else self.vendors[-1]
        self.aliases: List[Tuple[Tuple[str, ...], str]] = []
        self.families: Dict[str, List[FamilyPattern]] = {}

        for vendor, entry in (table or {}).items():
            if vendor not in self.vendors:
                raise UsageError(f"Alias table names vendor {vendor!r} which is not in the vendor table")

            for alias in entry.get('aliases', []):
                self.aliases.append((tuple(tokenize(str(alias))), vendor))

            patterns = []

            for fam in entry.get('families', []):
                try:
                    regex = re.compile(fam['pattern'])
                except (KeyError, re.error) as e:
                    raise UsageError(f"Bad family pattern for {vendor}: {e}") from e
                patterns.append(FamilyPattern(regex, fam.get('template', '{0}'), fam.get('case', 'keep')))

            self.families[vendor] = patterns

        # longest alias first, then table order
        self.aliases.sort(key=lambda a: -len(''.join(a[0])))

    @classmethod
    def load(cls, path: Optional[str] = None, vendors: Optional[Sequence[str]] = None) -> 'VendorAliases':
        return cls(load_yaml_data('vendor_aliases.yaml', path) or {}, vendors)

    def resolve_vendor(self, tokens: Sequence[str]) -> Optional[str]:
        best = None

        for alias, vendor in self.aliases:
            n = len(alias)

            for pos in range(len(tokens) - n + 1):
                if tuple(tokens[pos:pos + n]) == alias:
                    key = (-len(''.join(alias)), pos)

                    if best is None or key < best[0]:
                        best = (key, vendor)
                    break

        return best[1] if best else None

    def family(self, vendor: str, tokens: Sequence[str]) -> Optional[str]:
        joined = ' '.join(tokens)

        for pattern in self.families.get(vendor, []):
            m = pattern.regex.search(joined)

            if m:
                return pattern.render(m)

        return None


def infer_generation(filename: str) -> str:
    name = filename.lower()
    hits = [m for m in (PREFIXED_VERSION_RE.search(name), BARE_VERSION_RE.search(name)) if m]

    if hits:
        return min(hits, key=lambda m: m.start()).group(0).upper()

    for token in tokenize(name):
        if BUILD_STAMP_RE.match(token):
            return token

    return UNKNOWN


def _metadata_value(metadata: Dict[str, Any], *keys: str) -> Optional[str]:
    lowered = {str(k).lower(): v for k, v in (metadata or {}).items()}

    for key in keys:
        value = lowered.get(key)

        if value not in (None, ''):
            return str(value).strip()

    return None


def resolve_identity(filename: str, embedded_metadata: Optional[Dict[str, Any]],
                     vendor_hints: VendorAliases) -> Tuple[Identity, List[str]]:
    """Identity from the filename, overridden field by field by embedded metadata.

    Returns the identity and the list of fields where the two sources disagreed.
    """
    tokens = tokenize(os.path.basename(filename or ''))
    vendor = vendor_hints.resolve_vendor(tokens)
    family = vendor_hints.family(vendor, tokens) if vendor else None
    from_name = Identity(vendor or vendor_hints.fallback, family or UNKNOWN, infer_generation(
            os.path.basename(filename or '')))

    md_vendor = _metadata_value(embedded_metadata, 'manufacturer', 'vendor')
    md_vendor = vendor_hints.resolve_vendor(tokenize(md_vendor)) if md_vendor else None

    md_family = _metadata_value(embedded_metadata, 'family', 'model')

    if md_family:
        md_family = vendor_hints.family(md_vendor or from_name.manufacturer, tokenize(md_family)) or md_family

    md_generation = _metadata_value(embedded_metadata, 'generation', 'firmware_version', 'version')

    if md_generation:
        md_generation = md_generation.upper()

    resolved = []
    conflicts = []

    for field_name, name_value, md_value in zip(Identity._fields, from_name, (md_vendor, md_family, md_generation)):
        if md_value is None:
            resolved.append(name_value)
            continue

        if name_value not in (UNKNOWN, vendor_hints.fallback) and name_value != md_value:
            conflicts.append(f"{field_name}: filename={name_value} metadata={md_value}")

        resolved.append(md_value)

    return Identity(*resolved), conflicts


def infer_identity(filename: str, embedded_metadata: Optional[Dict[str, Any]],
                   vendor_hints: VendorAliases) -> Identity:
    identity, conflicts = resolve_identity(filename, embedded_metadata, vendor_hints)

    if conflicts:
        logger.debug(f"{filename}: identity conflict {conflicts}")

    return identity


def _extension_class(filename: str, table: Dict[str, ArtifactClass]) -> Optional[ArtifactClass]:
    name = filename.lower()

    for ext in sorted(table, key=len, reverse=True):
        if name.endswith(ext):
            return table[ext]

    return None


def classify_artifact(record_bytes: bytes, filename: str) -> ArtifactClass:
    """Magic bytes first, then extension, then Other."""
    head = bytes(record_bytes[:HEAD_SIZE]) if record_bytes else b''

    for offset, magic in DOCUMENT_MAGICS:
        if head[offset:offset + len(magic)] == magic:
            return ArtifactClass.DOCUMENTATION

    for offset, magic, _kind, default in ARCHIVE_MAGICS:
        if head[offset:offset + len(magic)] == magic:
            return _extension_class(filename, FIRMWARE_EXTENSIONS) or default

    return (_extension_class(filename, FIRMWARE_EXTENSIONS)
            or _extension_class(filename, OTHER_EXTENSIONS)
            or ArtifactClass.OTHER)


def archive_kind(head: bytes) -> Optional[str]:
    for offset, magic, kind, _default in ARCHIVE_MAGICS:
        if head[offset:offset + len(magic)] == magic:
            return kind

    return None


def embedded_metadata(path: Path, head: bytes) -> Dict[str, str]:
    """Key-value identity hints carried inside zip/tar packages, if any."""
    kind = archive_kind(head)
    raw = None

    try:
        if kind == 'zip':
            with zipfile.ZipFile(path) as z:
                for info in z.infolist()[:METADATA_MAX_MEMBERS]:
                    if os.path.basename(info.filename).lower() in METADATA_MEMBERS and info.file_size < 65536:
                        raw = z.read(info)
                        break

        elif kind in ('tar', 'gzip', 'bzip2', 'xz'):
            with tarfile.open(path, 'r:*') as t:
                for n, member in enumerate(t):
                    if n >= METADATA_MAX_MEMBERS:
                        break
                    if member.isfile() and os.path.basename(member.name).lower() in METADATA_MEMBERS \
                            and member.size < 65536:
                        raw = t.extractfile(member).read()
                        break

    except (OSError, EOFError, zipfile.BadZipFile, tarfile.TarError) as e:
        logger.debug(f"{path}: no readable metadata ({e})")
        return {}

    if not raw:
        return {}

    try:
        data = json.loads(raw.decode('utf-8', errors='replace'))
    except ValueError:
        return {}

    if not isinstance(data, dict):
        return {}

    return {str(k): str(v) for k, v in data.items() if isinstance(v, (str, int, float))}


class _Examined(NamedTuple):
    relative: str
    content_hash: str
    size_bytes: int
    artifact_class: ArtifactClass
    metadata: Dict[str, str]


def _examine(root: Path, path: Path) -> Optional[_Examined]:
    relative = path.relative_to(root).as_posix()

    try:
        with path.open('rb') as f:
            head = f.read(HEAD_SIZE)
        digest = sha256_file(path)
        size = path.stat().st_size
    except OSError as e:
        logger.warning(f"Skipping unreadable file {relative}: {e}")
        return None

    return _Examined(relative, digest, size, classify_artifact(head, path.name), embedded_metadata(path, head))


def _regular_files(root: Path) -> List[Path]:
    out = []

    def on_error(e):
        logger.warning(f"Cannot list {e.filename}: {e}")

    for dirpath, dirnames, filenames in os.walk(root, onerror=on_error):
        dirnames.sort()

        for name in sorted(filenames):
            p = Path(dirpath) / name

            if p.is_file() and not p.is_symlink():
                out.append(p)

    return out


def ingest_directory(root: Path, vendor_hints: VendorAliases, workers: int = 4) -> List[ArtifactRecord]:
    """Catalog every regular file under root, one record per distinct content."""
    root = Path(root)

    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise CatalogError(f"Cannot read artifact root {root}")

    paths = _regular_files(root)
    logger.info(f"Examining {len(paths)} files under {root}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        examined = [e for e in pool.map(lambda p: _examine(root, p), paths) if e]

    by_hash: Dict[str, List[_Examined]] = {}

    for e in examined:
        by_hash.setdefault(e.content_hash, []).append(e)

    records = []

    for digest, copies in by_hash.items():
        copies.sort(key=lambda e: e.relative)
        first = copies[0]
        identity, conflicts = resolve_identity(first.relative, first.metadata, vendor_hints)

        records.append(ArtifactRecord(
                artifact_id=digest[:ARTIFACT_ID_LENGTH],
                source_paths=[c.relative for c in copies],
                manufacturer=identity.manufacturer,
                family=identity.family,
                generation=identity.generation,
                artifact_class=first.artifact_class,
                size_bytes=first.size_bytes,
                content_hash=digest,
                identity_conflict='; '.join(conflicts) or None,
        ))

    records.sort(key=lambda r: r.artifact_id)
    logger.info(f"Cataloged {len(records)} distinct artifacts")

    return records


def candidate_artifacts(records: Sequence[ArtifactRecord]) -> List[ArtifactRecord]:
    """Flash images and update packages: the records that enter the reduction funnel."""
    return [r for r in records if r.artifact_class in FIRMWARE_CLASSES]


def class_counts(records: Sequence[ArtifactRecord]) -> Dict[str, int]:
    counts = {c.value: 0 for c in ArtifactClass}

    for r in records:
        counts[r.artifact_class.value] += 1

    return counts


def write_catalog(records: Sequence[ArtifactRecord], path: Path) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def read_catalog(path: Path) -> List[ArtifactRecord]:
    try:
        return [ArtifactRecord.from_dict(d) for d in iter_jsonl(path)]
    except (KeyError, ValueError) as e:
        raise CatalogError(f"{path}: malformed catalog record ({e})") from e


def load_inventory(path: Path, vendors: Sequence[str]) -> Inventory:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, ValueError) as e:
        raise CatalogError(f"Cannot read inventory {path}: {e}") from e

    missing = [c for c in INVENTORY_COLUMNS if c not in df.columns]

    if missing:
        raise CatalogError(f"Inventory {path} lacks columns {missing}")

    models = []
    seen = set()

    for n, row in enumerate(df[INVENTORY_COLUMNS].itertuples(index=False), start=2):
        manufacturer, model_name, family, release_year = (v.strip() for v in row)

        if manufacturer not in vendors:
            raise CatalogError(f"{path}:{n}: manufacturer {manufacturer!r} is not in the vendor table")

        if (manufacturer, model_name) in seen:
            raise CatalogError(f"{path}:{n}: duplicate model {manufacturer} {model_name}")
        seen.add((manufacturer, model_name))

        try:
            year = int(release_year) if release_year else None
        except ValueError:
            raise CatalogError(f"{path}:{n}: release_year {release_year!r} is not a year")

        models.append(MinerModel(manufacturer, model_name, family or UNKNOWN, year))

    return Inventory(models)
