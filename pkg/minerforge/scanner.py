import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from minerforge.extractor import META_NAME, is_executable, load_image, reconstruct_rootfs
from minerforge.helpers import ConsistencyError, UsageError, load_yaml_data, read_jsonl, write_jsonl
from minerforge.models import UNKNOWN, ComponentVersion, Finding, FirmwareImage, MinerFingerprint, OsFamily, \
    OsFingerprint, TriageState
# parse_shadow lives with the matchers that use it
from minerforge.rules import MAX_CONTENT_BYTES, Rule, ScanContext, excerpt, parse_shadow  # noqa: F401

logger = logging.getLogger('scanner')

PRINTABLE_RE = re.compile(rb'[\x20-\x7e]{4,}')
UCI_SECTION_RE = re.compile(r'^\s*config\s+\w+', re.MULTILINE)
UCI_BINARIES = ('sbin/uci', 'bin/uci', 'lib/config/uci.sh')
OS_RELEASE_FILES = ('etc/os-release', 'usr/lib/os-release')
OPKG_DIRS = ('etc/opkg', 'var/lib/opkg', 'usr/lib/opkg')

MINER_NAMES = ('cpuminer-multi', 'cgminer', 'bmminer', 'btminer', 'godminer', 'bfgminer')
MINER_RE = re.compile(r'(?<![A-Za-z0-9])(' + '|'.join(re.escape(n) for n in MINER_NAMES) + r')(?![A-Za-z0-9])'
                      r'(?:[ :/_-]{0,3}(?:version[ :]*)?v?(\d+(?:\.\d+)+)(?![0-9]))?', re.IGNORECASE)

COMPONENT_PATTERNS = [
    ('BusyBox', re.compile(r'BusyBox v(\d+(?:\.\d+)+)')),
    ('Dropbear', re.compile(r'[Dd]ropbear(?:[ _]sshd?)?[ _]v?(\d{4}\.\d+)')),
    ('OpenSSH', re.compile(r'OpenSSH_(\d+\.\d+(?:p\d+)?)')),
    ('OpenSSL', re.compile(r'OpenSSL (\d+\.\d+\.\d+[a-z]?)')),
    ('lighttpd', re.compile(r'lighttpd/(\d+(?:\.\d+)+)')),
    ('glibc', re.compile(r'GNU C Library [^\n]*?release version (\d+\.\d+(?:\.\d+)?)')),
    ('U-Boot', re.compile(r'U-Boot (\d{4}\.\d{2}(?:\.\d+)?)')),
]


def _walk(root: Path) -> List[Tuple[str, bool]]:
    """(relative path, is_symlink) for every non-directory entry, without following links."""
    out = []

    if not root.is_dir():
        return out

    def on_error(e):
        logger.warning(f"Cannot list {e.filename}: {e}")

    for dirpath, dirnames, filenames in os.walk(root, onerror=on_error):
        dirnames.sort()

        for name in filenames:
            path = Path(dirpath) / name
            out.append((path.relative_to(root).as_posix(), path.is_symlink()))

    return sorted(out)


def _evaluate(root: Path, relative: str, symlink: bool, rules: Sequence[Rule], image_id: str,
              ctx: ScanContext) -> List[Finding]:
    findings = []
    path = root / relative

    for rule in rules:
        if not rule.applies_to(relative):
            continue

        # link targets may point outside the image; they are matched by name only
        if symlink and rule.matcher.reads_content:
            continue

        try:
            matched = rule.matcher.match(path, relative, ctx)
        except OSError as e:
            logger.warning(f"{image_id}: cannot read {relative} for {rule.rule_id}: {e}")
            continue
        except Exception as e:
            logger.error(f"{image_id}: rule {rule.rule_id} failed on {relative}: {e}")
            continue

        if matched is None:
            continue

        findings.append(Finding(
                rule_id=rule.rule_id,
                image_id=image_id,
                evidence_path=relative,
                matched_excerpt=excerpt(matched),
                vuln_class=rule.vuln_class,
                entry_point=rule.entry_point,
                severity=rule.severity,
        ))

    return findings


def scan_image(image: FirmwareImage, rules: Sequence[Rule], weak_hashes: Iterable[str] = frozenset(),
               workers: int = 4) -> List[Finding]:
    """Evaluate every rule over the files its targets select.

    Paths are relative to the image's system root. Files are scanned in
    parallel; the merged list is sorted by (rule_id, evidence_path).
    """
    root = image.scan_root
    ctx = ScanContext(frozenset(weak_hashes))
    entries = _walk(root)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_file = list(pool.map(lambda e: _evaluate(root, e[0], e[1], rules, image.image_id, ctx), entries))

    findings = sorted((f for fs in per_file for f in fs), key=lambda f: f.sort_key)

    for f in findings:
        if not os.path.lexists(root / f.evidence_path):
            raise ConsistencyError(f"{image.image_id}: evidence {f.evidence_path} vanished during the scan")

    logger.info(f"{image.image_id}: {len(findings)} findings over {len(entries)} files")

    return findings


def _uci_references(root: Path) -> List[str]:
    evidence = [b for b in UCI_BINARIES if (root / b).exists()]
    config_dir = root / 'etc/config'

    for p in sorted(config_dir.iterdir()):
        if not p.is_file() or p.is_symlink():
            continue

        try:
            text = p.read_text(encoding='latin-1')
        except OSError:
            continue

        if UCI_SECTION_RE.search(text):
            evidence.append(p.relative_to(root).as_posix())
            break

    return evidence


def _os_release_mentions(root: Path, word: str) -> List[str]:
    found = []

    for name in OS_RELEASE_FILES:
        p = root / name

        if not p.is_file() or p.is_symlink():
            continue

        try:
            if word.lower() in p.read_text(encoding='latin-1').lower():
                found.append(name)
        except OSError as e:
            logger.warning(f"Cannot read {p}: {e}")

    return found


def detect_os(image: FirmwareImage) -> OsFingerprint:
    """First match of OpenWrt, Buildroot, Angstrom/OpenEmbedded; Unknown otherwise."""
    root = image.scan_root

    if (root / 'etc/openwrt_release').is_file():
        return OsFingerprint(image.image_id, OsFamily.OPENWRT, ('etc/openwrt_release',))

    if (root / 'etc/config').is_dir():
        uci = _uci_references(root)

        if uci:
            return OsFingerprint(image.image_id, OsFamily.OPENWRT, tuple(['etc/config'] + uci))

    buildroot = _os_release_mentions(root, 'Buildroot')

    if buildroot:
        return OsFingerprint(image.image_id, OsFamily.BUILDROOT, tuple(buildroot))

    angstrom = [p for p in ('etc/angstrom-version',) if (root / p).is_file()]
    angstrom += [d for d in OPKG_DIRS if (root / d).is_dir()]

    if angstrom:
        return OsFingerprint(image.image_id, OsFamily.ANGSTROM, tuple(angstrom))

    return OsFingerprint(image.image_id, OsFamily.UNKNOWN)


def printable_strings(data: bytes, min_length: int = 4) -> List[str]:
    pattern = PRINTABLE_RE if min_length == 4 else re.compile(rb'[\x20-\x7e]{%d,}' % min_length)

    return [s.decode('ascii') for s in pattern.findall(data)]


def _strings_of(path: Path) -> List[str]:
    try:
        with path.open('rb') as f:
            return printable_strings(f.read(MAX_CONTENT_BYTES))
    except OSError as e:
        logger.warning(f"Cannot read {path}: {e}")
        return []


def _executables(root: Path) -> List[str]:
    return [relative for relative, symlink in _walk(root) if not symlink and is_executable(root / relative)]


def fingerprint_miner(image: FirmwareImage) -> MinerFingerprint:
    """Longest version-bearing miner string over the executables.

    A miner name seen only without a version yields that name with an
    unknown version.
    """
    root = image.scan_root
    best: Optional[Tuple[int, str, str, str]] = None
    bare: Optional[Tuple[str, str]] = None

    for relative in _executables(root):
        for s in _strings_of(root / relative):
            for m in MINER_RE.finditer(s):
                name = m.group(1).lower()

                if m.group(2) is None:
                    if bare is None:
                        bare = (name, relative)
                    continue

                candidate = (len(m.group(0)), name, m.group(2), relative)

                if best is None or (candidate[0], candidate[2].count('.')) > (best[0], best[2].count('.')):
                    best = candidate

    if best:
        return MinerFingerprint(image.image_id, best[1], best[2], best[3])

    if bare:
        return MinerFingerprint(image.image_id, bare[0], UNKNOWN, bare[1])

    return MinerFingerprint(image.image_id)


def inventory_components(image: FirmwareImage) -> List[ComponentVersion]:
    """Embedded software versions (BusyBox, Dropbear, OpenSSH, ...) from printable strings."""
    root = image.scan_root
    found: Dict[Tuple[str, str], str] = {}

    for relative, symlink in _walk(root):
        if symlink:
            continue

        name = relative.rsplit('/', 1)[-1].lower()

        if not (is_executable(root / relative) or '.so' in name or 'boot' in name):
            continue

        for s in _strings_of(root / relative):
            for component, pattern in COMPONENT_PATTERNS:
                m = pattern.search(s)

                if m:
                    found.setdefault((component, m.group(1)), relative)

    return [ComponentVersion(n, v, p) for (n, v), p in sorted(found.items(), key=lambda i: (i[0][0].lower(), i[0][1]))]


def apply_triage(findings: Sequence[Finding], decisions: Mapping[str, str]) -> List[Finding]:
    """Set triage states from a {rule_id:evidence_path: state} map."""
    states = {}

    for key, state in decisions.items():
        try:
            states[str(key)] = TriageState(str(state))
        except ValueError:
            raise UsageError(f"Unknown triage state {state!r} for {key}")

    out = [replace(f, triage=states[f.triage_key]) if f.triage_key in states else f for f in findings]
    unused = sorted(set(states) - {f.triage_key for f in findings})

    for key in unused:
        logger.warning(f"Triage decision {key} matches no finding")

    return out


def load_triage(path: str) -> Dict[str, str]:
    decisions = load_yaml_data('', path) or {}

    if not isinstance(decisions, dict):
        raise UsageError(f"Triage file {path} must map rule_id:evidence_path to a state")

    return {str(k): str(v) for k, v in decisions.items()}


def write_findings(findings: Sequence[Finding], path: Path) -> None:
    write_jsonl(path, (f.to_dict() for f in findings))


def read_findings(path: Path) -> List[Finding]:
    try:
        return [Finding.from_dict(d) for d in read_jsonl(path)]
    except (KeyError, ValueError) as e:
        raise ConsistencyError(f"{path}: malformed finding ({e})") from e


def open_images(path: Path) -> List[FirmwareImage]:
    """An extracted image directory, an extraction output directory, or a bare tree."""
    path = Path(path)

    if not path.is_dir():
        raise UsageError(f"{path} is not a directory")

    if (path / META_NAME).is_file():
        return [load_image(path)]

    extracted = sorted(p for p in path.iterdir() if (p / META_NAME).is_file())

    if extracted:
        return [load_image(p) for p in extracted]

    image = FirmwareImage(image_id=path.name, artifact_id=path.name, root=path)
    reconstruct_rootfs(image)

    return [image]


def scan_images(images: Sequence[FirmwareImage], rules: Sequence[Rule], weak_hashes: FrozenSet[str],
                workers: int = 4) -> List[Finding]:
    findings = []

    for image in sorted(images, key=lambda i: i.image_id):
        findings += scan_image(image, rules, weak_hashes, workers)

    return findings


def fingerprint_records(images: Sequence[FirmwareImage]) -> List[Dict[str, object]]:
    """OS, miner and component fingerprints of each image as tagged records."""
    records = []

    for image in sorted(images, key=lambda i: i.image_id):
        records.append(dict(kind='os', **detect_os(image).to_dict()))
        records.append(dict(kind='miner', **fingerprint_miner(image).to_dict()))

        for component in inventory_components(image):
            records.append(dict(kind='component', image_id=image.image_id, **component.to_dict()))

    return records


def read_fingerprints(path: Path) -> Tuple[List[OsFingerprint], List[MinerFingerprint]]:
    os_fingerprints, miner_fingerprints = [], []

    try:
        for d in read_jsonl(path):
            if d.get('kind') == 'os':
                os_fingerprints.append(OsFingerprint.from_dict(d))
            elif d.get('kind') == 'miner':
                miner_fingerprints.append(MinerFingerprint.from_dict(d))
    except (KeyError, ValueError) as e:
        raise ConsistencyError(f"{path}: malformed fingerprint ({e})") from e

    return os_fingerprints, miner_fingerprints
