from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

UNKNOWN = 'unknown'

# Image directory layout: the container's own tree, and expansions of archives found inside it
ROOT_LAYER = 'root'
NESTED_LAYER = 'nested'


class ArtifactClass(str, Enum):
    UPDATE_PACKAGE = 'UpdatePackage'
    FLASH_IMAGE = 'FlashImage'
    MANAGEMENT_TOOL = 'ManagementTool'
    DOCUMENTATION = 'Documentation'
    OTHER = 'Other'


FIRMWARE_CLASSES = (ArtifactClass.UPDATE_PACKAGE, ArtifactClass.FLASH_IMAGE)


class Stage(str, Enum):
    INTEGRITY = 'Integrity'
    DECRYPTION = 'Decryption'
    RECONSTRUCTION = 'Reconstruction'
    DEDUPLICATION = 'Deduplication'


STAGE_ORDER = (Stage.INTEGRITY, Stage.DECRYPTION, Stage.RECONSTRUCTION, Stage.DEDUPLICATION)


class Verdict(str, Enum):
    PASS = 'Pass'
    REMOVED = 'Removed'


class Completeness(str, Enum):
    FULL = 'Full'
    PARTIAL = 'Partial'


class EntryPoint(str, Enum):
    FIRMWARE_UPDATE = 'FirmwareUpdate'
    DEBUG_SSH = 'DebugSSH'
    WEB_UI = 'WebUI'
    API = 'API'
    NETWORK = 'Network'


class Severity(str, Enum):
    LOW = 'Low'
    MEDIUM = 'Medium'
    HIGH = 'High'
    CRITICAL = 'Critical'


class TriageState(str, Enum):
    UNREVIEWED = 'unreviewed'
    CONFIRMED = 'confirmed'
    REJECTED = 'rejected'


class OsFamily(str, Enum):
    OPENWRT = 'OpenWrt'
    BUILDROOT = 'Buildroot'
    ANGSTROM = 'AngstromOrOpenEmbedded'
    UNKNOWN = 'Unknown'


@dataclass(frozen=True)
class MinerModel:
    manufacturer: str
    model_name: str
    family: str = UNKNOWN
    release_year: Optional[int] = None

    @property
    def key(self) -> Tuple[str, str]:
        return self.manufacturer, self.model_name


@dataclass
class Inventory:
    models: List[MinerModel] = field(default_factory=list)

    @property
    def per_vendor_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}

        for m in self.models:
            counts[m.manufacturer] = counts.get(m.manufacturer, 0) + 1

        return counts

    def keys(self) -> List[Tuple[str, str]]:
        return [m.key for m in self.models]


@dataclass
class ArtifactRecord:
    artifact_id: str
    source_paths: List[str]
    manufacturer: str
    family: str
    generation: str
    artifact_class: ArtifactClass
    size_bytes: int
    content_hash: str
    identity_conflict: Optional[str] = None

    @property
    def source_path(self) -> str:
        return self.source_paths[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'artifact_id': self.artifact_id,
            'source_paths': list(self.source_paths),
            'manufacturer': self.manufacturer,
            'family': self.family,
            'generation': self.generation,
            'artifact_class': self.artifact_class.value,
            'size_bytes': self.size_bytes,
            'content_hash': self.content_hash,
            'identity_conflict': self.identity_conflict,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'ArtifactRecord':
        return cls(
                artifact_id=d['artifact_id'],
                source_paths=list(d['source_paths']),
                manufacturer=d['manufacturer'],
                family=d['family'],
                generation=d['generation'],
                artifact_class=ArtifactClass(d['artifact_class']),
                size_bytes=int(d['size_bytes']),
                content_hash=d['content_hash'],
                identity_conflict=d.get('identity_conflict'),
        )


@dataclass
class ManifestEntry:
    url: str
    relative_path: str
    size_bytes: int
    content_hash: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'url': self.url,
            'relative_path': self.relative_path,
            'size_bytes': self.size_bytes,
            'content_hash': self.content_hash,
        }


@dataclass
class MirrorManifest:
    entries: List[ManifestEntry]
    fetched_at: datetime

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.relative_path)
        paths = [e.relative_path for e in self.entries]

        if len(paths) != len(set(paths)):
            raise ValueError("Manifest relative paths must be unique")

    def by_path(self) -> Dict[str, ManifestEntry]:
        return {e.relative_path: e for e in self.entries}


@dataclass(frozen=True)
class StageOutcome:
    stage: Stage
    artifact_id: str
    verdict: Verdict
    reason: str

    @property
    def removed(self) -> bool:
        return self.verdict == Verdict.REMOVED

    def to_dict(self) -> Dict[str, Any]:
        return {
            'stage': self.stage.value,
            'artifact_id': self.artifact_id,
            'verdict': self.verdict.value,
            'reason': self.reason,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'StageOutcome':
        return cls(Stage(d['stage']), d['artifact_id'], Verdict(d['verdict']), d['reason'])


def passed(stage: Stage, artifact_id: str, reason: str) -> StageOutcome:
    return StageOutcome(stage, artifact_id, Verdict.PASS, reason)


def removed(stage: Stage, artifact_id: str, reason: str) -> StageOutcome:
    return StageOutcome(stage, artifact_id, Verdict.REMOVED, reason)


@dataclass
class FirmwareImage:
    image_id: str
    artifact_id: str
    root: Path
    completeness: Completeness = Completeness.PARTIAL
    encrypted_regions: List[Tuple[str, float]] = field(default_factory=list)
    unpack_depth_used: int = 0
    # Relative path of the directory that satisfied the rootfs criteria, '' for the layer root
    system_root: str = ''
    # Directory next to root holding system_root: root itself, or the nested-archive work area
    system_layer: str = ROOT_LAYER
    manufacturer: str = 'Other'
    generation: str = UNKNOWN
    evidence: List[str] = field(default_factory=list)

    @property
    def nested_root(self) -> Optional[Path]:
        """Work area for archives found in the tree; only images laid out as <dir>/root have one."""
        return self.root.parent / NESTED_LAYER if self.root.name == ROOT_LAYER else None

    @property
    def layer_root(self) -> Path:
        return self.root if self.system_layer == ROOT_LAYER else self.root.parent / self.system_layer

    @property
    def scan_root(self) -> Path:
        return self.layer_root / self.system_root if self.system_root else self.layer_root

    def files(self) -> List[str]:
        """Regular files as sorted posix paths relative to root."""
        out = []

        if not self.root.is_dir():
            return out

        for p in self.root.rglob('*'):
            if p.is_file() and not p.is_symlink():
                out.append(p.relative_to(self.root).as_posix())

        return sorted(out)

    @property
    def file_count(self) -> int:
        return len(self.files())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'image_id': self.image_id,
            'artifact_id': self.artifact_id,
            'completeness': self.completeness.value,
            'encrypted_regions': [[p, round(e, 6)] for p, e in self.encrypted_regions],
            'unpack_depth_used': self.unpack_depth_used,
            'system_root': self.system_root,
            'system_layer': self.system_layer,
            'manufacturer': self.manufacturer,
            'generation': self.generation,
            'evidence': list(self.evidence),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any], root: Path) -> 'FirmwareImage':
        return cls(
                image_id=d['image_id'],
                artifact_id=d['artifact_id'],
                root=Path(root),
                completeness=Completeness(d['completeness']),
                encrypted_regions=[(p, float(e)) for p, e in d.get('encrypted_regions', [])],
                unpack_depth_used=int(d.get('unpack_depth_used', 0)),
                system_root=d.get('system_root', ''),
                system_layer=d.get('system_layer', ROOT_LAYER),
                manufacturer=d.get('manufacturer', 'Other'),
                generation=d.get('generation', UNKNOWN),
                evidence=list(d.get('evidence', [])),
        )


@dataclass(frozen=True)
class Finding:
    rule_id: str
    image_id: str
    evidence_path: str
    matched_excerpt: str
    vuln_class: str
    entry_point: EntryPoint
    severity: Severity
    triage: TriageState = TriageState.UNREVIEWED

    @property
    def sort_key(self) -> Tuple[str, str]:
        return self.rule_id, self.evidence_path

    @property
    def triage_key(self) -> str:
        return f"{self.rule_id}:{self.evidence_path}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'rule_id': self.rule_id,
            'image_id': self.image_id,
            'evidence_path': self.evidence_path,
            'matched_excerpt': self.matched_excerpt,
            'vuln_class': self.vuln_class,
            'entry_point': self.entry_point.value,
            'severity': self.severity.value,
            'triage': self.triage.value,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'Finding':
        return cls(
                rule_id=d['rule_id'],
                image_id=d['image_id'],
                evidence_path=d['evidence_path'],
                matched_excerpt=d['matched_excerpt'],
                vuln_class=d['vuln_class'],
                entry_point=EntryPoint(d['entry_point']),
                severity=Severity(d['severity']),
                triage=TriageState(d.get('triage', TriageState.UNREVIEWED.value)),
        )


@dataclass(frozen=True)
class OsFingerprint:
    image_id: str
    os_family: OsFamily
    evidence: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {'image_id': self.image_id, 'os_family': self.os_family.value, 'evidence': list(self.evidence)}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'OsFingerprint':
        return cls(d['image_id'], OsFamily(d['os_family']), tuple(d.get('evidence', [])))


@dataclass(frozen=True)
class MinerFingerprint:
    image_id: str
    miner_software: str = UNKNOWN
    version: str = UNKNOWN
    evidence_path: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'image_id': self.image_id,
            'miner_software': self.miner_software,
            'version': self.version,
            'evidence_path': self.evidence_path,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'MinerFingerprint':
        return cls(d['image_id'], d.get('miner_software', UNKNOWN), d.get('version', UNKNOWN), d.get('evidence_path'))


@dataclass(frozen=True)
class ComponentVersion:
    name: str
    version: str
    evidence_path: str

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'version': self.version, 'evidence_path': self.evidence_path}


@dataclass(frozen=True)
class ShadowEntry:
    user: str
    hash_class: str
    locked: bool
    password_hash: str = ''

    def __iter__(self):
        # unpacks as (user, hash_class, locked)
        return iter((self.user, self.hash_class, self.locked))
