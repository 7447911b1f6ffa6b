import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import pandas as pd

from minerforge.helpers import ConsistencyError, UsageError, load_yaml_data, read_jsonl, write_jsonl
from minerforge.models import EntryPoint, Finding, Inventory, TriageState
from minerforge.rules import VULN_CLASSES

logger = logging.getLogger('attack')

WILDCARD = '*'


class Capability(str, Enum):
    REMOTE_CODE_EXECUTION = 'RemoteCodeExecution'
    CONFIG_CONTROL = 'ConfigControl'
    HARDWARE_CONTROL = 'HardwareControl'
    DISRUPTION = 'Disruption'


class Objective(str, Enum):
    FULL_TAKEOVER = 'FullTakeover'
    REVENUE_REDIRECTION = 'RevenueRedirection'
    PHYSICAL_DEGRADATION = 'PhysicalDegradation'
    PERFORMANCE_DISRUPTION = 'PerformanceDisruption'
    NONE = 'None'

    @property
    def color(self) -> str:
        return OBJECTIVE_COLORS[self]

    @property
    def rank(self) -> int:
        return OBJECTIVE_RANKS[self]


OBJECTIVE_COLORS = {
    Objective.FULL_TAKEOVER: 'red',
    Objective.REVENUE_REDIRECTION: 'orange',
    Objective.PHYSICAL_DEGRADATION: 'yellow',
    Objective.PERFORMANCE_DISRUPTION: 'blue',
    Objective.NONE: 'black',
}

OBJECTIVE_RANKS = {
    Objective.FULL_TAKEOVER: 4,
    Objective.REVENUE_REDIRECTION: 3,
    Objective.PHYSICAL_DEGRADATION: 2,
    Objective.PERFORMANCE_DISRUPTION: 1,
    Objective.NONE: 0,
}

# Strongest first; each capability enables the objective beside it
CAPABILITY_OBJECTIVES = [
    (Capability.REMOTE_CODE_EXECUTION, Objective.FULL_TAKEOVER),
    (Capability.CONFIG_CONTROL, Objective.REVENUE_REDIRECTION),
    (Capability.HARDWARE_CONTROL, Objective.PHYSICAL_DEGRADATION),
    (Capability.DISRUPTION, Objective.PERFORMANCE_DISRUPTION),
]

SCENARIOS = [objective for _, objective in CAPABILITY_OBJECTIVES]

# markers for the non-scenario records of a rendered matrix
MATRIX_TOTAL = 'Total'
MATRIX_UNASSESSED = 'Unassessed'


def capability_graph() -> nx.DiGraph:
    """Implication edges: RCE -> ConfigControl -> HardwareControl -> Disruption."""
    g = nx.DiGraph()
    ordered = [capability for capability, _ in CAPABILITY_OBJECTIVES]
    g.add_nodes_from(ordered)
    g.add_edges_from(zip(ordered, ordered[1:]))

    return g


CAPABILITY_GRAPH = capability_graph()


def downward_closure(capabilities: Iterable[Capability]) -> FrozenSet[Capability]:
    closed = set()

    for capability in capabilities:
        closed.add(capability)
        closed |= nx.descendants(CAPABILITY_GRAPH, capability)

    return frozenset(closed)


class MappingEntry(NamedTuple):
    vuln_class: str
    entry_point: str
    capability: Capability
    requires_on_path: bool = False


@dataclass
class MappingTable:
    entries: List[MappingEntry]
    source: str = '<mapping>'
    index: Dict[Tuple[str, str], MappingEntry] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {}

        for e in self.entries:
            key = (e.vuln_class, e.entry_point)

            if key in self.index:
                raise UsageError(f"{self.source}: duplicate mapping for {e.vuln_class}@{e.entry_point}")

            self.index[key] = e

    def lookup(self, vuln_class: str, entry_point: str) -> Optional[MappingEntry]:
        return self.index.get((vuln_class, entry_point)) or self.index.get((vuln_class, WILDCARD))

    @property
    def classes(self) -> FrozenSet[str]:
        return frozenset(e.vuln_class for e in self.entries)

    @classmethod
    def load(cls, path: Optional[str] = None, vuln_classes: Sequence[str] = VULN_CLASSES) -> 'MappingTable':
        """Parse a mapping file; every listed vulnerability class must be covered."""
        source = path or 'mapping.yaml'
        doc = load_yaml_data('mapping.yaml', path)
        raw = doc.get('mapping') if isinstance(doc, dict) else doc

        if not isinstance(raw, list):
            raise UsageError(f"{source}: expected a 'mapping' list")

        entries = []
        entry_points = {e.value for e in EntryPoint} | {WILDCARD}

        for n, item in enumerate(raw):
            where = f"{source}: mapping[{n}]"

            if not isinstance(item, dict):
                raise UsageError(f"{where} must be a mapping")

            vuln_class = item.get('class')
            entry_point = str(item.get('entry_point', WILDCARD))

            if vuln_class not in vuln_classes:
                raise UsageError(f"{where}: unknown vulnerability class {vuln_class!r}")

            if entry_point not in entry_points:
                raise UsageError(f"{where}: unknown entry point {entry_point!r}")

            try:
                capability = Capability(item.get('capability'))
            except ValueError:
                raise UsageError(f"{where}: unknown capability {item.get('capability')!r}")

            entries.append(MappingEntry(vuln_class, entry_point, capability, bool(item.get('requires_on_path'))))

        table = cls(entries, source)
        missing = sorted(set(vuln_classes) - table.classes)

        if missing:
            raise UsageError(f"{source}: no mapping for {', '.join(missing)}")

        return table


@dataclass(frozen=True)
class CapabilityProfile:
    image_id: str
    capabilities: FrozenSet[Capability] = frozenset()
    # triage keys (rule_id:evidence_path) of the findings that contributed
    contributing: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            'image_id': self.image_id,
            'capabilities': [c.value for c, _ in CAPABILITY_OBJECTIVES if c in self.capabilities],
            'contributing': list(self.contributing),
            'objective': dominant_scenario(self).value,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'CapabilityProfile':
        return cls(d['image_id'], frozenset(Capability(c) for c in d.get('capabilities', [])),
                   tuple(d.get('contributing', [])))


def infer_capabilities(findings: Sequence[Finding], table: MappingTable, lan_only: bool = False,
                       image_id: Optional[str] = None) -> CapabilityProfile:
    """Union of mapped capabilities, closed downward.

    Rejected findings are ignored. With lan_only, mappings that need an
    on-path adversary are ignored too.
    """
    images = {f.image_id for f in findings}

    if image_id is not None:
        images.add(image_id)

    if len(images) > 1:
        raise ConsistencyError(f"Findings span several images: {', '.join(sorted(images))}")

    image_id = images.pop() if images else ''
    mapped = set()
    contributing = []

    for f in findings:
        if f.triage == TriageState.REJECTED:
            continue

        entry = table.lookup(f.vuln_class, f.entry_point.value)

        if entry is None:
            logger.warning(f"{image_id}: no mapping for {f.vuln_class}@{f.entry_point.value} ({f.rule_id}), ignored")
            continue

        if lan_only and entry.requires_on_path:
            logger.debug(f"{image_id}: {f.rule_id} needs an on-path adversary, skipped for LAN-only")
            continue

        mapped.add(entry.capability)
        contributing.append(f.triage_key)

    return CapabilityProfile(image_id, downward_closure(mapped), tuple(sorted(set(contributing))))


def infer_profiles(findings: Sequence[Finding], table: MappingTable, lan_only: bool = False,
                   image_ids: Iterable[str] = ()) -> List[CapabilityProfile]:
    """One profile per image; image_ids adds images that produced no findings."""
    by_image: Dict[str, List[Finding]] = {i: [] for i in image_ids}

    for f in findings:
        by_image.setdefault(f.image_id, []).append(f)

    return [infer_capabilities(fs, table, lan_only, image_id) for image_id, fs in sorted(by_image.items())]


def dominant_scenario(profile: CapabilityProfile) -> Objective:
    for capability, objective in CAPABILITY_OBJECTIVES:
        if capability in profile.capabilities:
            return objective

    return Objective.NONE


def compare_scenarios(a: Objective, b: Objective) -> int:
    """-1, 0 or 1 as a is weaker than, equal to or stronger than b."""
    return (a.rank > b.rank) - (a.rank < b.rank)


def worst_scenario(objectives: Iterable[Objective]) -> Objective:
    return max(objectives, key=lambda o: o.rank, default=Objective.NONE)


class ModelAssignment(NamedTuple):
    manufacturer: str
    model_name: str
    image_id: str


def model_objectives(profiles: Sequence[CapabilityProfile],
                     assignments: Sequence[ModelAssignment]) -> Dict[Tuple[str, str], Objective]:
    """Worst-case objective per model over the images assigned to it."""
    by_image = {p.image_id: p for p in profiles}
    per_model: Dict[Tuple[str, str], List[Objective]] = {}

    for a in assignments:
        profile = by_image.get(a.image_id)

        if profile is None:
            raise ConsistencyError(f"{a.manufacturer} {a.model_name}: no profile for image {a.image_id}")

        per_model.setdefault((a.manufacturer, a.model_name), []).append(dominant_scenario(profile))

    return {key: worst_scenario(objectives) for key, objectives in sorted(per_model.items())}


@dataclass
class ScenarioMatrix:
    vendors: List[str]
    totals: Dict[str, int]
    rows: Dict[Objective, Dict[str, int]]
    unassessed: List[Tuple[str, str]] = field(default_factory=list)

    def count(self, scenario: Objective, vendor: str) -> int:
        return self.rows[scenario][vendor]

    def to_records(self) -> List[Dict[str, Any]]:
        """Scenario rows, then the per-vendor totals, then one record per unassessed model."""
        records = [dict([('scenario', s.value), ('color', s.color)] + [(v, self.rows[s][v]) for v in self.vendors])
                   for s in SCENARIOS]
        records.append(dict([('scenario', MATRIX_TOTAL)] + [(v, self.totals[v]) for v in self.vendors]))
        records += [{'scenario': MATRIX_UNASSESSED, 'manufacturer': m, 'model_name': n} for m, n in self.unassessed]

        return records

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> 'ScenarioMatrix':
        vendors: Optional[List[str]] = None
        totals: Dict[str, int] = {}
        rows: Dict[Objective, Dict[str, int]] = {}
        unassessed = []

        try:
            for r in records:
                scenario = r['scenario']

                if scenario == MATRIX_TOTAL:
                    vendors = [k for k in r if k != 'scenario']
                    totals = {v: int(r[v]) for v in vendors}
                elif scenario == MATRIX_UNASSESSED:
                    unassessed.append((r['manufacturer'], r['model_name']))
                else:
                    rows[Objective(scenario)] = {k: int(v) for k, v in r.items() if k not in ('scenario', 'color')}
        except (KeyError, TypeError, ValueError) as e:
            raise ConsistencyError(f"Malformed matrix record ({e})") from e

        if vendors is None:
            raise ConsistencyError("Matrix records carry no totals")

        if set(rows) != set(SCENARIOS) or any(list(rows[s]) != vendors for s in SCENARIOS):
            raise ConsistencyError("Matrix records do not cover every scenario and vendor")

        return cls(vendors, totals, {s: rows[s] for s in SCENARIOS}, unassessed)


def scenario_matrix(objectives: Mapping[Tuple[str, str], Objective], inventory: Inventory,
                    vendors: Optional[Sequence[str]] = None) -> ScenarioMatrix:
    """Models per vendor whose objective reaches each scenario.

    Counts are cumulative: a model at a stronger scenario also counts for
    every weaker one. Inventory models without an objective are unassessed.
    """
    known = set(inventory.keys())
    stray = sorted(set(objectives) - known)

    if stray:
        raise ConsistencyError(f"Objectives for models missing from the inventory: {stray}")

    if vendors is None:
        vendors = list(dict.fromkeys(m.manufacturer for m in inventory.models))

    counts = inventory.per_vendor_counts
    totals = {v: counts.get(v, 0) for v in vendors}
    rows = {s: {v: 0 for v in vendors} for s in SCENARIOS}

    for (vendor, _), objective in objectives.items():
        if vendor not in totals:
            continue

        for s in SCENARIOS:
            if objective.rank >= s.rank:
                rows[s][vendor] += 1

    unassessed = sorted(k for k in inventory.keys() if k not in objectives)

    if unassessed:
        logger.info(f"{len(unassessed)} models unassessed")

    return ScenarioMatrix(list(vendors), totals, rows, unassessed)


def load_assignments(path: Path) -> List[ModelAssignment]:
    """manufacturer,model_name,image_id rows from a CSV file."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, ValueError) as e:
        raise UsageError(f"Cannot read model assignments {path}: {e}") from e

    missing = [c for c in ModelAssignment._fields if c not in df.columns]

    if missing:
        raise UsageError(f"{path}: missing columns {', '.join(missing)}")

    return [ModelAssignment(r.manufacturer, r.model_name, r.image_id) for r in df.itertuples(index=False)]


def write_profiles(profiles: Sequence[CapabilityProfile], path: Path) -> None:
    write_jsonl(path, (p.to_dict() for p in profiles))


def read_profiles(path: Path) -> List[CapabilityProfile]:
    try:
        return [CapabilityProfile.from_dict(d) for d in read_jsonl(path)]
    except (KeyError, ValueError) as e:
        raise ConsistencyError(f"{path}: malformed profile ({e})") from e


def write_objectives(objectives: Mapping[Tuple[str, str], Objective], path: Path) -> None:
    write_jsonl(path, ({'manufacturer': m, 'model_name': n, 'objective': o.value}
                       for (m, n), o in sorted(objectives.items())))


def read_objectives(path: Path) -> Dict[Tuple[str, str], Objective]:
    try:
        return {(d['manufacturer'], d['model_name']): Objective(d['objective']) for d in read_jsonl(path)}
    except (KeyError, ValueError) as e:
        raise ConsistencyError(f"{path}: malformed model objective ({e})") from e
