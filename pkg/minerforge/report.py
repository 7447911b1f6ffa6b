import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd
from terminaltables import GithubFlavoredMarkdownTable

from minerforge.attack import SCENARIOS, Objective, ScenarioMatrix
from minerforge.helpers import ConsistencyError, UnknownFormatError, dumps_line
from minerforge.models import FIRMWARE_CLASSES, STAGE_ORDER, UNKNOWN, ArtifactClass, ArtifactRecord, \
    FirmwareImage, Inventory, MinerFingerprint, OsFamily, OsFingerprint, Stage, StageOutcome, Verdict

logger = logging.getLogger('report')

FORMATS = ('json-lines', 'csv', 'markdown-table')

INITIAL_ROW = 'Initial candidates'
INITIAL_CAUSE = 'Flash + update artifacts'
STAGE_LABELS = {
    Stage.INTEGRITY: 'Integrity filtering',
    Stage.DECRYPTION: 'Decryption step',
    Stage.RECONSTRUCTION: 'Reconstruction step',
    Stage.DEDUPLICATION: 'Deduplication',
}
FUNNEL_HEADERS = ['Filtering stage', 'Remaining', 'Removed', 'Main cause']

SCENARIO_LABELS = {
    Objective.FULL_TAKEOVER: 'Full device takeover',
    Objective.REVENUE_REDIRECTION: 'Revenue redirection',
    Objective.PHYSICAL_DEGRADATION: 'Physical degradation',
    Objective.PERFORMANCE_DISRUPTION: 'Performance disruption',
}
MATRIX_TITLE = 'Attack scenario on LAN'

SUMMARY_TOTALS = 'totals'
SUMMARY_BREAKDOWNS = ('per_vendor_images', 'per_class_artifacts', 'os_families', 'miner_software')
TOTAL_FIELDS = {'images': 'image_total', 'artifacts': 'artifact_total'}

UNASSESSED_CAVEAT = ('Models without any analysable firmware artifact are excluded from the counts above. '
                     'Their exposure is unknown and conclusions about them should be taken with caution.')


@dataclass(frozen=True)
class StageRow:
    stage_name: str
    remaining: int
    removed: int
    main_cause: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {'stage': self.stage_name, 'remaining': self.remaining, 'removed': self.removed,
                'main_cause': self.main_cause}


@dataclass(frozen=True)
class FunnelReport:
    """Staged corpus reduction. Construction fails unless every row's
    remaining equals the previous remaining minus its removed."""

    rows: Tuple[StageRow, ...]

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, 'rows', rows)

        if not rows:
            raise ConsistencyError("A funnel needs at least its initial row")

        if rows[0].removed != 0:
            raise ConsistencyError("The initial row cannot remove anything")

        for prev, row in zip(rows, rows[1:]):
            if row.removed < 0 or row.remaining != prev.remaining - row.removed:
                raise ConsistencyError(f"{row.stage_name}: {prev.remaining} - {row.removed} != {row.remaining}")

        if rows[-1].remaining < 0:
            raise ConsistencyError("Remaining count went negative")

    @property
    def initial(self) -> int:
        return self.rows[0].remaining

    @property
    def final(self) -> int:
        return self.rows[-1].remaining

    def to_records(self) -> List[Dict[str, Any]]:
        return [r.to_dict() for r in self.rows]

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> 'FunnelReport':
        try:
            return cls(tuple(StageRow(r['stage'], int(r['remaining']), int(r['removed']), r.get('main_cause', ''))
                             for r in records))
        except (KeyError, TypeError, ValueError) as e:
            raise ConsistencyError(f"Malformed funnel record ({e})") from e


def main_cause(reasons: Iterable[str]) -> str:
    """Most frequent reason; ties go to the lexicographically smallest."""
    counts = Counter(reasons)

    if not counts:
        return ''

    return min(counts.items(), key=lambda i: (-i[1], i[0]))[0]


def funnel_report(outcomes: Sequence[StageOutcome], candidates: Optional[Iterable[str]] = None) -> FunnelReport:
    """Fold stage outcomes into the funnel.

    Every artifact enters Integrity; an artifact that passes a stage must
    have an outcome at the next one, and one removed must have none after.
    """
    by_artifact: Dict[str, Dict[Stage, StageOutcome]] = {}

    for o in outcomes:
        stages = by_artifact.setdefault(o.artifact_id, {})

        if o.stage in stages:
            raise ConsistencyError(f"{o.artifact_id}: two outcomes at {o.stage.value}")

        stages[o.stage] = o

    if candidates is not None:
        candidates = set(candidates)
        missing = sorted(candidates - set(by_artifact))
        stray = sorted(set(by_artifact) - candidates)

        if missing:
            raise ConsistencyError(f"{len(missing)} candidates have no outcome, first {missing[0]}")

        if stray:
            raise ConsistencyError(f"Outcomes for non-candidate artifacts, first {stray[0]}")

    removed_reasons: Dict[Stage, List[str]] = {s: [] for s in STAGE_ORDER}

    for aid, stages in sorted(by_artifact.items()):
        alive = True

        for stage in STAGE_ORDER:
            o = stages.get(stage)

            if not alive:
                if o is not None:
                    raise ConsistencyError(f"{aid}: outcome at {stage.value} after removal")
                continue

            if o is None:
                raise ConsistencyError(f"{aid}: missing outcome at {stage.value}")

            if o.verdict == Verdict.REMOVED:
                removed_reasons[stage].append(o.reason)
                alive = False

    remaining = len(by_artifact)
    rows = [StageRow(INITIAL_ROW, remaining, 0, INITIAL_CAUSE)]

    for stage in STAGE_ORDER:
        removed = len(removed_reasons[stage])
        remaining -= removed
        rows.append(StageRow(STAGE_LABELS[stage], remaining, removed, main_cause(removed_reasons[stage])))

    report = FunnelReport(tuple(rows))
    logger.info(f"Funnel {report.initial} -> {report.final}")

    return report


@dataclass
class CorpusSummary:
    per_vendor_images: Dict[str, int] = field(default_factory=dict)
    per_class_artifacts: Dict[str, int] = field(default_factory=dict)
    per_vendor_class_counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    os_families: Dict[str, int] = field(default_factory=dict)
    miner_software: Dict[str, int] = field(default_factory=dict)
    image_total: int = 0
    artifact_total: int = 0

    def __post_init__(self):
        image_sums = {'per_vendor_images': self.per_vendor_images, 'os_families': self.os_families,
                      'miner_software': self.miner_software}

        for name, breakdown in image_sums.items():
            if breakdown and sum(breakdown.values()) != self.image_total:
                raise ConsistencyError(f"{name} sums to {sum(breakdown.values())}, not {self.image_total}")

        if sum(self.per_class_artifacts.values()) != self.artifact_total:
            raise ConsistencyError(f"Artifact classes sum to {sum(self.per_class_artifacts.values())}, "
                                   f"not {self.artifact_total}")

        nested = sum(sum(v.values()) for v in self.per_vendor_class_counts.values())

        if self.per_vendor_class_counts and nested != self.artifact_total:
            raise ConsistencyError(f"Per-vendor artifact classes sum to {nested}, not {self.artifact_total}")

    @property
    def candidate_total(self) -> int:
        return sum(self.per_class_artifacts.get(c.value, 0) for c in FIRMWARE_CLASSES)

    def to_records(self) -> List[Dict[str, Any]]:
        records = [{'breakdown': SUMMARY_TOTALS, 'key': 'images', 'count': self.image_total},
                   {'breakdown': SUMMARY_TOTALS, 'key': 'artifacts', 'count': self.artifact_total}]

        for name in SUMMARY_BREAKDOWNS:
            for key, count in getattr(self, name).items():
                records.append({'breakdown': name, 'key': key, 'count': count})

        for vendor, classes in self.per_vendor_class_counts.items():
            for key, count in classes.items():
                records.append({'breakdown': f"artifacts:{vendor}", 'key': key, 'count': count})

        return records

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> 'CorpusSummary':
        fields: Dict[str, Any] = {name: {} for name in SUMMARY_BREAKDOWNS}
        fields['per_vendor_class_counts'] = {}

        try:
            for r in records:
                breakdown, key, count = r['breakdown'], r['key'], int(r['count'])

                if breakdown == SUMMARY_TOTALS and key in TOTAL_FIELDS:
                    fields[TOTAL_FIELDS[key]] = count
                elif breakdown in SUMMARY_BREAKDOWNS:
                    fields[breakdown][key] = count
                elif breakdown.startswith('artifacts:'):
                    fields['per_vendor_class_counts'].setdefault(breakdown[len('artifacts:'):], {})[key] = count
                else:
                    raise ValueError(f"unknown breakdown {breakdown!r}")
        except (KeyError, TypeError, ValueError) as e:
            raise ConsistencyError(f"Malformed summary record ({e})") from e

        return cls(**fields)


def _counts(values: Sequence[str], order: Sequence[str] = (), zeros: bool = False) -> Dict[str, int]:
    """value_counts in a stable order: the given keys first, then the rest sorted.

    With zeros every key of order is listed, counted or not.
    """
    counts = pd.Series(list(values), dtype=object).value_counts()
    out = {k: int(counts.get(k, 0)) for k in order if zeros or k in counts.index}

    for k in sorted(k for k in counts.index if k not in out):
        out[k] = int(counts[k])

    return out


def corpus_summary(catalog: Sequence[ArtifactRecord], images: Sequence[FirmwareImage],
                   os_fingerprints: Sequence[OsFingerprint] = (), miner_fingerprints: Sequence[MinerFingerprint] = (),
                   vendors: Sequence[str] = ()) -> CorpusSummary:
    """Per-vendor, per-class, OS and miner-software breakdowns with exact sums.

    Images lacking an OS or miner fingerprint count as Unknown / unknown.
    """
    by_id = {r.artifact_id: r for r in catalog}
    image_ids = {i.image_id for i in images}

    for i in images:
        if i.artifact_id not in by_id:
            raise ConsistencyError(f"Image {i.image_id} references uncatalogued artifact {i.artifact_id}")

    for fp in list(os_fingerprints) + list(miner_fingerprints):
        if fp.image_id not in image_ids:
            raise ConsistencyError(f"Fingerprint for unknown image {fp.image_id}")

    os_of = {fp.image_id: fp.os_family.value for fp in os_fingerprints}
    miner_of = {fp.image_id: fp.miner_software for fp in miner_fingerprints}
    class_order = [c.value for c in ArtifactClass]

    df = pd.DataFrame([(r.manufacturer, r.artifact_class.value) for r in catalog],
                      columns=['manufacturer', 'artifact_class'])
    per_vendor_class = {}

    for vendor, group in df.groupby('manufacturer', sort=True):
        per_vendor_class[str(vendor)] = _counts(list(group['artifact_class']), class_order, zeros=True)

    for vendor in vendors:
        per_vendor_class.setdefault(vendor, dict.fromkeys(class_order, 0))

    if per_vendor_class:
        order = [v for v in vendors if v in per_vendor_class] + sorted(v for v in per_vendor_class
                                                                        if v not in vendors)
        per_vendor_class = {v: per_vendor_class[v] for v in order}

    ordered_images = sorted(images, key=lambda i: i.image_id)

    summary = CorpusSummary(
            per_vendor_images=_counts([by_id[i.artifact_id].manufacturer for i in ordered_images], vendors,
                                      zeros=True),
            per_class_artifacts=_counts(list(df['artifact_class']), class_order, zeros=True),
            per_vendor_class_counts=per_vendor_class,
            os_families=_counts([os_of.get(i.image_id, OsFamily.UNKNOWN.value) for i in ordered_images],
                                [f.value for f in OsFamily]),
            miner_software=_counts([miner_of.get(i.image_id, UNKNOWN) for i in ordered_images]),
            image_total=len(images),
            artifact_total=len(catalog),
    )

    if images:
        summary.os_families.setdefault(OsFamily.UNKNOWN.value, 0)

    return summary


def chronological_listing(inventory: Inventory) -> List[Tuple[str, List[Tuple[str, str, str]]]]:
    """Models grouped by vendor, ordered by release year then name; undated models last."""
    groups: Dict[str, List[Tuple[Any, str, str]]] = {}

    for m in inventory.models:
        year_key = (m.release_year is None, m.release_year or 0)
        groups.setdefault(m.manufacturer, []).append((year_key, m.model_name, m.family))

    listing = []

    for vendor in dict.fromkeys(m.manufacturer for m in inventory.models):
        models = sorted(groups[vendor], key=lambda t: (t[0], t[1]))
        listing.append((vendor, [(name, family, str(y[1]) if not y[0] else UNKNOWN) for y, name, family in models]))

    return listing


def _funnel_table(report: FunnelReport) -> Tuple[List[str], List[List[Any]]]:
    rows = []

    for n, r in enumerate(report.rows):
        rows.append([r.stage_name, r.remaining, '--' if n == 0 else r.removed, r.main_cause])

    return FUNNEL_HEADERS, rows


def _matrix_table(matrix: ScenarioMatrix) -> Tuple[List[str], List[List[Any]]]:
    headers = [MATRIX_TITLE] + [f"{v} ({matrix.totals[v]})" for v in matrix.vendors]
    rows = [[SCENARIO_LABELS[s]] + [matrix.rows[s][v] for v in matrix.vendors] for s in SCENARIOS]

    return headers, rows


def _summary_table(summary: CorpusSummary) -> Tuple[List[str], List[List[Any]]]:
    return ['Breakdown', 'Value', 'Count'], [[r['breakdown'], r['key'], r['count']] for r in summary.to_records()]


def _records_table(records: List[Dict[str, Any]]) -> Tuple[List[str], List[List[Any]]]:
    if not records:
        return [], []

    headers = list(records[0].keys())

    return headers, [[_cell(r.get(h)) for h in headers] for r in records]


def _cell(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return ' '.join(str(v) for v in value)

    return '' if value is None else value


def _as_records(report: Any) -> List[Dict[str, Any]]:
    if hasattr(report, 'to_records'):
        return report.to_records()

    return [r.to_dict() for r in report]


def _as_table(report: Any) -> Tuple[List[str], List[List[Any]]]:
    if isinstance(report, FunnelReport):
        return _funnel_table(report)

    if isinstance(report, ScenarioMatrix):
        return _matrix_table(report)

    if isinstance(report, CorpusSummary):
        return _summary_table(report)

    return _records_table(_as_records(report))


def markdown_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    if not headers:
        return ''

    table = GithubFlavoredMarkdownTable([[str(h) for h in headers]] + [[str(c) for c in r] for r in rows])

    return table.table + '\n'


def render(report: Any, fmt: str) -> bytes:
    """Serialize a report object deterministically, with '\\n' line endings."""
    if fmt not in FORMATS:
        raise UnknownFormatError(f"Unknown format {fmt!r}, expected one of {', '.join(FORMATS)}")

    if fmt == 'json-lines':
        text = ''.join(dumps_line(r) + '\n' for r in _as_records(report))
    elif fmt == 'csv':
        headers, rows = _as_table(report)

        if not headers:
            text = ''
        else:
            buf = io.StringIO()
            pd.DataFrame(rows, columns=headers).to_csv(buf, index=False, lineterminator='\n')
            text = buf.getvalue()
    else:
        text = markdown_table(*_as_table(report))

    return text.encode('utf-8')


def _parse_lines(data: bytes, kind: str) -> List[Dict[str, Any]]:
    try:
        return [json.loads(line) for line in data.decode('utf-8').splitlines() if line.strip()]
    except ValueError as e:
        raise ConsistencyError(f"Not a json-lines {kind} ({e})") from e


def parse_funnel(data: bytes) -> FunnelReport:
    """Inverse of render(report, 'json-lines') for a FunnelReport."""
    return FunnelReport.from_records(_parse_lines(data, 'funnel'))


def parse_matrix(data: bytes) -> ScenarioMatrix:
    """Inverse of render(matrix, 'json-lines')."""
    return ScenarioMatrix.from_records(_parse_lines(data, 'matrix'))


def parse_summary(data: bytes) -> CorpusSummary:
    """Inverse of render(summary, 'json-lines')."""
    return CorpusSummary.from_records(_parse_lines(data, 'summary'))


def render_chronological(inventory: Inventory) -> str:
    sections = []

    for vendor, models in chronological_listing(inventory):
        sections.append(f"### {vendor}\n\n" + markdown_table(['Model', 'Family', 'Year'], models))

    return '\n'.join(sections)


def render_unassessed(matrix: ScenarioMatrix) -> str:
    """Appendix listing the models the matrix could not classify."""
    text = UNASSESSED_CAVEAT + '\n\n'

    return text + markdown_table(['Manufacturer', 'Model'], [list(k) for k in matrix.unassessed])


def render_document(sections: Sequence[Tuple[str, Any]], fmt: str) -> bytes:
    """Several titled reports in one stream.

    Markdown gets a heading per section, csv a blank line between tables and
    json-lines a 'section' key on every record.
    """
    if fmt not in FORMATS:
        raise UnknownFormatError(f"Unknown format {fmt!r}, expected one of {', '.join(FORMATS)}")

    parts = []

    for title, report in sections:
        # prose sections only exist in markdown
        if isinstance(report, str) and fmt != 'markdown-table':
            continue

        if fmt == 'json-lines':
            parts.append(''.join(dumps_line(dict([('section', title)] + list(r.items()))) + '\n'
                                 for r in _as_records(report)))
        elif fmt == 'csv':
            parts.append(render(report, fmt).decode('utf-8'))
        elif isinstance(report, str):
            parts.append(f"## {title}\n\n{report}")
        else:
            parts.append(f"## {title}\n\n" + render(report, fmt).decode('utf-8'))

    separator = '' if fmt == 'json-lines' else '\n'

    return separator.join(parts).encode('utf-8')
