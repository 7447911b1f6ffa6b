import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from minerforge.catalog import candidate_artifacts
from minerforge.decryptor import DecryptorPlugin
from minerforge.dedup import Cluster, dedup_outcomes, deduplicate, write_clusters
from minerforge.extractor import artifact_reader, extract_records
from minerforge.helpers import ConsistencyError, read_jsonl, write_jsonl
from minerforge.models import STAGE_ORDER, ArtifactRecord, FirmwareImage, Stage, StageOutcome
from minerforge.report import FunnelReport, funnel_report

logger = logging.getLogger('pipeline')

OUTCOMES_NAME = 'outcomes.jsonl'
CLUSTERS_NAME = 'clusters.jsonl'


@dataclass
class FunnelRun:
    # images surviving deduplication
    images: List[FirmwareImage]
    outcomes: List[StageOutcome]
    clusters: List[Cluster]
    report: FunnelReport


def sort_outcomes(outcomes: Sequence[StageOutcome]) -> List[StageOutcome]:
    return sorted(outcomes, key=lambda o: (o.artifact_id, STAGE_ORDER.index(o.stage)))


def write_outcomes(outcomes: Sequence[StageOutcome], path: Path) -> None:
    write_jsonl(path, (o.to_dict() for o in sort_outcomes(outcomes)))


def read_outcomes(path: Path) -> List[StageOutcome]:
    try:
        return [StageOutcome.from_dict(d) for d in read_jsonl(path)]
    except (KeyError, ValueError) as e:
        raise ConsistencyError(f"{path}: malformed stage outcome ({e})") from e


def apply_dedup(images: Sequence[FirmwareImage], outcomes: Sequence[StageOutcome], c,
                threshold: Optional[float] = None,
                mode: Optional[str] = None) -> Tuple[List[Cluster], List[StageOutcome]]:
    """Cluster the images and replace any earlier Deduplication outcomes."""
    clusters = deduplicate(images, c, threshold, mode) if images else []
    artifact_of = {i.image_id: i.artifact_id for i in images}
    kept = [o for o in outcomes if o.stage != Stage.DEDUPLICATION]

    return clusters, sort_outcomes(kept + dedup_outcomes(clusters, artifact_of))


def run_funnel(records: Sequence[ArtifactRecord], data_for: Callable[[ArtifactRecord], bytes],
               plugins: Sequence[DecryptorPlugin], out_dir: Path, c) -> FunnelRun:
    """Integrity, Decryption, Reconstruction and Deduplication over the firmware candidates.

    Every candidate gets exactly one outcome per stage it entered; the
    funnel report is checked against them before anything is written.
    """
    out_dir = Path(out_dir)
    candidates = candidate_artifacts(records)
    logger.info(f"{len(candidates)} firmware candidates out of {len(records)} artifacts")

    images, outcomes = extract_records(candidates, data_for, plugins, out_dir, c)
    clusters, outcomes = apply_dedup(images, outcomes, c)
    report = funnel_report(outcomes, [r.artifact_id for r in candidates])

    survivors = {o.artifact_id for o in outcomes if o.stage == Stage.DEDUPLICATION and not o.removed}
    kept = [i for i in images if i.artifact_id in survivors]

    write_outcomes(outcomes, out_dir / OUTCOMES_NAME)
    write_clusters(clusters, out_dir / CLUSTERS_NAME)

    return FunnelRun(kept, outcomes, clusters, report)


def run_directory(records: Sequence[ArtifactRecord], source_root: Path, plugins: Sequence[DecryptorPlugin],
                  out_dir: Path, c) -> FunnelRun:
    return run_funnel(records, artifact_reader(source_root), plugins, out_dir, c)
