import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
from datasketch import MinHash

from minerforge.helpers import DedupError, SignatureMismatch, UsageError, write_jsonl
from minerforge.models import UNKNOWN, Completeness, FirmwareImage, Stage, StageOutcome, passed, removed

logger = logging.getLogger('dedup')

MODES = ('estimated', 'exact')
REASON_REPRESENTATIVE = 'cluster representative'
REASON_VARIANT = 'retained cross-version variant'
REASON_REDUNDANT = 'redundant variant'


@dataclass(frozen=True)
class SimilaritySignature:
    image_id: str
    chunk_hashes: FrozenSet[int]
    minhash: MinHash
    num_perm: int
    seed: int


class ImageSummary(NamedTuple):
    image_id: str
    completeness: Completeness
    file_count: int
    generation: str


@dataclass
class Cluster:
    members: List[str]
    representative: str
    pairwise_evidence: List[Tuple[str, str, float]] = field(default_factory=list)
    retained: List[str] = field(default_factory=list)
    cluster_id: int = 0

    def to_dict(self):
        return {
            'cluster_id': self.cluster_id,
            'members': list(self.members),
            'representative': self.representative,
            'retained': list(self.retained),
            'evidence': [[a, b, round(s, 6)] for a, b, s in self.pairwise_evidence],
        }


def summarize(image: FirmwareImage) -> ImageSummary:
    return ImageSummary(image.image_id, image.completeness, image.file_count, image.generation)


def iter_chunks(root: Path, files: Sequence[str], chunk_size: int) -> Iterator[bytes]:
    """Fixed-size chunks over the concatenation of files in the given order."""
    buf = bytearray()

    for relative in files:
        try:
            with (root / relative).open('rb') as f:
                while True:
                    block = f.read(chunk_size)

                    if not block:
                        break

                    buf += block

                    while len(buf) >= chunk_size:
                        yield bytes(buf[:chunk_size])
                        del buf[:chunk_size]
        except OSError as e:
            logger.warning(f"Cannot read {root / relative}: {e}")

    if buf:
        yield bytes(buf)


def chunk_hash(chunk: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(chunk, digest_size=8).digest(), 'big')


def signature_from_hashes(image_id: str, hashes: FrozenSet[int], k: int = 128, seed: int = 1) -> SimilaritySignature:
    if not hashes:
        raise DedupError(f"Image {image_id} has no content to sign")

    m = MinHash(num_perm=k, seed=seed)
    m.update_batch([h.to_bytes(8, 'big') for h in sorted(hashes)])

    return SimilaritySignature(image_id, frozenset(hashes), m, k, seed)


def signature(image: FirmwareImage, chunk_size: int = 4096, k: int = 128, seed: int = 1) -> SimilaritySignature:
    files = image.files()
    hashes = frozenset(chunk_hash(c) for c in iter_chunks(image.root, files, chunk_size))

    return signature_from_hashes(image.image_id, hashes, k, seed)


def exact_jaccard(a: FrozenSet[int], b: FrozenSet[int]) -> float:
    union = len(a | b)

    return len(a & b) / union if union else 1.0


def similarity(a: SimilaritySignature, b: SimilaritySignature, mode: str = 'estimated') -> float:
    """Jaccard estimate from matching minhash coordinates, or the exact chunk-set Jaccard."""
    if a.num_perm != b.num_perm or a.seed != b.seed:
        raise SignatureMismatch(f"{a.image_id} (k={a.num_perm}, seed={a.seed}) vs "
                                f"{b.image_id} (k={b.num_perm}, seed={b.seed})")

    if mode == 'exact':
        return exact_jaccard(a.chunk_hashes, b.chunk_hashes)

    try:
        return float(a.minhash.jaccard(b.minhash))
    except ValueError as e:
        raise SignatureMismatch(str(e)) from e


def _representative_key(s) -> Tuple[bool, int, str]:
    return s.completeness != Completeness.FULL, -s.file_count, s.image_id


def select_representative(c: Cluster, images: Mapping[str, ImageSummary]) -> str:
    """Full before Partial, then more files, then the smallest image_id."""
    if not c.members:
        raise DedupError("Cannot elect a representative of an empty cluster")

    return min((images[m] for m in c.members), key=_representative_key).image_id


def retained_variants(c: Cluster, images: Mapping[str, ImageSummary], representative: str) -> List[str]:
    """One member per known generation string that differs from the representative's."""
    rep_generation = images[representative].generation
    seen = {rep_generation}
    retained = []

    for s in sorted((images[m] for m in c.members if m != representative), key=_representative_key):
        if s.generation == UNKNOWN or s.generation in seen:
            continue

        seen.add(s.generation)
        retained.append(s.image_id)

    return sorted(retained)


def elect(c: Cluster, images: Mapping[str, ImageSummary]) -> Cluster:
    c.representative = select_representative(c, images)
    c.retained = retained_variants(c, images, c.representative)

    return c


def cluster(signatures: Sequence[SimilaritySignature], threshold: float = 0.9, mode: str = 'estimated',
            images: Optional[Mapping[str, ImageSummary]] = None) -> List[Cluster]:
    """Connected components of the graph joining pairs with similarity >= threshold."""
    if not 0 < threshold <= 1:
        raise UsageError(f"threshold must be in (0, 1], got {threshold}")

    if mode not in MODES:
        raise UsageError(f"mode must be one of {', '.join(MODES)}")

    by_id = {s.image_id: s for s in signatures}

    if len(by_id) != len(signatures):
        raise DedupError("Duplicate image_id among signatures")

    ids = sorted(by_id)
    g = nx.Graph()
    g.add_nodes_from(ids)

    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            s = similarity(by_id[a], by_id[b], mode)

            if s >= threshold:
                g.add_edge(a, b, similarity=s)

    clusters = []

    for component in nx.connected_components(g):
        members = sorted(component)
        evidence = sorted((min(a, b), max(a, b), d['similarity']) for a, b, d in g.subgraph(members).edges(data=True))
        c = Cluster(members=members, representative=members[0], pairwise_evidence=evidence)

        if images is not None:
            elect(c, images)

        clusters.append(c)

    clusters.sort(key=lambda c: c.members[0])

    for n, c in enumerate(clusters):
        c.cluster_id = n

    logger.info(f"{len(ids)} images in {len(clusters)} clusters (threshold {threshold}, {mode})")

    return clusters


def dedup_outcomes(clusters: Sequence[Cluster], artifact_of: Optional[Mapping[str, str]] = None) -> List[StageOutcome]:
    """One Deduplication outcome per member: representatives and retained variants pass."""
    outcomes = []

    for c in clusters:
        for m in c.members:
            aid = artifact_of[m] if artifact_of else m

            if m == c.representative:
                outcomes.append(passed(Stage.DEDUPLICATION, aid, REASON_REPRESENTATIVE))
            elif m in c.retained:
                outcomes.append(passed(Stage.DEDUPLICATION, aid, REASON_VARIANT))
            else:
                outcomes.append(removed(Stage.DEDUPLICATION, aid, REASON_REDUNDANT))

    return sorted(outcomes, key=lambda o: o.artifact_id)


def deduplicate(images: Sequence[FirmwareImage], c, threshold: Optional[float] = None,
                mode: Optional[str] = None) -> List[Cluster]:
    """Sign images in parallel, then cluster and elect serially.

    Images without content cannot be signed and stay singletons.
    """
    def sign(image: FirmwareImage) -> Optional[SimilaritySignature]:
        try:
            return signature(image, c.DEDUP_CHUNK_SIZE, c.DEDUP_NUM_PERM, c.DEDUP_SEED)
        except DedupError:
            return None

    with ThreadPoolExecutor(max_workers=max(1, c.WORKER_JOBS)) as pool:
        signed = list(pool.map(sign, images))

    signatures = [s for s in signed if s is not None]
    signed_ids = {s.image_id for s in signatures}
    empty = sorted(i.image_id for i in images if i.image_id not in signed_ids)

    summaries: Dict[str, ImageSummary] = {i.image_id: summarize(i) for i in images if i.image_id in signed_ids}
    clusters = cluster(signatures, threshold or c.DEDUP_THRESHOLD, mode or c.DEDUP_MODE, summaries)

    if empty:
        logger.info(f"{len(empty)} empty images kept as singletons")
        clusters = sorted(clusters + [Cluster([m], m) for m in empty], key=lambda cl: cl.members[0])

        for n, cl in enumerate(clusters):
            cl.cluster_id = n

    return clusters


def write_clusters(clusters: Sequence[Cluster], path: Path) -> None:
    write_jsonl(path, (c.to_dict() for c in clusters))
