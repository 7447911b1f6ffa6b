import fnmatch
import json
import logging
import os
import posixpath
import shutil
import tarfile
import tempfile
import threading
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple
from urllib.parse import quote, unquote, urldefrag, urljoin, urlsplit, urlunsplit

import requests
from bs4 import BeautifulSoup
from dateutil.tz import tzutc

from minerforge.helpers import LOCK_NAME, CollectorError, PidLock, SchemaError, UsageError, iter_jsonl, \
    safe_join, safe_relpath, sha256_file, write_jsonl
from minerforge.models import ManifestEntry, MirrorManifest

logger = logging.getLogger('collector')

MANIFEST_NAME = 'manifest.jsonl'
RESERVED_NAMES = (MANIFEST_NAME, LOCK_NAME)
VCS_DIRS = ('.git', '.svn', '.hg')
DOWNLOAD_BLOCK = 64 * 1024
DEFAULT_PORTS = {'http': 80, 'https': 443}


@dataclass
class CrawlPlan:
    root_url: str
    max_depth: int = 16
    allow_patterns: List[str] = field(default_factory=list)
    rate_limit: float = 4.0
    same_origin: bool = True

    def __post_init__(self):
        if self.max_depth < 1:
            raise UsageError("max_depth must be at least 1")

        if self.rate_limit <= 0:
            raise UsageError("rate_limit must be positive")

        if not self.root_url.endswith('/'):
            self.root_url += '/'

    @classmethod
    def from_config(cls, c, root_url: str, max_depth: Optional[int] = None,
                    allow_patterns: Optional[List[str]] = None) -> 'CrawlPlan':
        return cls(root_url=root_url,
                   max_depth=max_depth or c.CRAWL_MAX_DEPTH,
                   allow_patterns=list(allow_patterns or []),
                   rate_limit=c.CRAWL_RATE_LIMIT,
                   same_origin=c.CRAWL_SAME_ORIGIN)

    def allows(self, relative_path: str) -> bool:
        if not self.allow_patterns:
            return True

        name = posixpath.basename(relative_path)

        return any(fnmatch.fnmatchcase(name, p) or fnmatch.fnmatchcase(relative_path, p)
                   for p in self.allow_patterns)


class CatalogTarget(NamedTuple):
    name: str
    url: str
    metadata: Dict[str, Any]


def normalize_url(url: str) -> str:
    """Canonical form used for the visited set: no fragment, default port dropped, path collapsed."""
    url, _ = urldefrag(url)
    parts = urlsplit(url)
    scheme = parts.scheme.lower()
    host = (parts.hostname or '').lower()

    if parts.port and parts.port != DEFAULT_PORTS.get(scheme):
        host = f"{host}:{parts.port}"

    path = unquote(parts.path) or '/'
    trailing = path.endswith('/')
    path = posixpath.normpath(path)

    if path.startswith('//'):
        path = '/' + path.lstrip('/')

    if trailing and not path.endswith('/'):
        path += '/'

    return urlunsplit((scheme, host, quote(path), parts.query, ''))


def _origin(url: str) -> Tuple[str, str]:
    parts = urlsplit(normalize_url(url))
    return parts.scheme, parts.netloc


class RateLimiter:
    """Spaces request starts at least 1/rate seconds apart across all threads."""

    def __init__(self, rate: float) -> None:
        self.interval = 1.0 / rate
        self.lock = threading.Lock()
        self.next_slot = 0.0

    def wait(self) -> None:
        with self.lock:
            now = time.monotonic()
            slot = max(now, self.next_slot)
            self.next_slot = slot + self.interval

        delay = slot - now

        if delay > 0:
            time.sleep(delay)


def read_manifest(mirror_root: Path) -> Dict[str, ManifestEntry]:
    path = Path(mirror_root) / MANIFEST_NAME

    if not path.exists():
        return {}

    entries = {}

    for d in iter_jsonl(path):
        try:
            entries[d['relative_path']] = ManifestEntry(d['url'], d['relative_path'], int(d['size_bytes']),
                                                        d['content_hash'])
        except (KeyError, ValueError, TypeError):
            logger.warning(f"Ignoring malformed manifest line in {path}")

    return entries


def write_manifest(manifest: MirrorManifest, mirror_root: Path) -> Path:
    path = Path(mirror_root) / MANIFEST_NAME
    write_jsonl(path, (e.to_dict() for e in manifest.entries))

    return path


class Fetcher:
    """Shared HTTP plumbing: one session, a global rate limit, request counters."""

    def __init__(self, c, rate_limit: Optional[float] = None, session: Optional[requests.Session] = None) -> None:
        self.c = c
        self.session = session or requests.Session()
        self.session.headers.update({'User-Agent': c.USER_AGENT})
        self.limiter = RateLimiter(rate_limit or c.CRAWL_RATE_LIMIT)
        self.counter_lock = threading.Lock()
        self.requests_made = 0
        self.downloads = 0

    def _count(self, downloads: int = 0) -> None:
        with self.counter_lock:
            self.requests_made += 1
            self.downloads += downloads

    def get(self, url: str, stream: bool = False) -> requests.Response:
        self.limiter.wait()
        self._count()
        r = self.session.get(url, timeout=self.c.REQUEST_TIMEOUT, stream=stream)
        r.raise_for_status()

        return r

    def download(self, url: str, mirror_root: Path, relative_path: str,
                 prior: Optional[ManifestEntry] = None) -> ManifestEntry:
        target = safe_join(mirror_root, relative_path)

        if prior and target.is_file() and target.stat().st_size == prior.size_bytes \
                and sha256_file(target) == prior.content_hash:
            logger.debug(f"Up to date: {relative_path}")
            return ManifestEntry(url, relative_path, prior.size_bytes, prior.content_hash)

        target.parent.mkdir(parents=True, exist_ok=True)
        self.limiter.wait()

        self._count(downloads=1)

        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix='.part-')

        try:
            with os.fdopen(fd, 'wb') as f, self.session.get(url, timeout=self.c.REQUEST_TIMEOUT, stream=True) as r:
                r.raise_for_status()

                for block in r.iter_content(DOWNLOAD_BLOCK):
                    f.write(block)

            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

        logger.info(f"Downloaded {relative_path}")

        return ManifestEntry(url, relative_path, target.stat().st_size, sha256_file(target))


class Crawler:
    """Breadth-first mirror of a static directory-index site."""

    def __init__(self, plan: CrawlPlan, mirror_root: Path, c, session: Optional[requests.Session] = None) -> None:
        self.plan = plan
        self.mirror_root = Path(mirror_root)
        self.c = c
        self.fetcher = Fetcher(c, plan.rate_limit, session)
        self.root = normalize_url(plan.root_url)
        self.root_path = unquote(urlsplit(self.root).path)
        self.visited = set()
        self.pages = 0
        self.failed_pages = 0
        self.skipped_depth = 0
        self.rejected_links = 0

    @property
    def requests_made(self) -> int:
        return self.fetcher.requests_made

    @property
    def downloads(self) -> int:
        return self.fetcher.downloads

    def relative_path(self, url: str) -> Optional[str]:
        """Path of url below the crawl root, or None when it leaves the root."""
        if self.plan.same_origin and _origin(url) != _origin(self.root):
            return None

        path = unquote(urlsplit(url).path)

        if not path.startswith(self.root_path):
            return None

        return safe_relpath(path[len(self.root_path):])

    def links(self, page_url: str, html: str) -> List[str]:
        soup = BeautifulSoup(html, 'html.parser')
        out = []

        for a in soup.find_all('a', href=True):
            href = a['href'].strip()

            if not href or href.startswith(('?', '#', 'mailto:', 'javascript:')) or href in ('.', './', '..', '../'):
                continue

            url = urljoin(page_url, href)

            if urlsplit(url).scheme not in ('http', 'https') or urlsplit(url).query:
                continue

            url = normalize_url(url)

            # parent and self links
            if url == page_url or (url.endswith('/') and page_url.startswith(url)):
                continue

            out.append(url)

        return out

    def fetch_page(self, url: str) -> Optional[List[str]]:
        try:
            r = self.fetcher.get(url)
        except requests.RequestException as e:
            if url == self.root:
                raise CollectorError(f"Cannot reach crawl root {url}: {e}") from e

            logger.warning(f"Skipping page {url}: {e}")
            return None

        return self.links(url, r.text)

    def run(self) -> MirrorManifest:
        prior = read_manifest(self.mirror_root)
        entries: Dict[str, ManifestEntry] = {}
        level = [self.root]
        depth = 1
        self.visited.add(self.root)

        with PidLock(self.mirror_root, logger), \
                ThreadPoolExecutor(max_workers=max(1, self.c.CRAWL_MAX_IN_FLIGHT)) as pool:
            while level:
                level.sort()
                results = list(pool.map(self.fetch_page, level))
                self.pages += len(level)

                next_level = []
                files: Dict[str, str] = {}

                for links in results:
                    if links is None:
                        self.failed_pages += 1
                        continue

                    for url in links:
                        if url in self.visited:
                            continue

                        relative = self.relative_path(url)

                        if relative is None or relative in RESERVED_NAMES:
                            self.rejected_links += 1
                            logger.debug(f"Not following {url}")
                            continue

                        self.visited.add(url)

                        if url.endswith('/'):
                            if depth + 1 > self.plan.max_depth:
                                self.skipped_depth += 1
                                logger.info(f"Depth limit reached, skipping {url}")
                            else:
                                next_level.append(url)
                        elif self.plan.allows(relative) and relative not in files:
                            files[relative] = url

                todo = sorted(files.items())
                fetched = pool.map(lambda item: self._download(item[1], item[0], prior.get(item[0])), todo)

                for entry in fetched:
                    if entry:
                        entries[entry.relative_path] = entry

                level = next_level
                depth += 1

            manifest = MirrorManifest(list(entries.values()), datetime.now(tzutc()))
            write_manifest(manifest, self.mirror_root)

        logger.info(f"Crawl of {self.root}: {self.pages} pages, {self.downloads} downloads, "
                    f"{self.failed_pages} failed pages, {self.skipped_depth} subtrees past depth limit")

        return manifest

    def _download(self, url: str, relative: str, prior: Optional[ManifestEntry]) -> Optional[ManifestEntry]:
        try:
            return self.fetcher.download(url, self.mirror_root, relative, prior)
        except requests.RequestException as e:
            logger.warning(f"Skipping file {url}: {e}")
        except CollectorError as e:
            logger.warning(str(e))

        return None


def crawl_index(plan: CrawlPlan, mirror_root: Path, c, session: Optional[requests.Session] = None) -> MirrorManifest:
    return Crawler(plan, mirror_root, c, session).run()


def _parse_target(item: Any, where: str, endpoint_url: str) -> CatalogTarget:
    if not isinstance(item, dict):
        raise SchemaError(f"{where}: expected an object")

    for key in ('name', 'url'):
        value = item.get(key)

        if not isinstance(value, str) or not value.strip():
            raise SchemaError(f"{where}.{key}: missing or not a non-empty string")

    metadata = item.get('metadata', {k: v for k, v in item.items() if k not in ('name', 'url')})

    if not isinstance(metadata, dict):
        raise SchemaError(f"{where}.metadata: expected an object")

    return CatalogTarget(item['name'].strip(), urljoin(endpoint_url, item['url'].strip()), metadata)


def parse_catalog_listing(payload: Any, endpoint_url: str = '') -> List[CatalogTarget]:
    if isinstance(payload, dict):
        if 'files' not in payload:
            raise SchemaError("files: missing file list")
        items, prefix = payload['files'], 'files'
    else:
        items, prefix = payload, ''

    if not isinstance(items, list):
        raise SchemaError(f"{prefix or '<root>'}: expected a list")

    targets = [_parse_target(item, f"{prefix}[{n}]", endpoint_url) for n, item in enumerate(items)]

    return sorted(targets, key=lambda t: (t.name, t.url))


def fetch_catalog_endpoint(endpoint_url: str, c, session: Optional[requests.Session] = None,
                           fetcher: Optional[Fetcher] = None) -> List[CatalogTarget]:
    fetcher = fetcher or Fetcher(c, session=session)

    try:
        r = fetcher.get(endpoint_url)
    except requests.RequestException as e:
        raise CollectorError(f"Cannot fetch catalog endpoint {endpoint_url}: {e}") from e

    try:
        payload = json.loads(r.text)
    except ValueError as e:
        raise SchemaError(f"{endpoint_url}: response is not JSON ({e})") from e

    return parse_catalog_listing(payload, endpoint_url)


def download_targets(targets: List[CatalogTarget], mirror_root: Path, c,
                     fetcher: Optional[Fetcher] = None) -> MirrorManifest:
    fetcher = fetcher or Fetcher(c)
    mirror_root = Path(mirror_root)
    prior = read_manifest(mirror_root)
    entries: Dict[str, ManifestEntry] = {}

    with PidLock(mirror_root, logger):
        for t in targets:
            relative = safe_relpath(t.name)

            if relative is None or relative in RESERVED_NAMES:
                logger.warning(f"Refusing target name {t.name!r}")
                continue

            if relative in entries:
                logger.warning(f"Duplicate target name {relative}, keeping {entries[relative].url}")
                continue

            try:
                entries[relative] = fetcher.download(t.url, mirror_root, relative, prior.get(relative))
            except requests.RequestException as e:
                logger.warning(f"Skipping {t.url}: {e}")

        manifest = MirrorManifest(list(entries.values()), datetime.now(tzutc()))
        write_manifest(manifest, mirror_root)

    return manifest


def _copy_tree(source: Path, mirror_root: Path) -> List[ManifestEntry]:
    entries = []

    for dirpath, dirnames, filenames in os.walk(source):
        dirnames[:] = sorted(d for d in dirnames if d not in VCS_DIRS)

        for name in sorted(filenames):
            src = Path(dirpath) / name

            if src.is_symlink() or not src.is_file():
                continue

            relative = src.relative_to(source).as_posix()

            if relative in RESERVED_NAMES:
                continue

            dst = safe_join(mirror_root, relative)
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
            entries.append(ManifestEntry(src.resolve().as_uri(), relative, dst.stat().st_size, sha256_file(dst)))

    return entries


def _strip_common_root(names: List[str]) -> str:
    """GitHub-style snapshots wrap the tree in one top-level directory."""
    tops = {n.split('/', 1)[0] for n in names}

    if len(tops) == 1 and all('/' in n for n in names):
        return tops.pop() + '/'

    return ''


def _extract_snapshot(archive: Path, origin: str, mirror_root: Path) -> List[ManifestEntry]:
    entries = []

    def place(name: str, reader) -> None:
        relative = safe_relpath(name)

        if relative is None or relative in RESERVED_NAMES or relative.split('/', 1)[0] in VCS_DIRS:
            logger.warning(f"Skipping snapshot member {name!r}")
            return

        dst = safe_join(mirror_root, relative)
        dst.parent.mkdir(parents=True, exist_ok=True)

        with reader() as src, dst.open('wb') as out:
            shutil.copyfileobj(src, out)

        entries.append(ManifestEntry(f"{origin}#{relative}", relative, dst.stat().st_size, sha256_file(dst)))

    if zipfile.is_zipfile(archive):
        with zipfile.ZipFile(archive) as z:
            members = [i for i in z.infolist() if not i.is_dir()]
            prefix = _strip_common_root([i.filename for i in members])

            for info in members:
                place(info.filename[len(prefix):], lambda info=info: z.open(info))

    elif tarfile.is_tarfile(archive):
        with tarfile.open(archive, 'r:*') as t:
            members = [m for m in t.getmembers() if m.isfile()]
            prefix = _strip_common_root([m.name for m in members])

            for m in members:
                place(m.name[len(prefix):], lambda m=m: t.extractfile(m))

    else:
        raise CollectorError(f"{origin} is neither a directory, a tar nor a zip snapshot")

    return entries


def mirror_repository(source: str, mirror_root: Path, c, session: Optional[requests.Session] = None) -> MirrorManifest:
    """Copy a working-tree snapshot (local directory, local archive, or archive URL) into the mirror root."""
    mirror_root = Path(mirror_root)

    with PidLock(mirror_root, logger):
        if urlsplit(source).scheme in ('http', 'https'):
            fetcher = Fetcher(c, session=session)

            with tempfile.TemporaryDirectory() as tmp:
                try:
                    r = fetcher.get(source, stream=True)
                except requests.RequestException as e:
                    raise CollectorError(f"Cannot fetch snapshot {source}: {e}") from e

                archive = Path(tmp) / 'snapshot'

                with r, archive.open('wb') as f:
                    for block in r.iter_content(DOWNLOAD_BLOCK):
                        f.write(block)

                entries = _extract_snapshot(archive, source, mirror_root)
        else:
            path = Path(source)

            if path.is_dir() and os.access(path, os.R_OK | os.X_OK):
                entries = _copy_tree(path, mirror_root)
            elif path.is_file() and os.access(path, os.R_OK):
                entries = _extract_snapshot(path, path.resolve().as_uri(), mirror_root)
            else:
                raise CollectorError(f"Cannot read repository source {source}")

        manifest = MirrorManifest(entries, datetime.now(tzutc()))
        write_manifest(manifest, mirror_root)

    logger.info(f"Mirrored {len(manifest.entries)} files from {source}")

    return manifest
