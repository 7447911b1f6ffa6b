import fnmatch
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence

import yaml
from elftools.common.exceptions import ELFError
from elftools.construct.core import ConstructError
from elftools.elf.elffile import ELFFile
from elftools.elf.sections import SymbolTableSection

from minerforge.helpers import DATA_DIR, RuleLoadError
from minerforge.models import EntryPoint, Severity, ShadowEntry

logger = logging.getLogger('scanner')

BUILTIN_RULES = DATA_DIR / 'builtin_rules.yaml'
EXCERPT_LIMIT = 200
MAX_CONTENT_BYTES = 8 * 1024 * 1024
ELF_MAGIC = b'\x7fELF'

VULN_CLASSES = (
    'WeakCredentials', 'SshEnabled', 'NoUpdateSignature', 'PlaintextStratum', 'PermissiveApiTrust', 'WebAuthFlaw',
    'LegacyService', 'ExposedMgmtDiscovery', 'CookieWeakness', 'UnsafeNative', 'ChecksumOnlyBoot',
)

HASH_CLASSES = ('empty', 'des', 'md5crypt', 'sha256crypt', 'sha512crypt', 'other')
DES_RE = re.compile(r'^[./0-9A-Za-z]{13}$')
CRYPT_PREFIXES = {'$1$': 'md5crypt', '$5$': 'sha256crypt', '$6$': 'sha512crypt'}

RULE_FIELDS = ('id', 'description', 'target', 'matcher', 'args', 'class', 'entry_point', 'severity')


def excerpt(text: str) -> str:
    text = ' '.join(text.split())

    return text if len(text) <= EXCERPT_LIMIT else text[:EXCERPT_LIMIT - 3] + '...'


def target_matches(relative: str, pattern: str) -> bool:
    """fnmatch where '*' crosses '/', and a leading '**/' also matches at the root."""
    if fnmatch.fnmatchcase(relative, pattern):
        return True

    return pattern.startswith('**/') and fnmatch.fnmatchcase(relative, pattern[3:])


def classify_hash(password_hash: str) -> str:
    if password_hash == '':
        return 'empty'

    for prefix, hash_class in CRYPT_PREFIXES.items():
        if password_hash.startswith(prefix):
            return hash_class

    if DES_RE.match(password_hash):
        return 'des'

    return 'other'


def parse_shadow(content: str, source: str = '<shadow>') -> List[ShadowEntry]:
    """Colon-separated shadow records; malformed lines are skipped with a diagnostic."""
    entries = []

    for n, line in enumerate(content.splitlines(), start=1):
        line = line.strip()

        if not line or line.startswith('#'):
            continue

        fields = line.split(':')

        if len(fields) < 2 or not fields[0]:
            logger.warning(f"{source}:{n}: malformed shadow line skipped")
            continue

        user, password_hash = fields[0], fields[1]
        locked = password_hash.startswith(('!', '*'))
        hash_class = 'other' if locked else classify_hash(password_hash)

        entries.append(ShadowEntry(user, hash_class, locked, password_hash))

    return entries


def read_text(path: Path) -> str:
    with path.open('rb') as f:
        return f.read(MAX_CONTENT_BYTES).decode('latin-1')


def imported_symbols(path: Path) -> FrozenSet[str]:
    """Undefined dynamic symbols of an ELF file; empty for anything else."""
    with path.open('rb') as f:
        if f.read(4) != ELF_MAGIC:
            return frozenset()

        f.seek(0)

        try:
            elf = ELFFile(f)
            section = elf.get_section_by_name('.dynsym')

            if not isinstance(section, SymbolTableSection):
                return frozenset()

            return frozenset(s.name for s in section.iter_symbols() if s.name and s['st_shndx'] == 'SHN_UNDEF')
        except (ELFError, ConstructError, ValueError) as e:
            logger.warning(f"{path}: unreadable ELF ({e})")
            return frozenset()


@dataclass
class ScanContext:
    weak_hashes: FrozenSet[str] = frozenset()


class Matcher:
    """Decides whether one file satisfies a rule; returns the excerpt or None."""

    class Meta:
        abstract = True

    kind = ''
    reads_content = True

    def __init__(self, args: Dict[str, Any], where: str) -> None:
        self.args = args
        self.where = where

    def _require(self, name: str, types, default=None, required=False):
        if name not in self.args:
            if required:
                raise RuleLoadError(f"{self.where}: field 'args.{name}' is required for {self.kind}")
            return default

        value = self.args[name]

        if not isinstance(value, types):
            raise RuleLoadError(f"{self.where}: field 'args.{name}' has the wrong type")

        return value

    def _regex(self, name: str, pattern: str) -> Any:
        try:
            return re.compile(pattern, re.IGNORECASE if self.args.get('ignore_case') else 0)
        except re.error as e:
            raise RuleLoadError(f"{self.where}: field 'args.{name}' is not a valid regex ({e})") from e

    def match(self, path: Path, relative: str, ctx: ScanContext) -> Optional[str]:
        raise Exception("Needs Implementation")


class FilePresence(Matcher):
    kind = 'file-presence'
    reads_content = False

    def match(self, path: Path, relative: str, ctx: ScanContext) -> Optional[str]:
        return relative


class ContentRegex(Matcher):
    """Regex over file text.

    pattern: finding on the first line matching it (and not `unless`).
    require: finding when the file matches `pattern` (if any) but lacks one of these.
    negate: finding when `pattern` does not occur at all.
    """

    kind = 'content-regex'

    def __init__(self, args: Dict[str, Any], where: str) -> None:
        super().__init__(args, where)
        pattern = self._require('pattern', str)
        unless = self._require('unless', str)
        require = self._require('require', list, [])

        if pattern is None and not require:
            raise RuleLoadError(f"{where}: content-regex needs 'args.pattern' or 'args.require'")

        if not all(isinstance(r, str) for r in require):
            raise RuleLoadError(f"{where}: field 'args.require' must be a list of regexes")

        self.pattern = self._regex('pattern', pattern) if pattern else None
        self.unless = self._regex('unless', unless) if unless else None
        self.require = [self._regex('require', r) for r in require]
        self.negate = bool(self._require('negate', bool, False))
        self.strip_comments = bool(self._require('strip_comments', bool, False))

    def _lines(self, text: str) -> List[str]:
        lines = text.splitlines()

        if self.strip_comments:
            lines = [line for line in lines if not line.lstrip().startswith(('#', '//'))]

        return lines

    def match(self, path: Path, relative: str, ctx: ScanContext) -> Optional[str]:
        lines = self._lines(read_text(path))
        text = '\n'.join(lines)

        if self.require:
            if self.pattern and not self.pattern.search(text):
                return None

            missing = [r.pattern for r in self.require if not r.search(text)]

            return excerpt('missing: ' + '; '.join(missing)) if missing else None

        if self.negate:
            return None if self.pattern.search(text) else excerpt(f"no match for {self.pattern.pattern}")

        for line in lines:
            if self.pattern.search(line) and not (self.unless and self.unless.search(line)):
                return excerpt(line)

        return None


class ShadowHashClass(Matcher):
    """Unlocked accounts with a weak hash class or a hash from the weak-hash dictionary."""

    kind = 'shadow-hash-class'

    def __init__(self, args: Dict[str, Any], where: str) -> None:
        super().__init__(args, where)
        classes = self._require('classes', list, ['empty', 'des', 'md5crypt'])
        unknown = [c for c in classes if c not in HASH_CLASSES]

        if unknown:
            raise RuleLoadError(f"{where}: field 'args.classes' names unknown hash classes {unknown}")

        self.classes = frozenset(classes)

    def match(self, path: Path, relative: str, ctx: ScanContext) -> Optional[str]:
        weak = []

        for entry in parse_shadow(read_text(path), relative):
            if entry.locked:
                continue

            if entry.hash_class in self.classes:
                weak.append(f"{entry.user}:{entry.hash_class}")
            elif entry.password_hash in ctx.weak_hashes:
                weak.append(f"{entry.user}:known default")

        return excerpt(', '.join(weak)) if weak else None


class SymbolImport(Matcher):
    kind = 'symbol-import'

    def __init__(self, args: Dict[str, Any], where: str) -> None:
        super().__init__(args, where)
        symbols = self._require('symbols', list, required=True)

        if not symbols or not all(isinstance(s, str) for s in symbols):
            raise RuleLoadError(f"{where}: field 'args.symbols' must be a non-empty list of names")

        self.symbols = list(symbols)

    def match(self, path: Path, relative: str, ctx: ScanContext) -> Optional[str]:
        imports = imported_symbols(path)
        hits = [s for s in self.symbols if s in imports]

        return excerpt('imports ' + ', '.join(hits)) if hits else None


class UrlScheme(Matcher):
    """Occurrences of scheme:// outside lines commented with '#' or '//'."""

    kind = 'url-scheme'

    def __init__(self, args: Dict[str, Any], where: str) -> None:
        super().__init__(args, where)
        scheme = self._require('scheme', str, required=True)
        self.needle = re.compile(re.escape(scheme) + r'://\S*', re.IGNORECASE)

    def match(self, path: Path, relative: str, ctx: ScanContext) -> Optional[str]:
        for line in read_text(path).splitlines():
            if line.lstrip().startswith(('#', '//')):
                continue

            m = self.needle.search(line)

            if m:
                return excerpt(m.group(0))

        return None


MATCHERS = {m.kind: m for m in (FilePresence, ContentRegex, ShadowHashClass, SymbolImport, UrlScheme)}


@dataclass
class Rule:
    rule_id: str
    description: str
    targets: List[str]
    matcher: Matcher
    vuln_class: str
    entry_point: EntryPoint
    severity: Severity
    source: str = ''
    line: int = 0
    tags: List[str] = field(default_factory=list)

    def applies_to(self, relative: str) -> bool:
        return any(target_matches(relative, t) for t in self.targets)


class _LineLoader(yaml.SafeLoader):
    """Records the line of every mapping and of each of its keys."""

    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping['__line__'] = node.start_mark.line + 1
        mapping['__lines__'] = {k.value: k.start_mark.line + 1 for k, _ in node.value if hasattr(k, 'value')}

        return mapping


def _strip_marks(value):
    if isinstance(value, dict):
        return {k: _strip_marks(v) for k, v in value.items() if k not in ('__line__', '__lines__')}

    if isinstance(value, list):
        return [_strip_marks(v) for v in value]

    return value


def _substitute(value, c, where: str):
    """'$NAME' arguments resolve to config attribute NAME."""
    if isinstance(value, str) and value.startswith('$') and value[1:].isupper():
        if c is None or not hasattr(c, value[1:]):
            raise RuleLoadError(f"{where}: unknown config reference {value}")
        return getattr(c, value[1:])

    if isinstance(value, dict):
        return {k: _substitute(v, c, where) for k, v in value.items()}

    if isinstance(value, list):
        return [_substitute(v, c, where) for v in value]

    return value


def _parse_rule(raw: Any, source: str, c, vuln_classes: Sequence[str]) -> Rule:
    if not isinstance(raw, dict):
        raise RuleLoadError(f"{source}: every rule must be a mapping")

    line = raw.get('__line__', 0)
    lines = raw.get('__lines__', {})

    def where(name: str) -> str:
        return f"{source}:{lines.get(name, line)}: field '{name}'"

    data = _strip_marks(raw)

    for name in data:
        if name not in RULE_FIELDS and name != 'tags':
            raise RuleLoadError(f"{where(name)} is not a rule field")

    for name in ('id', 'target', 'matcher', 'class', 'entry_point', 'severity'):
        if name not in data or data[name] in (None, '', []):
            raise RuleLoadError(f"{source}:{line}: field '{name}' is missing")

    rule_id = data['id']

    if not isinstance(rule_id, str):
        raise RuleLoadError(f"{where('id')} must be a string")

    targets = data['target'] if isinstance(data['target'], list) else [data['target']]

    if not all(isinstance(t, str) and t for t in targets):
        raise RuleLoadError(f"{where('target')} must be a glob or a list of globs")

    kind = data['matcher']

    if kind not in MATCHERS:
        raise RuleLoadError(f"{where('matcher')}: unknown matcher kind {kind!r}")

    if data['class'] not in vuln_classes:
        raise RuleLoadError(f"{where('class')}: unknown vulnerability class {data['class']!r}")

    try:
        entry_point = EntryPoint(data['entry_point'])
    except ValueError:
        raise RuleLoadError(f"{where('entry_point')}: unknown entry point {data['entry_point']!r}")

    try:
        severity = Severity(data['severity'])
    except ValueError:
        raise RuleLoadError(f"{where('severity')}: unknown severity {data['severity']!r}")

    args = data.get('args') or {}

    if not isinstance(args, dict):
        raise RuleLoadError(f"{where('args')} must be a mapping")

    args = _substitute(args, c, where('args'))
    matcher = MATCHERS[kind](args, f"{source}:{lines.get('args', line)}")

    return Rule(
            rule_id=rule_id,
            description=str(data.get('description', '')),
            targets=targets,
            matcher=matcher,
            vuln_class=data['class'],
            entry_point=entry_point,
            severity=severity,
            source=source,
            line=line,
            tags=list(data.get('tags', [])),
    )


def parse_rules(text: str, source: str, c=None, vuln_classes: Sequence[str] = VULN_CLASSES) -> List[Rule]:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        at = f":{mark.line + 1}" if mark else ''
        raise RuleLoadError(f"{source}{at}: not a valid rule file ({e})") from e

    if doc is None:
        return []

    if isinstance(doc, dict):
        doc = doc.get('rules') or []

    if not isinstance(doc, list):
        raise RuleLoadError(f"{source}: expected a list of rules or a 'rules' key")

    return [_parse_rule(raw, source, c, vuln_classes) for raw in doc]


def load_rules(rule_files: Iterable[str] = (), c=None, include_builtin: bool = True,
               vuln_classes: Sequence[str] = VULN_CLASSES) -> List[Rule]:
    """Built-in pack first, then each file in order; rule ids must be unique across all."""
    sources = ([str(BUILTIN_RULES)] if include_builtin else []) + [str(f) for f in rule_files]
    rules: List[Rule] = []
    seen: Dict[str, Rule] = {}

    for source in sources:
        try:
            text = Path(source).read_text(encoding='utf-8')
        except OSError as e:
            raise RuleLoadError(f"Cannot read rule file {source}: {e}") from e

        for rule in parse_rules(text, source, c, vuln_classes):
            if rule.rule_id in seen:
                first = seen[rule.rule_id]
                raise RuleLoadError(f"{source}:{rule.line}: field 'id': duplicate rule id {rule.rule_id!r} "
                                    f"(first defined at {first.source}:{first.line})")

            seen[rule.rule_id] = rule
            rules.append(rule)

    logger.debug(f"Loaded {len(rules)} rules from {len(sources)} files")

    return rules


def load_weak_hashes(path: Optional[str]) -> FrozenSet[str]:
    """One hash per line; '#' comments allowed."""
    if not path:
        return frozenset()

    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise RuleLoadError(f"Cannot read weak-hash dictionary {path}: {e}") from e

    return frozenset(line.strip() for line in text.splitlines() if line.strip() and not line.startswith('#'))
