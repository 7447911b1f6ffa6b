class DefaultConfig(object):
    DEBUG = False
    DEVELOPMENT = False
    TESTING = False
    SENTRY_DSN = ''
    WORKER_JOBS = 4

    # Closed vendor table. Everything that does not resolve lands in the last entry.
    VENDORS = ['Bitmain', 'MicroBT', 'Canaan', 'Iceriver', 'Other']
    # None means the alias table packaged in minerforge/data
    VENDOR_ALIASES_FILE = None

    # Collector
    USER_AGENT = 'minerforge/1.0 (+static firmware corpus tooling)'
    REQUEST_TIMEOUT = 15
    CRAWL_MAX_DEPTH = 16
    CRAWL_RATE_LIMIT = 4.0
    CRAWL_SAME_ORIGIN = True
    CRAWL_MAX_IN_FLIGHT = 4

    # Extractor
    UNPACK_MAX_DEPTH = 8
    UNPACK_MAX_RATIO = 100
    UNPACK_MAX_TOTAL_BYTES = 4 * 1024 ** 3
    ENTROPY_THRESHOLD = 7.5
    ENTROPY_WINDOW = 4096
    ENTROPY_WINDOW_FRACTION = 0.9
    # argv templates, e.g. ['unsquashfs', '-f', '-d', '{dst}', '{src}']
    SQUASHFS_HANDLER = None
    UBI_HANDLER = None
    # Partial trees are removed at the Reconstruction stage unless kept here
    KEEP_PARTIAL_IMAGES = False
    # Key material is only ever referenced, never stored here
    KEY_FILE = None
    KEY_ENV_PREFIX = 'MINERFORGE_KEY_'

    # Dedup
    DEDUP_CHUNK_SIZE = 4096
    DEDUP_NUM_PERM = 128
    DEDUP_SEED = 1
    DEDUP_THRESHOLD = 0.9
    DEDUP_MODE = 'estimated'

    # Scanner
    RULE_FILES = []
    SUPPRESS_BUILTIN_RULES = False
    WEAK_HASH_FILE = None
    WEAK_HASH_CLASSES = ['empty', 'des', 'md5crypt']
    # An update script must reference every group: a verify operation and a public key
    SIGNATURE_TOKENS = [
        r'openssl\s+dgst[^\n]*-verify|\bpkeyutl\b[^\n]*-verify|\brsautl\b[^\n]*-verify|'
        r'\bgpgv?\b[^\n]*--verify|\bverify_signature\b|\bsig(?:nature)?_verify\b',
        r'\.pem\b|\bpub(?:lic)?[_-]?key\b',
    ]

    # Attack model
    MAPPING_FILE = None
    LAN_ONLY = False


class DevelopmentConfig(DefaultConfig):
    DEBUG = True
    DEVELOPMENT = True


class TestingConfig(DefaultConfig):
    TESTING = True
    WORKER_JOBS = 2
    CRAWL_RATE_LIMIT = 1000.0
    UNPACK_MAX_TOTAL_BYTES = 64 * 1024 ** 2
