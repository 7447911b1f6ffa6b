import contextlib
import functools
import gzip
import io
import json
import tarfile
import threading
from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from tests.rootfs_samples import rootfs_nine, write_tree

"""
A small mixed download area, labelled by hand. Every file has distinct content.
"""


def tar_gz(tree, wrapper: str = '') -> bytes:
    buf = io.BytesIO()

    with tarfile.open(fileobj=buf, mode='w') as t:
        for relative, content in sorted(tree.items()):
            if isinstance(content, str):
                content = content.encode('utf-8')

            info = tarfile.TarInfo(wrapper + relative)
            info.size = len(content)
            info.mode = 0o755 if relative.startswith(('bin/', 'sbin/', 'usr/bin/')) else 0o644
            info.mtime = 1600000000
            t.addfile(info, io.BytesIO(content))

    return gzip.compress(buf.getvalue(), mtime=0)


def squashfs_stub(tag: bytes) -> bytes:
    body = b'hsqs' + b'\x00' * 92 + tag
    size = len(body)

    return body[:40] + size.to_bytes(8, 'little') + body[48:]


download_area = {
    'Bitmain_2025-11-19_FR-1.27_251009-S19XP_2B_Hyd.tar.gz': tar_gz(rootfs_nine),
    'Antminer-S9-all-201812051512-autofreq-user-Update2UBI-NF.tar.gz': tar_gz({'readme.txt': 'S9 update\n'}),
    'Canaan_Avalon_15xHY_release_OTA_2025111202_773bb92.aup': b'AUP0' + bytes(range(256)) * 4,
    'whatsminer/WhatsMiner_M30S_h6_20230510.bin': b'\x00\x01\x02\x03M30S flash dump' * 16,
    'antminer/Antminer-S19-SD-card.img': squashfs_stub(b'S19 sd card'),
    'antminer/bmu/S19j_Pro_release.bmu': b'BMU1 S19j Pro payload' * 8,
    'docs/Antminer_S19_user_manual.pdf': b'%PDF-1.7\nS19 user manual\n%%EOF\n',
    'docs/WhatsMiner_M30_Operation_Guide.PDF': b'%PDF-1.4\nM30 operation guide\n%%EOF\n',
    'tools/BTC_Tools_v1.3.3.exe': b'MZ\x90\x00BTC Tools',
    'tools/AvalonTools_setup.msi': b'\xd0\xcf\x11\xe0Avalon tools installer',
    'README.txt': 'Mirror of public miner firmware downloads.\n',
    'checksums.sha256': '0000000000000000000000000000000000000000000000000000000000000000  fw.bin\n',
}

download_area_classes = {
    'Bitmain_2025-11-19_FR-1.27_251009-S19XP_2B_Hyd.tar.gz': 'UpdatePackage',
    'Antminer-S9-all-201812051512-autofreq-user-Update2UBI-NF.tar.gz': 'UpdatePackage',
    'Canaan_Avalon_15xHY_release_OTA_2025111202_773bb92.aup': 'UpdatePackage',
    'whatsminer/WhatsMiner_M30S_h6_20230510.bin': 'FlashImage',
    'antminer/Antminer-S19-SD-card.img': 'FlashImage',
    'antminer/bmu/S19j_Pro_release.bmu': 'UpdatePackage',
    'docs/Antminer_S19_user_manual.pdf': 'Documentation',
    'docs/WhatsMiner_M30_Operation_Guide.PDF': 'Documentation',
    'tools/BTC_Tools_v1.3.3.exe': 'ManagementTool',
    'tools/AvalonTools_setup.msi': 'ManagementTool',
    'README.txt': 'Documentation',
    'checksums.sha256': 'Other',
}

download_area_oracle = {
    'UpdatePackage': 4,
    'FlashImage': 2,
    'ManagementTool': 2,
    'Documentation': 3,
    'Other': 1,
}

# 3 directories, 5 files
crawl_tree = {
    'fw1.bin': b'firmware one',
    'a/fw2.bin': b'firmware two',
    'a/b/fw3.bin': b'firmware three',
    'a/b/fw4.tar.gz': tar_gz({'etc/version': '4\n'}),
    'docs/manual.pdf': b'%PDF-1.5\nmanual\n',
}

hostile_index = (
    '<html><body>\n'
    '<a href="../../etc/passwd">passwd</a>\n'
    '<a href="../../../../outside.bin">outside</a>\n'
    '<a href="http://firmware.example.invalid/fw.bin">mirror</a>\n'
    '<a href="manifest.jsonl">manifest</a>\n'
    '<a href="?C=M;O=A">sort</a>\n'
    '<a href="fw.bin">fw.bin</a>\n'
    '</body></html>\n'
)

catalog_listing = {
    'files': [
        {'name': 'S19XP_FR-1.27.tar.gz', 'url': 'files/S19XP_FR-1.27.tar.gz', 'model': 'S19XP'},
        {'name': 'M30S_20230510.bin', 'url': 'files/M30S_20230510.bin', 'model': 'M30S'},
        {'name': 'Avalon15_2025111202.aup', 'url': 'files/Avalon15_2025111202.aup', 'model': 'Avalon 15'},
        {'name': 'KS3_2024.bin', 'url': 'files/KS3_2024.bin', 'metadata': {'model': 'KS3'}},
    ]
}


def write_catalog_endpoint(root: Path) -> Path:
    root = Path(root)
    (root / 'files').mkdir(parents=True, exist_ok=True)

    for item in catalog_listing['files']:
        (root / item['url']).write_bytes(item['name'].encode('utf-8') * 3)

    (root / 'catalog.json').write_text(json.dumps(catalog_listing), encoding='utf-8')
    (root / 'broken.json').write_text(json.dumps({'files': [{'name': 'x.bin'}]}), encoding='utf-8')

    return root


def write_download_area(root: Path) -> Path:
    return write_tree(root, download_area)


class QuietHandler(SimpleHTTPRequestHandler):
    def log_message(self, format, *args):
        pass


@contextlib.contextmanager
def serve(directory: Path):
    """Serve a directory with auto-generated indexes on an ephemeral port."""
    handler = functools.partial(QuietHandler, directory=str(directory))
    server = ThreadingHTTPServer(('127.0.0.1', 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()

    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        server.server_close()
