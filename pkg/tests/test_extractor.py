import gzip
import io
import tarfile
import tempfile
import unittest
import zipfile
from pathlib import Path

import numpy as np

from minerforge.decryptor import AesCbcDecryptor, KeyMaterial, build_plugins, load_key_material
from minerforge.extractor import REASON_CORRUPT, REASON_DECRYPT_FAILED, REASON_EMPTY, REASON_ENCRYPTED, \
    REASON_GUARD, REASON_MISSING_KEY, REASON_PARTIAL, REASON_SELF_CHECK, REASON_TRUNCATED, \
    REASON_UNSUPPORTED_FS, EntropySettings, ExpansionGuard, UnpackLimits, artifact_reader, assess_rootfs, \
    detect_container, extract_records, inflate_bounded, load_images, looks_encrypted, shannon_entropy, unpack, \
    validate_integrity, windowed_entropy
from minerforge.helpers import LOCK_NAME, ExtractionError, LockError, MissingKeyMaterial, UsageError, load_config, \
    sha256_bytes
from minerforge.models import NESTED_LAYER, ROOT_LAYER, ArtifactClass, ArtifactRecord, Completeness, Stage, Verdict
from tests.catalog_samples import squashfs_stub, tar_gz
from tests.rootfs_samples import rootfs_nine, write_tree

# fixture key, not a vendor secret
FIXTURE_KEY = KeyMaterial(bytes(range(16)), bytes(range(16, 32)))


def random_bytes(n: int, seed: int = 7) -> bytes:
    return np.random.default_rng(seed).integers(0, 256, n, dtype=np.uint8).tobytes()


def record_for(name: str, data: bytes, artifact_class=ArtifactClass.UPDATE_PACKAGE) -> ArtifactRecord:
    digest = sha256_bytes(data)

    return ArtifactRecord(digest[:16], [name], 'Bitmain', 'S19', '2.0.1', artifact_class, len(data), digest)


class TestEntropy(unittest.TestCase):

    def test_constant(self):
        self.assertEqual(shannon_entropy(b'\x00' * 4096), 0.0)

    def test_uniform(self):
        self.assertEqual(shannon_entropy(bytes(range(256)) * 16), 8.0)

    def test_random(self):
        self.assertGreater(shannon_entropy(random_bytes(4096)), 7.9)

    def test_empty_window(self):
        with self.assertRaises(ExtractionError):
            shannon_entropy(b'')

    def test_windows(self):
        data = b'\x00' * 4096 + bytes(range(256)) * 16 + b'tail'

        self.assertEqual(windowed_entropy(data, 4096), [0.0, 8.0])

    def test_looks_encrypted(self):
        settings = EntropySettings()

        self.assertTrue(looks_encrypted(random_bytes(16384), settings))
        self.assertFalse(looks_encrypted(random_bytes(8192) + b'\x00' * 8192, settings))
        self.assertFalse(looks_encrypted(b'short', settings))


class TestDetectContainer(unittest.TestCase):

    def test_offset_zero(self):
        self.assertEqual(detect_container(gzip.compress(b'x' * 100)), ('gzip', 0))
        self.assertEqual(detect_container(squashfs_stub(b'x')), ('squashfs', 0))

    def test_embedded_tar(self):
        buf = io.BytesIO()

        with tarfile.open(fileobj=buf, mode='w') as t:
            info = tarfile.TarInfo('etc/version')
            info.size = 2
            t.addfile(info, io.BytesIO(b'1\n'))

        self.assertEqual(detect_container(b'\x00' * 512 + buf.getvalue()), ('tar', 512))

    def test_unaligned_magic_ignored(self):
        self.assertEqual(detect_container(b'\x00' * 6 + b'hsqs' + b'\x00' * 100), ('unknown', 0))

    def test_random(self):
        self.assertEqual(detect_container(random_bytes(4096, seed=11)), ('unknown', 0))


class TestIntegrity(unittest.TestCase):

    def test_empty(self):
        outcome = validate_integrity(record_for('empty.bin', b''), b'')

        self.assertEqual((outcome.verdict, outcome.reason), (Verdict.REMOVED, REASON_EMPTY))

    def test_truncated_gzip(self):
        data = gzip.compress(random_bytes(8192))
        outcome = validate_integrity(record_for('fw.tar.gz', data), data[:-64])

        self.assertEqual((outcome.verdict, outcome.reason), (Verdict.REMOVED, REASON_TRUNCATED))

    def test_valid_gzip(self):
        data = tar_gz(rootfs_nine)

        self.assertEqual(validate_integrity(record_for('fw.tar.gz', data), data).verdict, Verdict.PASS)

    def test_zip_crc(self):
        buf = io.BytesIO()

        with zipfile.ZipFile(buf, 'w', zipfile.ZIP_STORED) as z:
            z.writestr('rootfs/etc/version', b'version 1.0.0 of the fixture\n')

        data = bytearray(buf.getvalue())
        data[data.index(b'version 1.0.0')] ^= 0x20

        outcome = validate_integrity(record_for('fw.zip', bytes(data)), bytes(data))

        self.assertEqual((outcome.verdict, outcome.reason), (Verdict.REMOVED, REASON_SELF_CHECK))

    def test_truncated_squashfs(self):
        data = squashfs_stub(b'payload' * 10)

        self.assertEqual(validate_integrity(record_for('fw.img', data), data).verdict, Verdict.PASS)
        self.assertEqual(validate_integrity(record_for('fw.img', data), data[:-8]).reason, REASON_TRUNCATED)

    def test_no_container(self):
        self.assertEqual(validate_integrity(record_for('fw.bin', b'raw'), b'raw').verdict, Verdict.PASS)


class TestUnpack(unittest.TestCase):

    def setUp(self):
        self.c = load_config(name='TestingConfig')
        self.limits = UnpackLimits.from_config(self.c)
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name) / 'out'

    def tearDown(self):
        self.tmp.cleanup()

    def unpack(self, name: str, data: bytes, plugins=()):
        return unpack(record_for(name, data), data, list(plugins), self.limits, self.out, self.c)

    def test_tar_gz_rootfs(self):
        image, outcomes = self.unpack('S19_update.tar.gz', tar_gz(rootfs_nine))

        self.assertEqual(image.file_count, 9)
        self.assertEqual(image.unpack_depth_used, 2)
        self.assertEqual(image.completeness, Completeness.FULL)
        self.assertEqual(image.system_root, '')
        self.assertEqual([o.stage for o in outcomes], [Stage.DECRYPTION, Stage.RECONSTRUCTION])
        self.assertTrue(all(o.verdict == Verdict.PASS for o in outcomes))
        self.assertEqual((image.root / 'bin/busybox').read_bytes(), rootfs_nine['bin/busybox'])

    def test_wrapped_rootfs(self):
        image, _ = self.unpack('S19_update.tar.gz', tar_gz(rootfs_nine, wrapper='rootfs/'))

        self.assertEqual(image.completeness, Completeness.FULL)
        self.assertEqual(image.system_root, 'rootfs')
        self.assertEqual(image.scan_root, image.root / 'rootfs')

    def test_nested_update(self):
        outer = tar_gz({'README': 'update bundle\n', 'rootfs.tar.gz': tar_gz(rootfs_nine)})
        image, _ = self.unpack('bundle.tar.gz', outer)

        self.assertEqual(image.completeness, Completeness.FULL)
        self.assertEqual(image.system_root, '_rootfs.tar.gz.extracted')
        self.assertEqual(image.unpack_depth_used, 4)
        self.assertEqual(image.system_layer, NESTED_LAYER)
        self.assertEqual(image.files(), ['README', 'rootfs.tar.gz'])
        self.assertEqual(image.scan_root, self.out / image.image_id / 'nested' / '_rootfs.tar.gz.extracted')
        self.assertEqual((image.scan_root / 'bin/busybox').read_bytes(), rootfs_nine['bin/busybox'])

    def test_compressed_member_kept_as_is(self):
        docs = gzip.compress(b'BusyBox documentation\n', mtime=0)
        tree = dict(rootfs_nine, **{'usr/share/doc/busybox.txt.gz': docs})
        image, _ = self.unpack('S19_update.tar.gz', tar_gz(tree))

        self.assertEqual(image.files(), sorted(tree))
        self.assertEqual(image.file_count, 10)
        self.assertEqual((image.root / 'usr/share/doc/busybox.txt.gz').read_bytes(), docs)
        self.assertEqual(image.system_layer, ROOT_LAYER)

        expanded = self.out / image.image_id / 'nested/usr/share/doc/_busybox.txt.gz.extracted/busybox.txt'
        self.assertEqual(expanded.read_bytes(), b'BusyBox documentation\n')

    def test_random_trees_unpack_to_the_same_tree(self):
        rng = np.random.default_rng(2024)
        self.c.KEEP_PARTIAL_IMAGES = True

        for n in range(50):
            dirs = [''] + ['/'.join(f"d{int(k)}" for k in rng.integers(0, 4, depth)) + '/'
                           for depth in rng.integers(1, 4, 4)]
            tree = {}

            for m in range(int(rng.integers(1, 13))):
                content = rng.integers(0, 256, int(rng.integers(0, 2048)), dtype=np.uint8).tobytes()
                name = f"{dirs[int(rng.integers(0, len(dirs)))]}f{m}"

                if rng.random() < 0.3:
                    tree[name + '.txt.gz'] = gzip.compress(content, mtime=0)
                else:
                    tree[name + '.bin'] = content

            image, outcomes = self.unpack(f"tree{n}.tar.gz", tar_gz(tree))

            self.assertIsNotNone(image, outcomes)
            self.assertEqual(image.files(), sorted(tree))

            for relative, content in tree.items():
                self.assertEqual((image.root / relative).read_bytes(), content, relative)

    def test_round_trip_encrypted(self):
        plugin = AesCbcDecryptor(FIXTURE_KEY)
        image, outcomes = self.unpack('S19_update.tar.gz', plugin.encrypt(tar_gz(rootfs_nine)), [plugin])

        self.assertEqual(outcomes[0].reason, 'decrypted with aes-cbc')

        for relative, content in rootfs_nine.items():
            expected = content.encode('utf-8') if isinstance(content, str) else content
            self.assertEqual((image.root / relative).read_bytes(), expected)

    def test_fail_closed_without_key(self):
        plugin = AesCbcDecryptor(FIXTURE_KEY)
        data = plugin.encrypt(tar_gz(rootfs_nine))
        image, outcomes = self.unpack('S19_update.tar.gz', data, [AesCbcDecryptor()])

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_MISSING_KEY)
        self.assertFalse(any(self.out.rglob('*.tar.gz')))

    def test_bad_ciphertext(self):
        image, outcomes = self.unpack('S19_update.tar.gz', AesCbcDecryptor.MAGIC + b'x' * 15,
                                      [AesCbcDecryptor(FIXTURE_KEY)])

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_DECRYPT_FAILED)

    def test_expansion_guard(self):
        image, outcomes = self.unpack('bomb.img.gz', gzip.compress(b'\x00' * (4 * 1024 * 1024)))

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_GUARD)
        self.assertFalse((self.out / outcomes[0].artifact_id).exists())

    def test_bomb_stopped_while_decompressing(self):
        data = gzip.compress(b'\x00' * (8 * 1024 * 1024))

        # over the ratio budget, far under the byte cap
        self.assertLess(8 * 1024 * 1024, self.limits.max_total_bytes)
        self.assertGreater(8 * 1024 * 1024, len(data) * self.limits.max_expansion_ratio)

        with self.assertRaises(ExpansionGuard):
            inflate_bounded(data, 'gzip', len(data) * self.limits.max_expansion_ratio)

        self.assertEqual(len(inflate_bounded(data, 'gzip', self.limits.max_total_bytes)), 8 * 1024 * 1024)

        with self.assertLogs('extractor', 'WARNING') as logs:
            image, outcomes = self.unpack('bomb.img.gz', data)

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_GUARD)
        self.assertIn('gzip stream exceeds', logs.output[0])

    def test_encrypted_without_plugin(self):
        image, outcomes = self.unpack('fw.bin', random_bytes(16384, seed=3))

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_ENCRYPTED)

    def test_unsupported_filesystem(self):
        image, outcomes = self.unpack('fw.img', squashfs_stub(b'rootfs'))

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_UNSUPPORTED_FS)

    def test_corrupt_gzip(self):
        image, outcomes = self.unpack('fw.tar.gz', b'\x1f\x8b\x08\x00' + b'\xff' * 64)

        self.assertIsNone(image)
        self.assertEqual(outcomes[0].reason, REASON_CORRUPT)

    def test_partial_removed_or_kept(self):
        data = tar_gz({'changelog.txt': 'incremental fix\n'})
        image, outcomes = self.unpack('patch.tar.gz', data)

        self.assertIsNone(image)
        self.assertEqual((outcomes[-1].stage, outcomes[-1].reason), (Stage.RECONSTRUCTION, REASON_PARTIAL))

        self.c.KEEP_PARTIAL_IMAGES = True
        image, outcomes = self.unpack('patch.tar.gz', data)

        self.assertEqual(image.completeness, Completeness.PARTIAL)
        self.assertEqual(outcomes[-1].verdict, Verdict.PASS)

    def test_traversal_members_skipped(self):
        buf = io.BytesIO()

        with tarfile.open(fileobj=buf, mode='w') as t:
            for name in ('../escape.txt', 'etc/../../escape.txt', 'etc/passwd'):
                info = tarfile.TarInfo(name)
                info.size = 3
                t.addfile(info, io.BytesIO(b'abc'))

        self.c.KEEP_PARTIAL_IMAGES = True
        image, _ = self.unpack('evil.tar', buf.getvalue())

        self.assertEqual(image.files(), ['etc/passwd'])
        self.assertFalse((self.out / 'escape.txt').exists())
        self.assertFalse((Path(self.tmp.name) / 'escape.txt').exists())


class TestRootfs(unittest.TestCase):

    def test_criteria(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = write_tree(Path(tmp), {'etc/version': '1\n'})
            verdict = assess_rootfs(root)

            self.assertEqual(verdict.completeness, Completeness.PARTIAL)
            self.assertEqual(len(verdict.evidence), 2)

            write_tree(root, {'bin/sh': '#!/bin/sh\n'})
            verdict = assess_rootfs(root)

            self.assertEqual(verdict.completeness, Completeness.FULL)
            self.assertEqual(verdict.evidence[1], 'executable: bin/sh')


class TestExtractRecords(unittest.TestCase):

    def setUp(self):
        self.c = load_config(name='TestingConfig')
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_outcomes_and_images(self):
        files = {
            'good.tar.gz': tar_gz(rootfs_nine),
            'empty.bin': b'',
            'truncated.tar.gz': gzip.compress(random_bytes(8192))[:-64],
            'patch.tar.gz': tar_gz({'changelog.txt': 'fix\n'}),
        }
        write_tree(self.dir / 'src', files)
        records = [record_for(name, data) for name, data in files.items()]

        images, outcomes = extract_records(records, artifact_reader(self.dir / 'src'), [], self.dir / 'out', self.c)
        by_artifact = {}

        for o in outcomes:
            by_artifact.setdefault(o.artifact_id, []).append(o)

        self.assertEqual(len(images), 1)
        self.assertEqual(len(by_artifact), 4)
        self.assertEqual([o.stage for o in by_artifact[images[0].artifact_id]],
                         [Stage.INTEGRITY, Stage.DECRYPTION, Stage.RECONSTRUCTION])
        self.assertEqual([i.image_id for i in load_images(self.dir / 'out')], [images[0].image_id])
        self.assertFalse((self.dir / 'out' / '.minerforge.lock').exists())

    def test_locked_output_refused(self):
        out = self.dir / 'out'
        out.mkdir()
        # pid 1 is always running
        (out / LOCK_NAME).write_text('1')

        with self.assertRaises(LockError):
            extract_records([record_for('a.bin', b'a')], artifact_reader(self.dir), [], out, self.c)

    def test_unreadable_artifact_counts_as_empty(self):
        record = record_for('gone.bin', b'gone')
        images, outcomes = extract_records([record], artifact_reader(self.dir / 'src'), [], self.dir / 'out', self.c)

        self.assertEqual(images, [])
        self.assertEqual([(o.stage, o.reason) for o in outcomes], [(Stage.INTEGRITY, REASON_EMPTY)])


class TestKeyMaterial(unittest.TestCase):

    def setUp(self):
        self.c = load_config(name='TestingConfig')

    def test_key_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'keys.yaml'
            path.write_text(f"aes-cbc:\n  key: {FIXTURE_KEY.key.hex()}\n  iv: {FIXTURE_KEY.iv.hex()}\n")

            self.assertEqual(load_key_material(self.c, str(path))['aes-cbc'], FIXTURE_KEY)
            self.assertTrue(build_plugins(self.c, str(path))[0].has_key)

    def test_no_keys(self):
        plugins = build_plugins(self.c)

        self.assertFalse(plugins[0].has_key)

        with self.assertRaises(MissingKeyMaterial):
            plugins[0].decrypt(AesCbcDecryptor.MAGIC + b'\x00' * 16)

    def test_bad_key_length(self):
        with self.assertRaises(UsageError):
            AesCbcDecryptor(KeyMaterial(b'short', bytes(16)))
