import shutil
import tempfile
import unittest
from pathlib import Path

from minerforge.catalog import VendorAliases, candidate_artifacts, class_counts, classify_artifact, \
    infer_generation, infer_identity, ingest_directory, load_inventory, read_catalog, resolve_identity, \
    write_catalog
from minerforge.helpers import CatalogError, UsageError, load_config
from minerforge.models import UNKNOWN, ArtifactClass
from tests.catalog_samples import download_area_classes, download_area_oracle, write_download_area


class TestIdentity(unittest.TestCase):

    def setUp(self):
        self.c = load_config(name='TestingConfig')
        self.aliases = VendorAliases.load(None, self.c.VENDORS)

    def test_bitmain_image_name(self):
        identity = infer_identity('Bitmain_2025-11-19_FR-1.27_251009-S19XP_2B_Hyd', {}, self.aliases)

        self.assertEqual(tuple(identity), ('Bitmain', 'S19XP', 'FR-1.27'))

    def test_canaan_update_name(self):
        identity = infer_identity('Canaan_Avalon_15xHY_release_OTA_2025111202_773bb92.aup', {}, self.aliases)

        self.assertEqual(tuple(identity), ('Canaan', 'Avalon 15', '2025111202'))

    def test_product_line_alias(self):
        identity = infer_identity('WhatsMiner_M30S_h6_20230510.bin', {}, self.aliases)

        self.assertEqual(identity.manufacturer, 'MicroBT')
        self.assertEqual(identity.family, 'M30S')
        self.assertEqual(identity.generation, '20230510')

    def test_case_insensitive(self):
        for name in ('Bitmain_2025-11-19_FR-1.27_251009-S19XP_2B_Hyd',
                     'Canaan_Avalon_15xHY_release_OTA_2025111202_773bb92.aup',
                     'Antminer-S9-all-201812051512-autofreq-user-Update2UBI-NF.tar.gz'):
            self.assertEqual(infer_identity(name, {}, self.aliases), infer_identity(name.upper(), {}, self.aliases))
            self.assertEqual(infer_identity(name, {}, self.aliases), infer_identity(name.lower(), {}, self.aliases))

    def test_unknown_vendor(self):
        identity = infer_identity('random_blob.bin', {}, self.aliases)

        self.assertEqual(tuple(identity), ('Other', UNKNOWN, UNKNOWN))

    def test_metadata_wins(self):
        identity, conflicts = resolve_identity('Antminer_S19_1.0.bin',
                                               {'manufacturer': 'Bitmain', 'model': 'S19J', 'version': '2.0'},
                                               self.aliases)

        self.assertEqual(tuple(identity), ('Bitmain', 'S19J', '2.0'))
        self.assertEqual(len(conflicts), 2)

    def test_generation(self):
        self.assertEqual(infer_generation('fw_v1.2.3.bin'), 'V1.2.3')
        self.assertEqual(infer_generation('fw_2.1.bin'), '2.1')
        self.assertEqual(infer_generation('fw_20230510.bin'), '20230510')
        self.assertEqual(infer_generation('firmware.bin'), UNKNOWN)

    def test_alias_vendor_outside_table(self):
        with self.assertRaises(UsageError):
            VendorAliases({'Nobody': {'aliases': ['nobody']}}, ['Bitmain', 'Other'])


class TestClassify(unittest.TestCase):

    def test_magic_before_extension(self):
        self.assertEqual(classify_artifact(b'%PDF-1.7 ...', 'manual.bin'), ArtifactClass.DOCUMENTATION)
        self.assertEqual(classify_artifact(b'hsqs' + b'\x00' * 60, 'blob'), ArtifactClass.FLASH_IMAGE)
        self.assertEqual(classify_artifact(b'\x1f\x8b\x08\x00', 'blob'), ArtifactClass.UPDATE_PACKAGE)

    def test_extension(self):
        self.assertEqual(classify_artifact(b'BMU payload', 'S19_release.bmu'), ArtifactClass.UPDATE_PACKAGE)
        self.assertEqual(classify_artifact(b'\x00' * 16, 'flash.img'), ArtifactClass.FLASH_IMAGE)
        self.assertEqual(classify_artifact(b'MZ', 'tool.EXE'), ArtifactClass.MANAGEMENT_TOOL)

    def test_fallback(self):
        self.assertEqual(classify_artifact(b'', 'noext'), ArtifactClass.OTHER)
        self.assertEqual(classify_artifact(b'plain', 'notes.sha256'), ArtifactClass.OTHER)


class TestIngest(unittest.TestCase):

    def setUp(self):
        self.c = load_config(name='TestingConfig')
        self.aliases = VendorAliases.load(None, self.c.VENDORS)
        self.tmp = tempfile.TemporaryDirectory()
        self.root = write_download_area(Path(self.tmp.name) / 'area')

    def tearDown(self):
        self.tmp.cleanup()

    def test_classes_match_oracle(self):
        records = ingest_directory(self.root, self.aliases, self.c.WORKER_JOBS)

        self.assertEqual(len(records), 12)
        self.assertEqual({k: v for k, v in class_counts(records).items() if v}, download_area_oracle)

        for r in records:
            self.assertEqual(r.artifact_class.value, download_area_classes[r.source_path])
            self.assertEqual(r.artifact_id, r.content_hash[:16])

    def test_candidates(self):
        records = ingest_directory(self.root, self.aliases)

        self.assertEqual(len(candidate_artifacts(records)), 6)

    def test_duplicate_content_is_one_record(self):
        shutil.copy(self.root / 'README.txt', self.root / 'docs' / 'README-copy.txt')
        records = ingest_directory(self.root, self.aliases)
        readme = [r for r in records if 'README.txt' in r.source_paths]

        self.assertEqual(len(records), 12)
        self.assertEqual(readme[0].source_paths, ['README.txt', 'docs/README-copy.txt'])

    def test_idempotent_and_parallelism_independent(self):
        out = Path(self.tmp.name)
        write_catalog(ingest_directory(self.root, self.aliases, 1), out / 'one.jsonl')
        write_catalog(ingest_directory(self.root, self.aliases, 4), out / 'two.jsonl')

        self.assertEqual((out / 'one.jsonl').read_bytes(), (out / 'two.jsonl').read_bytes())
        self.assertEqual(len(read_catalog(out / 'one.jsonl')), 12)

    def test_unreadable_root(self):
        with self.assertRaises(CatalogError):
            ingest_directory(Path(self.tmp.name) / 'missing', self.aliases)

    def test_embedded_metadata(self):
        import io
        import json
        import zipfile

        buf = io.BytesIO()

        with zipfile.ZipFile(buf, 'w') as z:
            z.writestr('metadata.json', json.dumps({'manufacturer': 'MicroBT', 'model': 'M50', 'version': '3.1'}))
            z.writestr('rootfs.img', b'\x00' * 64)

        (self.root / 'update_package.zip').write_bytes(buf.getvalue())
        records = ingest_directory(self.root, self.aliases)
        package = [r for r in records if r.source_path == 'update_package.zip'][0]

        self.assertEqual((package.manufacturer, package.family, package.generation), ('MicroBT', 'M50', '3.1'))
        self.assertEqual(package.artifact_class, ArtifactClass.UPDATE_PACKAGE)


class TestInventory(unittest.TestCase):

    def setUp(self):
        self.c = load_config(name='TestingConfig')
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'inventory.csv'

    def tearDown(self):
        self.tmp.cleanup()

    def test_load(self):
        self.path.write_text('manufacturer,model_name,family,release_year\n'
                             'Bitmain,S19 XP,S19,2022\n'
                             'Bitmain,S9,S9,\n'
                             'MicroBT,M30S,M30,2020\n')
        inventory = load_inventory(self.path, self.c.VENDORS)

        self.assertEqual(inventory.per_vendor_counts, {'Bitmain': 2, 'MicroBT': 1})
        self.assertIsNone(inventory.models[1].release_year)

    def test_duplicate_rejected(self):
        self.path.write_text('manufacturer,model_name,family,release_year\nBitmain,S9,S9,2016\nBitmain,S9,S9,2016\n')

        with self.assertRaises(CatalogError):
            load_inventory(self.path, self.c.VENDORS)

    def test_vendor_outside_table(self):
        self.path.write_text('manufacturer,model_name,family,release_year\nAcme,X1,X,2020\n')

        with self.assertRaises(CatalogError):
            load_inventory(self.path, self.c.VENDORS)
