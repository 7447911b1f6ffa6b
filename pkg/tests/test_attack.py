import tempfile
import unittest
from itertools import product
from pathlib import Path

import numpy as np

from minerforge.attack import SCENARIOS, Capability, CapabilityProfile, MappingTable, ModelAssignment, Objective, \
    compare_scenarios, dominant_scenario, downward_closure, infer_capabilities, infer_profiles, load_assignments, \
    model_objectives, read_objectives, read_profiles, scenario_matrix, worst_scenario, write_objectives, \
    write_profiles
from minerforge.helpers import ConsistencyError, UsageError
from minerforge.models import EntryPoint, Finding, Inventory, MinerModel, Severity, TriageState
from minerforge.rules import VULN_CLASSES

ALL = frozenset(Capability)


def finding(vuln_class, entry_point, rule_id='rule', path='etc/x', image_id='img',
            triage=TriageState.UNREVIEWED) -> Finding:
    return Finding(rule_id, image_id, path, '', vuln_class, EntryPoint(entry_point), Severity.HIGH, triage)


def inventory(**per_vendor) -> Inventory:
    return Inventory([MinerModel(vendor, f"{vendor}-{n:03d}") for vendor, count in per_vendor.items()
                      for n in range(count)])


class TestClosure(unittest.TestCase):

    def test_downward(self):
        self.assertEqual(downward_closure([Capability.REMOTE_CODE_EXECUTION]), ALL)
        self.assertEqual(downward_closure([Capability.HARDWARE_CONTROL]),
                         frozenset([Capability.HARDWARE_CONTROL, Capability.DISRUPTION]))
        self.assertEqual(downward_closure([]), frozenset())

    def test_closure_is_idempotent(self):
        for capability in Capability:
            once = downward_closure([capability])

            self.assertEqual(downward_closure(once), once)


class TestInference(unittest.TestCase):

    def setUp(self):
        self.table = MappingTable.load()

    def scenario(self, *findings, lan_only=False):
        return dominant_scenario(infer_capabilities(list(findings), self.table, lan_only))

    def test_examples(self):
        self.assertEqual(infer_capabilities([finding('WeakCredentials', 'DebugSSH')], self.table).capabilities, ALL)
        self.assertEqual(self.scenario(finding('WeakCredentials', 'WebUI')), Objective.REVENUE_REDIRECTION)
        self.assertEqual(self.scenario(finding('SshEnabled', 'DebugSSH')), Objective.PERFORMANCE_DISRUPTION)
        self.assertEqual(self.scenario(finding('NoUpdateSignature', 'FirmwareUpdate')), Objective.FULL_TAKEOVER)
        self.assertEqual(self.scenario(finding('NoUpdateSignature', 'API')), Objective.REVENUE_REDIRECTION)
        self.assertEqual(self.scenario(finding('ChecksumOnlyBoot', 'FirmwareUpdate')), Objective.FULL_TAKEOVER)
        self.assertEqual(self.scenario(), Objective.NONE)

    def test_unmapped_pair_ignored(self):
        self.assertEqual(self.scenario(finding('ChecksumOnlyBoot', 'WebUI')), Objective.NONE)

    def test_lan_only_drops_on_path(self):
        stratum = finding('PlaintextStratum', 'Network')

        self.assertEqual(self.scenario(stratum), Objective.REVENUE_REDIRECTION)
        self.assertEqual(self.scenario(stratum, lan_only=True), Objective.NONE)
        self.assertEqual(self.scenario(stratum, finding('LegacyService', 'Network'), lan_only=True),
                         Objective.PERFORMANCE_DISRUPTION)

    def test_rejected_findings_ignored(self):
        weak = finding('WeakCredentials', 'DebugSSH', triage=TriageState.REJECTED)
        ssh = finding('SshEnabled', 'DebugSSH', rule_id='ssh', triage=TriageState.CONFIRMED)
        profile = infer_capabilities([weak, ssh], self.table)

        self.assertEqual(dominant_scenario(profile), Objective.PERFORMANCE_DISRUPTION)
        self.assertEqual(profile.contributing, ('ssh:etc/x',))

    def test_mixed_images(self):
        with self.assertRaises(ConsistencyError):
            infer_capabilities([finding('SshEnabled', 'DebugSSH', image_id='a'),
                                finding('SshEnabled', 'DebugSSH', image_id='b')], self.table)

        with self.assertRaises(ConsistencyError):
            infer_capabilities([finding('SshEnabled', 'DebugSSH', image_id='a')], self.table, image_id='b')

    def test_adding_findings_never_weakens(self):
        pool = [finding(c, e.value, rule_id=f"{c}-{e.value}") for c, e in product(VULN_CLASSES, EntryPoint)
                if self.table.lookup(c, e.value)]
        rng = np.random.default_rng(2024)

        for _ in range(1000):
            picks = rng.choice(len(pool), int(rng.integers(0, 6)), replace=False).tolist()
            base = [pool[i] for i in picks]
            extra = pool[int(rng.integers(0, len(pool)))]
            lan_only = bool(rng.integers(0, 2))
            before = self.scenario(*base, lan_only=lan_only)
            after = self.scenario(*(base + [extra]), lan_only=lan_only)

            self.assertGreaterEqual(compare_scenarios(after, before), 0)

    def test_profiles_per_image(self):
        findings = [finding('SshEnabled', 'DebugSSH', image_id='b'), finding('WebAuthFlaw', 'WebUI', image_id='a')]
        profiles = infer_profiles(findings, self.table, image_ids=['c'])

        self.assertEqual([p.image_id for p in profiles], ['a', 'b', 'c'])
        self.assertEqual([dominant_scenario(p) for p in profiles],
                         [Objective.REVENUE_REDIRECTION, Objective.PERFORMANCE_DISRUPTION, Objective.NONE])


class TestScenarioOrder(unittest.TestCase):

    def test_total_order(self):
        objectives = list(Objective)

        for a, b in product(objectives, objectives):
            self.assertEqual(compare_scenarios(a, b), -compare_scenarios(b, a))
            self.assertEqual(compare_scenarios(a, b) == 0, a == b)

        for a, b, c in product(objectives, objectives, objectives):
            if compare_scenarios(a, b) > 0 and compare_scenarios(b, c) > 0:
                self.assertGreater(compare_scenarios(a, c), 0)

    def test_strongest_first(self):
        ranked = sorted(Objective, key=lambda o: o.rank, reverse=True)

        self.assertEqual(ranked[:4], SCENARIOS)
        self.assertEqual(ranked[-1], Objective.NONE)
        self.assertEqual([o.color for o in SCENARIOS], ['red', 'orange', 'yellow', 'blue'])

    def test_worst(self):
        self.assertEqual(worst_scenario([Objective.PERFORMANCE_DISRUPTION, Objective.REVENUE_REDIRECTION]),
                         Objective.REVENUE_REDIRECTION)
        self.assertEqual(worst_scenario([]), Objective.NONE)


class TestMappingTable(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def load(self, text):
        path = self.dir / 'mapping.yaml'
        path.write_text(text)

        return MappingTable.load(str(path))

    def full(self, extra=''):
        lines = ['mapping:'] + [f"  - {{class: {c}, capability: Disruption}}" for c in VULN_CLASSES]

        return '\n'.join(lines) + '\n' + extra

    def test_packaged_table_is_total(self):
        table = MappingTable.load()

        for vuln_class in VULN_CLASSES:
            self.assertTrue(any(table.lookup(vuln_class, e.value) for e in EntryPoint))

    def test_custom_table(self):
        rce = '  - {class: SshEnabled, entry_point: DebugSSH, capability: RemoteCodeExecution}\n'
        table = self.load(self.full(rce))

        self.assertEqual(table.lookup('SshEnabled', 'DebugSSH').capability, Capability.REMOTE_CODE_EXECUTION)
        self.assertEqual(table.lookup('SshEnabled', 'WebUI').capability, Capability.DISRUPTION)

    def test_errors(self):
        cases = [
            'mapping: {}\n',
            self.full('  - {class: Telepathy, capability: Disruption}\n'),
            self.full('  - {class: SshEnabled, entry_point: Bluetooth, capability: Disruption}\n'),
            self.full('  - {class: SshEnabled, entry_point: API, capability: Omnipotence}\n'),
            self.full('  - {class: SshEnabled, capability: Disruption}\n'),
            'mapping:\n  - {class: SshEnabled, capability: Disruption}\n',
            self.full('  - just a string\n'),
        ]

        for text in cases:
            with self.assertRaises(UsageError):
                self.load(text)

    def test_missing_file(self):
        with self.assertRaises(UsageError):
            MappingTable.load(str(self.dir / 'nope.yaml'))


class TestMatrix(unittest.TestCase):

    def vendor_objectives(self, vendor, counts):
        out = {}
        n = 0

        for objective, count in counts:
            for _ in range(count):
                out[(vendor, f"{vendor}-{n:03d}")] = objective
                n += 1

        return out

    def test_cumulative_counts(self):
        inv = inventory(Bitmain=123, MicroBT=65, Canaan=36, Iceriver=22)
        objectives = {}
        objectives.update(self.vendor_objectives('Bitmain', [(Objective.FULL_TAKEOVER, 113), (Objective.NONE, 10)]))
        objectives.update(self.vendor_objectives('MicroBT', [(Objective.PERFORMANCE_DISRUPTION, 65)]))
        objectives.update(self.vendor_objectives('Canaan', [(Objective.FULL_TAKEOVER, 26),
                                                            (Objective.REVENUE_REDIRECTION, 8),
                                                            (Objective.NONE, 2)]))
        objectives.update(self.vendor_objectives('Iceriver', [(Objective.REVENUE_REDIRECTION, 22)]))

        matrix = scenario_matrix(objectives, inv)
        rows = [[matrix.count(s, v) for v in matrix.vendors] for s in SCENARIOS]

        self.assertEqual(matrix.vendors, ['Bitmain', 'MicroBT', 'Canaan', 'Iceriver'])
        self.assertEqual(matrix.totals, {'Bitmain': 123, 'MicroBT': 65, 'Canaan': 36, 'Iceriver': 22})
        self.assertEqual(rows, [[113, 0, 26, 0], [113, 0, 34, 22], [113, 0, 34, 22], [113, 65, 34, 22]])
        self.assertEqual(matrix.unassessed, [])
        self.assertEqual(matrix.to_records()[0],
                         {'scenario': 'FullTakeover', 'color': 'red', 'Bitmain': 113, 'MicroBT': 0, 'Canaan': 26,
                          'Iceriver': 0})

    def test_single_takeover_counts_everywhere(self):
        matrix = scenario_matrix({('Bitmain', 'Bitmain-000'): Objective.FULL_TAKEOVER}, inventory(Bitmain=1))

        self.assertEqual([matrix.count(s, 'Bitmain') for s in SCENARIOS], [1, 1, 1, 1])

    def test_unassessed_and_vendor_order(self):
        matrix = scenario_matrix({('Canaan', 'Canaan-000'): Objective.PHYSICAL_DEGRADATION},
                                 inventory(Canaan=2, Bitmain=1), vendors=['Bitmain', 'Canaan', 'Other'])

        self.assertEqual(matrix.vendors, ['Bitmain', 'Canaan', 'Other'])
        self.assertEqual(matrix.totals, {'Bitmain': 1, 'Canaan': 2, 'Other': 0})
        self.assertEqual(matrix.unassessed, [('Bitmain', 'Bitmain-000'), ('Canaan', 'Canaan-001')])
        self.assertEqual([matrix.count(s, 'Canaan') for s in SCENARIOS], [0, 0, 1, 1])

    def test_stray_model(self):
        with self.assertRaises(ConsistencyError):
            scenario_matrix({('Bitmain', 'S99'): Objective.FULL_TAKEOVER}, inventory(Bitmain=1))


class TestModels(unittest.TestCase):

    def setUp(self):
        self.profiles = [
            CapabilityProfile('img-a', downward_closure([Capability.DISRUPTION])),
            CapabilityProfile('img-b', downward_closure([Capability.CONFIG_CONTROL])),
            CapabilityProfile('img-c', frozenset()),
        ]

    def test_worst_case_over_images(self):
        objectives = model_objectives(self.profiles, [
            ModelAssignment('Canaan', 'Avalon 15', 'img-a'),
            ModelAssignment('Canaan', 'Avalon 15', 'img-b'),
            ModelAssignment('Bitmain', 'S19', 'img-c'),
        ])

        self.assertEqual(objectives, {('Bitmain', 'S19'): Objective.NONE,
                                      ('Canaan', 'Avalon 15'): Objective.REVENUE_REDIRECTION})

    def test_missing_profile(self):
        with self.assertRaises(ConsistencyError):
            model_objectives(self.profiles, [ModelAssignment('Bitmain', 'S19', 'img-z')])

    def test_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            (tmp / 'models.csv').write_text('manufacturer,model_name,image_id\nCanaan,Avalon 15,img-a\n')
            assignments = load_assignments(tmp / 'models.csv')
            objectives = model_objectives(self.profiles, assignments)

            write_profiles(self.profiles, tmp / 'profiles.jsonl')
            write_objectives(objectives, tmp / 'objectives.jsonl')

            self.assertEqual(assignments, [ModelAssignment('Canaan', 'Avalon 15', 'img-a')])
            self.assertEqual(read_profiles(tmp / 'profiles.jsonl'), self.profiles)
            self.assertEqual(read_objectives(tmp / 'objectives.jsonl'), objectives)

            (tmp / 'bad.csv').write_text('manufacturer,model\nCanaan,Avalon 15\n')

            with self.assertRaises(UsageError):
                load_assignments(tmp / 'bad.csv')
