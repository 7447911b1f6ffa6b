import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from minerforge.attack import MappingTable, infer_profiles, load_assignments, model_objectives, read_objectives, \
    scenario_matrix, write_objectives, write_profiles
from minerforge.catalog import VendorAliases, candidate_artifacts, class_counts, ingest_directory, load_inventory, \
    read_catalog, write_catalog
from minerforge.collector import CrawlPlan, crawl_index, download_targets, fetch_catalog_endpoint, mirror_repository
from minerforge.decryptor import build_plugins
from minerforge.dedup import write_clusters
from minerforge.extractor import extract_directory, load_images
from minerforge.helpers import MinerforgeException, UsageError, load_config, setup_logging, write_jsonl
from minerforge.pipeline import CLUSTERS_NAME, OUTCOMES_NAME, apply_dedup, read_outcomes, run_directory, \
    write_outcomes
from minerforge.report import FORMATS, corpus_summary, funnel_report, render, render_chronological, \
    render_document, render_unassessed
from minerforge.rules import load_rules, load_weak_hashes
from minerforge.scanner import apply_triage, fingerprint_records, load_triage, open_images, read_findings, \
    read_fingerprints, scan_images, write_findings

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_USAGE = 2


def _records(c, args):
    if args.catalog:
        return read_catalog(args.catalog)

    aliases = VendorAliases.load(c.VENDOR_ALIASES_FILE, c.VENDORS)

    return ingest_directory(Path(args.input), aliases, c.WORKER_JOBS)


def cmd_catalog(c, args, l: logging.Logger) -> int:
    aliases = VendorAliases.load(c.VENDOR_ALIASES_FILE, c.VENDORS)
    records = ingest_directory(Path(args.root), aliases, c.WORKER_JOBS)
    write_catalog(records, Path(args.out))

    for name, count in class_counts(records).items():
        l.info(f"{name}: {count}")

    l.info(f"{len(candidate_artifacts(records))} firmware candidates")

    if args.inventory:
        inventory = load_inventory(Path(args.inventory), c.VENDORS)

        for vendor, count in inventory.per_vendor_counts.items():
            l.info(f"{vendor}: {count} models")

    return EXIT_OK


def cmd_crawl(c, args, l: logging.Logger) -> int:
    out = Path(args.out)

    if args.root:
        plan = CrawlPlan.from_config(c, args.root, args.depth, args.allow)
        manifest = crawl_index(plan, out, c)
    elif args.endpoint:
        targets = fetch_catalog_endpoint(args.endpoint, c)
        manifest = download_targets(targets, out, c)
    else:
        manifest = mirror_repository(args.repo, out, c)

    l.info(f"{len(manifest.entries)} files in {out}")

    return EXIT_OK


def cmd_extract(c, args, l: logging.Logger) -> int:
    records = candidate_artifacts(_records(c, args))
    plugins = build_plugins(c, args.keys)
    out = Path(args.out)

    images, outcomes = extract_directory(records, Path(args.input), plugins, out, c)
    write_outcomes(outcomes, out / OUTCOMES_NAME)
    l.info(f"{len(images)} images from {len(records)} candidates")

    return EXIT_OK


def cmd_dedup(c, args, l: logging.Logger) -> int:
    directory = Path(args.input)
    images = load_images(directory)
    outcomes_path = directory / OUTCOMES_NAME
    outcomes = read_outcomes(outcomes_path) if outcomes_path.is_file() else []

    clusters, outcomes = apply_dedup(images, outcomes, c, args.threshold, args.mode)
    write_clusters(clusters, Path(args.out) if args.out else directory / CLUSTERS_NAME)

    if outcomes_path.is_file():
        write_outcomes(outcomes, outcomes_path)

    l.info(f"{len(images)} images in {len(clusters)} clusters")

    return EXIT_OK


def cmd_funnel(c, args, l: logging.Logger) -> int:
    records = _records(c, args)
    run = run_directory(records, Path(args.input), build_plugins(c, args.keys), Path(args.out), c)
    sys.stdout.write(render(run.report, 'markdown-table').decode('utf-8'))

    return EXIT_OK


def cmd_scan(c, args, l: logging.Logger) -> int:
    rules = load_rules(list(c.RULE_FILES) + (args.rules or []), c, include_builtin=not c.SUPPRESS_BUILTIN_RULES)
    weak_hashes = load_weak_hashes(args.weak_hashes or c.WEAK_HASH_FILE)
    images = open_images(Path(args.image))

    findings = scan_images(images, rules, weak_hashes, c.WORKER_JOBS)
    write_findings(findings, Path(args.out))

    if args.fingerprints:
        write_jsonl(Path(args.fingerprints), fingerprint_records(images))

    l.info(f"{len(findings)} findings over {len(images)} images with {len(rules)} rules")

    return EXIT_OK


def cmd_infer(c, args, l: logging.Logger) -> int:
    table = MappingTable.load(c.MAPPING_FILE)
    findings = read_findings(Path(args.findings))
    image_ids = [i.image_id for i in open_images(Path(args.images))] if args.images else []

    profiles = infer_profiles(findings, table, args.lan_only or c.LAN_ONLY, image_ids)
    write_profiles(profiles, Path(args.out))

    if args.models:
        if not args.objectives:
            raise UsageError("--models needs --objectives")

        objectives = model_objectives(profiles, load_assignments(Path(args.models)))
        write_objectives(objectives, Path(args.objectives))

    l.info(f"{len(profiles)} capability profiles")

    return EXIT_OK


def cmd_report(c, args, l: logging.Logger) -> int:
    sections = [('Corpus reduction', funnel_report(read_outcomes(Path(args.outcomes))))]

    if args.objectives or args.inventory:
        if not (args.objectives and args.inventory):
            raise UsageError("--objectives and --inventory go together")

        inventory = load_inventory(Path(args.inventory), c.VENDORS)
        matrix = scenario_matrix(read_objectives(Path(args.objectives)), inventory)
        sections.append(('LAN attack scenarios', matrix))
        sections.append(('Miner models by manufacturer', render_chronological(inventory)))
        sections.append(('Unassessed models', render_unassessed(matrix)))

    if args.catalog:
        if not args.images:
            raise UsageError("--catalog needs --images")

        os_fps, miner_fps = read_fingerprints(Path(args.fingerprints)) if args.fingerprints else ([], [])
        images = load_images(Path(args.images))
        sections.append(('Corpus summary', corpus_summary(read_catalog(Path(args.catalog)), images, os_fps,
                                                          miner_fps, c.VENDORS)))

    data = render_document(sections, args.format)

    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)

    return EXIT_OK


def cmd_triage(c, args, l: logging.Logger) -> int:
    findings = apply_triage(read_findings(Path(args.findings)), load_triage(args.decisions))
    write_findings(findings, Path(args.out))

    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='minerforge', description='Static attack-surface analysis of miner firmware')
    parser.add_argument('--config', dest='config', required=False, help='YAML file of config overrides')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('catalog', help='classify and identify every artifact under a directory')
    p.add_argument('--root', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--inventory', required=False)
    p.set_defaults(func=cmd_catalog)

    p = sub.add_parser('crawl', help='mirror a vendor index, catalog endpoint or repository')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--root', help='directory-index URL')
    source.add_argument('--endpoint', help='JSON catalog endpoint URL')
    source.add_argument('--repo', help='repository directory, archive or archive URL')
    p.add_argument('--depth', type=int, required=False)
    p.add_argument('--allow', nargs='*', default=[])
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_crawl)

    for name, func, help_text in (('extract', cmd_extract, 'unpack firmware candidates into images'),
                                  ('funnel', cmd_funnel, 'extract and deduplicate, then print the funnel')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--in', dest='input', required=True)
        p.add_argument('--out', required=True)
        p.add_argument('--catalog', required=False, help='catalog file; the input is catalogued when absent')
        p.add_argument('--keys', required=False, help='YAML key file for decryptor plugins')
        p.set_defaults(func=func)

    p = sub.add_parser('dedup', help='cluster extracted images')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--threshold', type=float, required=False)
    p.add_argument('--mode', choices=['exact', 'estimated'], required=False)
    p.add_argument('--out', required=False)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser('scan', help='run the rule engine over images')
    p.add_argument('--image', required=True)
    p.add_argument('--rules', action='append', required=False)
    p.add_argument('--out', required=True)
    p.add_argument('--weak-hashes', dest='weak_hashes', required=False)
    p.add_argument('--fingerprints', required=False, help='write OS, miner and component fingerprints here')
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser('infer', help='capability profiles and dominant scenarios')
    p.add_argument('--findings', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--lan-only', dest='lan_only', action='store_true')
    p.add_argument('--images', required=False, help='image directory, so images without findings get a profile')
    p.add_argument('--models', required=False, help='CSV of manufacturer,model_name,image_id')
    p.add_argument('--objectives', required=False)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser('report', help='render the funnel, scenario matrix and corpus summary')
    p.add_argument('--outcomes', required=True)
    p.add_argument('--objectives', required=False)
    p.add_argument('--inventory', required=False)
    p.add_argument('--catalog', required=False)
    p.add_argument('--images', required=False)
    p.add_argument('--fingerprints', required=False)
    p.add_argument('--format', choices=FORMATS, default='markdown-table')
    p.add_argument('--out', required=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('triage', help='apply manual review decisions to findings')
    p.add_argument('--findings', required=True)
    p.add_argument('--decisions', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_triage)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        c = load_config(args.config)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    l = setup_logging(c, args.command)

    try:
        return args.func(c, args, l)
    except UsageError as e:
        l.error(e)
        return EXIT_USAGE
    except MinerforgeException as e:
        l.error(e)
        return EXIT_FATAL


if __name__ == '__main__':
    sys.exit(main())
