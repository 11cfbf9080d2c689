"""Umbrella command line: serve the API, label regions, build cohorts,
and run the approach comparison."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .api import load_service_config, run_service
from .bundled import bundled_path
from .errors import ArquestError, ConfigError
from .evaluation import (
    build_report,
    parse_approaches,
    records_to_csv,
    run_experiment,
    summary_table,
    write_report,
)
from .figures import render_figures
from .geo import (
    all_region_profiles,
    ingest_indicators,
    load_indicator_defs,
    load_region_profiles,
    region_profiles_to_json,
)
from .kb import load_knowledge_base
from .llm import RemoteEndpoint
from .synth import (
    generate_cohort,
    load_caption_pool,
    load_cohort_config,
    load_ehr_pool,
    read_cohort,
    write_cohort,
)


def cmd_serve(args) -> int:
    run_service(load_service_config(args.config))
    return 0


def cmd_geo_label(args) -> int:
    defs = load_indicator_defs(args.defs)
    table = ingest_indicators(args.csv, defs)
    profiles = all_region_profiles(table)
    doc = region_profiles_to_json(profiles)
    Path(args.out).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"labeled {len(profiles)} municipalities -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    config = load_cohort_config(args.config)
    kb = load_knowledge_base(args.kb)
    regions = load_region_profiles(args.geo)
    bands = load_ehr_pool(args.ehr_pool)
    personas = load_caption_pool(args.caption_pool)
    cohort = generate_cohort(config, kb, regions, bands, personas)
    write_cohort(cohort, args.out)
    print(f"wrote {len(cohort)} applicants -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    kb = load_knowledge_base(args.kb)
    regions = load_region_profiles(args.geo)
    cohort = read_cohort(args.cohort, regions)
    approaches = parse_approaches(args.approaches)

    endpoint_factory = None
    if any(a.kind.value == "dynamic-remote" for a in approaches):
        if not (args.remote_url and args.remote_model):
            raise ConfigError("dynamic-remote needs --remote-url and --remote-model")
        endpoint = RemoteEndpoint(base_url=args.remote_url, model=args.remote_model)
        endpoint_factory = lambda approach: endpoint  # noqa: E731

    records = run_experiment(cohort, kb, approaches, endpoint_factory=endpoint_factory)
    report = build_report(records)

    out = Path(args.out)
    write_report(report, out)
    summary = summary_table(report)
    Path(args.summary).write_text(summary, encoding="utf-8")
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    csv_path.write_text(records_to_csv(records), encoding="utf-8")
    figures_dir = Path(args.figures) if args.figures else out.parent / "figures"
    paths = render_figures(report, figures_dir)

    print(summary, end="")
    print(f"report: {out}")
    print(f"summary: {args.summary}")
    print(f"records: {csv_path}")
    print(f"figures: {', '.join(str(p) for p in paths)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arquest")
    commands = parser.add_subparsers(dest="command", required=True)

    serve = commands.add_parser("serve", help="run the HTTP session service")
    serve.add_argument("--config", required=True, help="service config JSON")
    serve.set_defaults(handler=cmd_serve)

    geo = commands.add_parser("geo", help="regional indicator tooling")
    geo_sub = geo.add_subparsers(dest="geo_command", required=True)
    label = geo_sub.add_parser("label", help="cluster indicators into ordinal region profiles")
    label.add_argument("--defs", required=True, help="indicator definitions JSON")
    label.add_argument("--csv", required=True, help="municipality indicator CSV")
    label.add_argument("--out", required=True, help="region profiles JSON to write")
    label.set_defaults(handler=cmd_geo_label)

    synth = commands.add_parser("synth", help="generate a synthetic cohort")
    synth.add_argument("--config", required=True, help="cohort config JSON")
    synth.add_argument("--kb", required=True, help="knowledge base JSON")
    synth.add_argument("--geo", required=True, help="region profiles JSON")
    synth.add_argument("--out", required=True, help="cohort JSONL to write")
    synth.add_argument("--ehr-pool", default=bundled_path("ehr_pool.json"),
                       help="health-record pool JSON (bundled default)")
    synth.add_argument("--caption-pool", default=bundled_path("caption_pool.json"),
                       help="social caption pool JSON (bundled default)")
    synth.set_defaults(handler=cmd_synth)

    evaluate = commands.add_parser("eval", help="compare approaches over a cohort")
    evaluate.add_argument("--cohort", required=True, help="cohort JSONL")
    evaluate.add_argument("--kb", required=True, help="knowledge base JSON")
    evaluate.add_argument("--geo", required=True, help="region profiles JSON")
    evaluate.add_argument("--approaches", default="traditional,dynamic-mock",
                          help="comma-separated approaches")
    evaluate.add_argument("--out", required=True, help="report JSON to write")
    evaluate.add_argument("--summary", required=True, help="plain-text summary to write")
    evaluate.add_argument("--csv", default=None,
                          help="per-record CSV (default: next to the report)")
    evaluate.add_argument("--figures", default=None,
                          help="figure directory (default: figures/ next to the report)")
    evaluate.add_argument("--remote-url", default=None, help="remote gateway base URL")
    evaluate.add_argument("--remote-model", default=None, help="remote gateway model name")
    evaluate.set_defaults(handler=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ArquestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
