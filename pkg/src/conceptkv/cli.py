"""Operator entry point: validate -> mine -> prefill -> index -> query / bench.

Every command is rerunnable: identical inputs give identical outputs. Exit
codes: 0 success, 1 usage, 2 data error, 3 internal invariant violation.
"""

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from .bench import BenchConfig, run_benchmark
from .config import REPO_ENV_VAR, CliConfig, parse_config_file
from .index import UnknownConceptError, write_embedding_file
from .kvstore import CacheFormatError, prefill_concept
from .metadata import (
    MetadataParseError,
    normalize_record,
    parse_model_response,
    read_metadata_file,
    write_metadata_file,
)
from .mining import MiningParams, mine_concept, write_patch_manifest
from .providers import FileProviders, ProviderError
from .session import (
    ByteTokenizer,
    Session,
    TURN_LOG_HEADER,
    UnresolvedConceptError,
    answer,
    concept_prefix_text,
    format_turn_log_line,
)
from .workspace import RepoPaths, build_model, build_store, write_index_files

DATA_ERRORS = (
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
    CacheFormatError,
    ProviderError,
    MetadataParseError,
    UnresolvedConceptError,
    UnknownConceptError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="conceptkv", description=__doc__)
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--repo", type=Path, help=f"repository root (env: {REPO_ENV_VAR})")
    parser.add_argument("--seed", type=int, help="decoder seed")
    parser.add_argument("--precision", choices=("f16", "f32", "f64"),
                        help="f16: compute f32, store f16; f64 computes f64, stores f32")
    parser.add_argument("--k-attr", type=int, dest="k_attr")
    parser.add_argument("--k-patch", type=int, dest="k_patch")
    parser.add_argument("--grid", type=int, dest="grid_size")
    parser.add_argument("--gamma", type=float, dest="fusion_exponent")
    parser.add_argument("--min-coverage", type=float, dest="min_coverage")
    parser.add_argument("--min-mask-area", type=float, dest="min_mask_area")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="normalize raw response files into metadata")
    p.add_argument("responses_dir", type=Path,
                   help="directory of <concept_id>/response.txt files")

    p = sub.add_parser("mine", help="mine hard patches from perception maps")
    p.add_argument("maps_root", type=Path,
                   help="directory of <concept_id>/<image_id>/{mask,difficulty,...}.jmap")
    p.add_argument("--concepts", help="comma-separated subset (default: all subdirs)")

    p = sub.add_parser("prefill", help="build concept KV caches")
    p.add_argument("--concepts", help="comma-separated subset (default: all in metadata)")
    p.add_argument("--force", action="store_true", help="rebuild even when up to date")

    sub.add_parser("index", help="materialize retrieval index files")

    p = sub.add_parser("query", help="answer one query")
    p.add_argument("text")
    p.add_argument("--max-new", type=int, dest="max_new", help="generation budget")
    p.add_argument("--server", help="base URL of a running service (thin-client mode)")
    p.add_argument("--session", default="cli", help="session id for cache reuse")

    p = sub.add_parser("bench", help="latency/QPS comparison of the two pipelines")
    p.add_argument("--concurrency", type=int, required=True,
                   help="client concurrency (required; no published default)")
    p.add_argument("--q-values", default="1,2,4,8,16,32")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--max-new", type=int, dest="max_new", default=8)
    p.add_argument("--pipelines", default="kv_prefix,prompt_concat")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return parser


def resolve_config(args) -> CliConfig:
    """defaults < config file < environment repo < explicit flags"""
    values = {}
    if args.config is not None:
        values.update(parse_config_file(args.config))
    env_repo = os.environ.get(REPO_ENV_VAR)
    if env_repo:
        values["repo"] = env_repo
    valid = {f.name for f in fields(CliConfig) if f.init}
    for name in valid:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return CliConfig(**values)


def mining_params(config: CliConfig) -> MiningParams:
    return MiningParams(
        grid_size=config.grid_size,
        top_k=config.top_k_patches,
        fusion_exponent=config.fusion_exponent,
        min_mask_area=config.min_mask_area,
        min_coverage=config.min_coverage,
    )


def cmd_validate(args, config: CliConfig) -> int:
    responses_dir = args.responses_dir
    if not responses_dir.is_dir():
        raise NotADirectoryError(f"not a directory: {responses_dir}")
    paths = RepoPaths(config.repo)
    paths.root.mkdir(parents=True, exist_ok=True)
    records = {}
    reports = {}
    for concept_dir in sorted(p for p in responses_dir.iterdir() if p.is_dir()):
        cid = concept_dir.name
        response = concept_dir / "response.txt"
        parse_error = None
        raw = {}
        if response.exists():
            try:
                raw = parse_model_response(response.read_text(encoding="utf-8"))
            except MetadataParseError as exc:
                parse_error = str(exc)
        else:
            parse_error = "missing response.txt"
        record, report = normalize_record(raw, cid)
        records[cid] = record
        entry = report.to_dict()
        entry["parse_error"] = parse_error
        reports[cid] = entry
        status = "parse-error" if parse_error else f"{len(report.repairs)} repairs"
        print(f"validate {cid}: {status}, {len(report.warnings)} warnings")
    if not records:
        raise ValueError(f"no concept directories under {responses_dir}")
    write_metadata_file(records, paths.metadata)
    paths.metadata_report.write_text(
        json.dumps(reports, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    print(f"wrote {paths.metadata} ({len(records)} concepts)")
    return 0


def cmd_mine(args, config: CliConfig) -> int:
    maps_root = args.maps_root
    if not maps_root.is_dir():
        raise NotADirectoryError(f"not a directory: {maps_root}")
    paths = RepoPaths(config.repo)
    records = {}
    if paths.metadata.exists():
        records = read_metadata_file(paths.metadata)
    concept_ids = sorted(p.name for p in maps_root.iterdir() if p.is_dir())
    if args.concepts:
        wanted = set(args.concepts.split(","))
        missing = wanted - set(concept_ids)
        if missing:
            raise ValueError(f"no map directories for concepts: {sorted(missing)}")
        concept_ids = sorted(wanted)
    params = mining_params(config)
    for cid in concept_ids:
        providers = FileProviders(maps_root / cid)
        image_ids = sorted(
            p.name for p in (maps_root / cid).iterdir() if p.is_dir()
        )[: config.evidence_images]
        patches, entries = mine_concept(cid, image_ids, records.get(cid), providers, params)
        out_dir = paths.mining_dir(cid)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_patch_manifest(patches, paths.patch_manifest(cid))
        write_embedding_file(
            [(e.entry_id, e.embedding) for e in entries],
            providers.embed_dim,
            paths.patch_embeddings(cid),
        )
        print(
            f"mine {cid}: {len(patches)} patches from {len(image_ids)} images "
            f"(g={params.grid_size}, gamma={params.fusion_exponent}, k={params.top_k}, "
            f"min_mask_area={params.min_mask_area}, min_coverage={params.min_coverage})"
        )
    return 0


def cmd_prefill(args, config: CliConfig) -> int:
    paths = RepoPaths(config.repo)
    store = build_store(paths, config)
    model = build_model(config)
    repo = paths.cache_repository()
    tokenizer = ByteTokenizer()
    concept_ids = store.concept_ids()
    if args.concepts:
        wanted = args.concepts.split(",")
        unknown = set(wanted) - set(concept_ids)
        if unknown:
            raise ValueError(f"unknown concepts: {sorted(unknown)}")
        concept_ids = sorted(wanted)
    for cid in concept_ids:
        if not args.force and repo.has(cid) and repo.fingerprint_of(cid) == model.fingerprint:
            print(f"prefill {cid}: up to date, skipped")
            continue
        tokens = tokenizer.encode(concept_prefix_text(store.records[cid]))
        cache = prefill_concept(model, cid, tokens).astype(config.store_dtype)
        repo.save(cache)
        print(f"prefill {cid}: {cache.prefix_len} tokens, stored {config.store_dtype}")
    return 0


def cmd_index(args, config: CliConfig) -> int:
    paths = RepoPaths(config.repo)
    store = build_store(paths, config)
    counts = write_index_files(paths, store)
    print(
        f"index: {counts['attributes']} attribute vectors, "
        f"{counts['patches']} patch vectors under {paths.index_dir}"
    )
    return 0


def cmd_query(args, config: CliConfig) -> int:
    if args.server:
        return _query_server(args)
    paths = RepoPaths(config.repo)
    store = build_store(paths, config)
    session = Session(
        session_id=args.session,
        model=build_model(config),
        store=store,
        tokenizer=ByteTokenizer(),
        cache_repo=paths.cache_repository() if paths.caches.exists() else None,
        k_attr=config.k_attr,
        k_patch=config.k_patch,
        max_new_tokens=config.max_new_tokens,
        resolve_floor=config.resolve_floor,
    )
    result = answer(session, args.text, max_new_tokens=args.max_new)
    line = format_turn_log_line(session, result)
    new_log = not paths.turns_log.exists()
    with open(paths.turns_log, "a", encoding="utf-8") as fh:
        if new_log:
            fh.write(TURN_LOG_HEADER + "\n")
        fh.write(line + "\n")
    print(f"concept: {result.concept_id} (l_ext={result.l_ext})")
    print(f"tokens: {result.output_token_ids}")
    print(f"answer: {result.answer_text!r}")
    print(line)
    return 0


def _query_server(args) -> int:
    import urllib.error
    import urllib.request

    payload = json.dumps(
        {"session_id": args.session, "query": args.text, "max_new_tokens": args.max_new}
    ).encode()
    url = args.server.rstrip("/") + "/query"
    request = urllib.request.Request(
        url, data=payload, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request) as response:
            body = json.loads(response.read())
    except urllib.error.URLError as exc:
        raise ValueError(f"service request failed: {exc}") from exc
    print(f"concept: {body['concept_id']} (l_ext={body['l_ext']})")
    print(f"tokens: {body['output_token_ids']}")
    print(f"answer: {body['answer_text']!r}")
    return 0


def cmd_bench(args, config: CliConfig) -> int:
    q_values = tuple(int(v) for v in args.q_values.split(","))
    bench_config = BenchConfig(
        client_concurrency=args.concurrency,
        q_values=q_values,
        pipelines=tuple(args.pipelines.split(",")),
        max_new_tokens=args.max_new,
        repetitions=args.reps,
        seed=config.seed,
        k_attr=config.k_attr,
        k_patch=config.k_patch,
    )
    paths = RepoPaths(config.repo)
    report = run_benchmark(bench_config, out_dir=paths.bench_dir)
    print((paths.bench_dir / "report.txt").read_text(), end="")
    print(f"reports under {paths.bench_dir}")
    return 0


def cmd_serve(args, config: CliConfig) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app(config)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "mine": cmd_mine,
    "prefill": cmd_prefill,
    "index": cmd_index,
    "query": cmd_query,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
