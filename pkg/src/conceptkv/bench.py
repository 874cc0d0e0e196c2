"""Latency and throughput comparison: cached external KV vs prompt concat.

Two pipelines answer the same per-session query stream at fixed client
concurrency:

  prompt_concat  rebuilds the whole context every turn (metadata text plus a
                 fixed-size stub block per evidence image standing in for
                 re-encoded vision tokens plus the query), re-tokenizes and
                 re-prefills it, and carries no state between turns.
  kv_prefix      prefills the concept text once per session, then each turn
                 sends only retrieved top-k evidence and the query behind the
                 cached prefix.

Reported numbers are wall-to-wall per-turn latency and QPS (completed
requests / elapsed wall time). The first repetition is warmup and excluded
from statistics. Evidence construction (mining, metadata) is never timed;
it is amortized offline.
"""

import json
import math
import statistics
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from .config import DEFAULT_EVIDENCE_IMAGES
from .index import EvidenceStore, select_evidence
from .kernels import DecoderConfig, seeded_model
from .kvstore import EMPTY_PREFIX
from .metadata import ConceptRecord
from .mining import MiningParams, mine_concept
from .providers import SyntheticProviders
from .session import (
    ByteTokenizer,
    Session,
    answer,
    build_turn_tokens,
    concept_prefix_text,
    greedy_decode,
)

__all__ = [
    "BenchConfig",
    "BenchRow",
    "BenchWorkload",
    "PipelineRun",
    "build_workload",
    "run_pipeline_prompt_concat",
    "run_pipeline_kv_prefix",
    "run_equivalence_check",
    "run_benchmark",
    "write_report",
    "DEFAULT_BENCH_QUERY",
]

DEFAULT_BENCH_QUERY = "Tell me <mam>'s ear shape, eye color, and hair length."
PIPELINES = ("kv_prefix", "prompt_concat")

BENCH_ATTRIBUTES = (
    "species: cat",
    "breed: british shorthair",
    "ear: rounded, slightly floppy tip",
    "eye: round amber",
    "hair: short dense gray",
    "whiskers: long white",
    "tail: thick, gently curled",
    "collar: red with a brass bell",
    "chest: lighter gray patch",
    "paw: white socks on front paws",
    "muzzle: broad with pink nose",
    "body: stocky solid gray",
    "pose: often: loaf with tucked paws",
    "material: none",
    "logo: absent",
    "background: often: beige sofa",
)

BENCH_CAPTION = (
    "stocky short-haired gray cat, round amber eyes, broad muzzle with pink nose, "
    "rounded ears, thick curled tail, red collar with brass bell, white front socks, "
    "palette: gray dominant; amber secondary"
)


@dataclass(frozen=True)
class BenchConfig:
    client_concurrency: int            # required; no published value to default to
    q_values: tuple = (1, 2, 4, 8, 16, 32)
    pipelines: tuple = PIPELINES
    max_new_tokens: int = 8
    repetitions: int = 3               # first repetition is warmup
    seed: int = 0
    k_attr: int = 2
    k_patch: int = 1
    image_stub_tokens: int = 128       # per evidence image, prompt_concat only
    evidence_images: int = DEFAULT_EVIDENCE_IMAGES
    query: str = DEFAULT_BENCH_QUERY

    def __post_init__(self):
        if self.client_concurrency < 1:
            raise ValueError("client_concurrency must be >= 1")
        if not self.q_values:
            raise ValueError("q_values must be non-empty")
        if any(q < 1 for q in self.q_values):
            raise ValueError("q_values must be positive")
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        unknown = set(self.pipelines) - set(PIPELINES)
        if unknown:
            raise ValueError(f"unknown pipelines: {sorted(unknown)}")


@dataclass
class BenchRow:
    pipeline: str
    q: int
    mean_latency_ms: float
    latency_ci95_ms: float
    qps: float                          # median over measured repetitions
    latency_reps_ms: tuple = ()
    qps_reps: tuple = ()

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "q": self.q,
            "mean_latency_ms": self.mean_latency_ms,
            "latency_ci95_ms": self.latency_ci95_ms,
            "qps": self.qps,
            "latency_reps_ms": list(self.latency_reps_ms),
            "qps_reps": list(self.qps_reps),
        }


@dataclass
class PipelineRun:
    pipeline: str
    q: int
    requests: int
    elapsed_s: float
    latencies_s: list
    prefill_tokens_per_turn: list
    concept_prefill_events: int
    outputs: list

    @property
    def qps(self) -> float:
        return self.requests / self.elapsed_s


@dataclass
class BenchWorkload:
    model: object
    store: EvidenceStore
    record: ConceptRecord
    concept_id: str
    tokenizer: ByteTokenizer
    query: str
    k_attr: int
    k_patch: int
    max_new_tokens: int
    image_stubs: list
    patch_count: int = field(init=False)

    def __post_init__(self):
        self.patch_count = sum(
            1 for e in self.store.patch_index.entries if e.concept_id == self.concept_id
        )

    def new_session(self, session_id: str) -> Session:
        return Session(
            session_id=session_id,
            model=self.model,
            store=self.store,
            tokenizer=self.tokenizer,
            k_attr=self.k_attr,
            k_patch=self.k_patch,
            max_new_tokens=self.max_new_tokens,
        )

    def concat_turn_text(self) -> str:
        # full metadata + every evidence image, rebuilt from scratch
        parts = [concept_prefix_text(self.record)]
        parts.extend(self.image_stubs)
        parts.append(f"query: {self.query}\nanswer:\n")
        return "".join(parts)


def _image_stub(seed: int, image_id: str, stub_tokens: int) -> str:
    rng = np.random.default_rng([seed, zlib.crc32(image_id.encode())])
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789 "
    head = f"image {image_id}: "
    body_len = max(stub_tokens - len(head) - 1, 0)
    body = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=body_len))
    return head + body + "\n"


def build_workload(config: BenchConfig) -> BenchWorkload:
    # single-head toy model keeps the attention volume, and with it the wall
    # time, low without changing the cost ratio between the two pipelines
    cfg = DecoderConfig(num_layers=2, num_heads=1, head_dim=16, model_dim=16, vocab_size=256)
    model = seeded_model(config.seed, cfg)
    record = ConceptRecord(
        concept="mam",
        category="animal",
        caption=BENCH_CAPTION,
        fingerprint_attributes=BENCH_ATTRIBUTES,
    )
    store = EvidenceStore(text_dim=64, text_seed=3, patch_dim=32)
    store.register_record("mam", record)
    image_ids = [f"img{i}" for i in range(config.evidence_images)]
    providers = SyntheticProviders(seed=config.seed, image_ids=image_ids, height=48, width=48)
    _, entries = mine_concept("mam", image_ids, record, providers, MiningParams())
    store.register_patch_entries(entries)
    stubs = [_image_stub(config.seed, image_id, config.image_stub_tokens) for image_id in image_ids]
    return BenchWorkload(
        model=model,
        store=store,
        record=record,
        concept_id="mam",
        tokenizer=ByteTokenizer(),
        query=config.query,
        k_attr=config.k_attr,
        k_patch=config.k_patch,
        max_new_tokens=config.max_new_tokens,
        image_stubs=stubs,
    )


def run_pipeline_prompt_concat(workload: BenchWorkload, q: int, concurrency: int) -> PipelineRun:
    """Stateless baseline: the whole context is rebuilt and prefilled per turn."""

    def worker(_wid):
        latencies, prefills, outputs = [], [], []
        for _ in range(q):
            start = time.perf_counter()
            tokens = workload.tokenizer.encode(workload.concat_turn_text())
            out, _ = greedy_decode(
                workload.model, tokens, EMPTY_PREFIX, workload.max_new_tokens
            )
            latencies.append(time.perf_counter() - start)
            prefills.append(len(tokens))
            outputs.append(out)
        return latencies, prefills, outputs

    return _run_workers(workload, "prompt_concat", q, concurrency, worker, concept_events=0)


def run_pipeline_kv_prefix(workload: BenchWorkload, q: int, concurrency: int) -> PipelineRun:
    """Cached pipeline: concept prefill happens at most once per session."""
    events = []

    def worker(wid):
        session = workload.new_session(f"bench-{wid}")
        latencies, prefills, outputs = [], [], []
        for _ in range(q):
            result = answer(session, workload.query)
            latencies.append(result.latency_s)
            prefills.append(result.prefill_tokens)
            outputs.append(result.output_token_ids)
            if result.concept_prefill_tokens > 0:
                events.append(wid)
        return latencies, prefills, outputs

    run = _run_workers(workload, "kv_prefix", q, concurrency, worker, concept_events=0)
    run.concept_prefill_events = len(events)
    return run


def _run_workers(workload, pipeline, q, concurrency, worker, concept_events):
    start = time.perf_counter()
    if concurrency == 1:
        results = [worker(0)]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(worker, range(concurrency)))
    elapsed = time.perf_counter() - start
    latencies, prefills, outputs = [], [], []
    for lat, pre, out in results:
        latencies.extend(lat)
        prefills.extend(pre)
        outputs.extend(out)
    return PipelineRun(
        pipeline=pipeline,
        q=q,
        requests=concurrency * q,
        elapsed_s=elapsed,
        latencies_s=latencies,
        prefill_tokens_per_turn=prefills,
        concept_prefill_events=concept_events,
        outputs=outputs,
    )


def run_equivalence_check(workload: BenchWorkload, turns: int = 2) -> dict:
    """Same evidence content and order through both mechanisms must agree.

    The cached path decodes turn tokens behind the external prefix; the
    concat path decodes the literal concatenation prefix tokens || turn
    tokens as one prompt. Greedy outputs must be identical.
    """
    session = workload.new_session("equivalence")
    agree = True
    details = []
    for _ in range(turns):
        result = answer(session, workload.query)
        full_stream = session.prefix_token_ids() + result.turn_token_ids
        concat_out, _ = greedy_decode(
            workload.model, full_stream, EMPTY_PREFIX, workload.max_new_tokens
        )
        same = concat_out == result.output_token_ids
        agree = agree and same
        details.append({"kv": result.output_token_ids, "concat": concat_out, "match": same})
    return {"ok": agree, "turns": details}


def _ci95(values) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    sd = statistics.stdev(values)
    t_crit = float(scipy_stats.t.ppf(0.975, n - 1))
    return t_crit * sd / math.sqrt(n)


def run_benchmark(config: BenchConfig, out_dir=None, workload: BenchWorkload | None = None) -> dict:
    """Measure every (pipeline, Q) with warmup excluded; optionally write reports."""
    if workload is None:
        workload = build_workload(config)
    rows = []
    for pipeline in config.pipelines:
        runner = (
            run_pipeline_kv_prefix if pipeline == "kv_prefix" else run_pipeline_prompt_concat
        )
        for q in config.q_values:
            rep_latency_ms = []
            rep_qps = []
            for rep in range(config.repetitions):
                run = runner(workload, q, config.client_concurrency)
                if rep == 0:
                    continue  # warmup
                rep_latency_ms.append(1000.0 * statistics.fmean(run.latencies_s))
                rep_qps.append(run.qps)
            rows.append(
                BenchRow(
                    pipeline=pipeline,
                    q=q,
                    mean_latency_ms=statistics.fmean(rep_latency_ms),
                    latency_ci95_ms=_ci95(rep_latency_ms),
                    qps=statistics.median(rep_qps),
                    latency_reps_ms=tuple(rep_latency_ms),
                    qps_reps=tuple(rep_qps),
                )
            )
    equivalence = run_equivalence_check(workload)
    report = {
        "config": {
            "client_concurrency": config.client_concurrency,
            "q_values": list(config.q_values),
            "pipelines": list(config.pipelines),
            "max_new_tokens": config.max_new_tokens,
            "repetitions": config.repetitions,
            "seed": config.seed,
            "k_attr": config.k_attr,
            "k_patch": config.k_patch,
            "image_stub_tokens": config.image_stub_tokens,
            "evidence_images": config.evidence_images,
            "query": config.query,
        },
        "rows": [row.to_dict() for row in rows],
        "equivalence_ok": equivalence["ok"],
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["pipeline\tQ\tmean_latency_ms\tlatency_ci95_ms\tqps"]
    for row in report["rows"]:
        lines.append(
            f"{row['pipeline']}\t{row['q']}\t{row['mean_latency_ms']:.3f}"
            f"\t{row['latency_ci95_ms']:.3f}\t{row['qps']:.3f}"
        )
    lines.append(f"# identical answer tokens for identical evidence: {report['equivalence_ok']}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2) + "\n", encoding="utf-8"
    )
