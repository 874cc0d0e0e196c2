import json
import statistics

import pytest

from conceptkv.bench import (
    BenchConfig,
    build_workload,
    run_benchmark,
    run_equivalence_check,
    run_pipeline_kv_prefix,
    run_pipeline_prompt_concat,
)


@pytest.fixture(scope="module")
def workload():
    return build_workload(BenchConfig(client_concurrency=1, seed=0))


def test_config_validation():
    with pytest.raises(TypeError):
        BenchConfig()  # concurrency has no default
    with pytest.raises(ValueError):
        BenchConfig(client_concurrency=0)
    with pytest.raises(ValueError):
        BenchConfig(client_concurrency=1, q_values=())
    with pytest.raises(ValueError):
        BenchConfig(client_concurrency=1, repetitions=2)
    with pytest.raises(ValueError):
        BenchConfig(client_concurrency=1, pipelines=("kv_prefix", "magic"))


def test_prompt_concat_is_stateless(workload):
    run = run_pipeline_prompt_concat(workload, q=4, concurrency=1)
    assert run.requests == 4
    # per-turn prefill token count is constant and totals Q x single turn
    assert len(set(run.prefill_tokens_per_turn)) == 1
    single = run.prefill_tokens_per_turn[0]
    assert sum(run.prefill_tokens_per_turn) == 4 * single


def test_prompt_concat_context_includes_all_evidence(workload):
    text = workload.concat_turn_text()
    for attr in workload.record.fingerprint_attributes:
        assert attr in text
    assert text.count("image img") == len(workload.image_stubs)
    assert workload.query in text


def test_kv_prefix_amortizes_concept_prefill(workload):
    run = run_pipeline_kv_prefix(workload, q=6, concurrency=1)
    assert run.concept_prefill_events == 1
    # turn 1 pays the concept prefill; later turns only pay turn tokens
    assert run.prefill_tokens_per_turn[0] > run.prefill_tokens_per_turn[1]
    assert len(set(run.prefill_tokens_per_turn[1:])) == 1


def test_kv_turn_context_shorter_than_concat(workload):
    concat = run_pipeline_prompt_concat(workload, q=2, concurrency=1)
    kv = run_pipeline_kv_prefix(workload, q=2, concurrency=1)
    assert kv.prefill_tokens_per_turn[1] < concat.prefill_tokens_per_turn[1]


def test_pipelines_agree_on_identical_evidence(workload):
    result = run_equivalence_check(workload, turns=2)
    assert result["ok"]
    for turn in result["turns"]:
        assert turn["kv"] == turn["concat"]


def test_kv_qps_nondecreasing_in_q():
    config = BenchConfig(
        client_concurrency=1,
        q_values=(1, 8, 32),
        pipelines=("kv_prefix",),
        repetitions=4,
        max_new_tokens=4,
    )
    report = run_benchmark(config)
    kv_rows = sorted(
        (r for r in report["rows"] if r["pipeline"] == "kv_prefix"), key=lambda r: r["q"]
    )
    qps = [r["qps"] for r in kv_rows]
    for earlier, later in zip(qps, qps[1:]):
        assert later >= earlier * 0.75  # nondecreasing up to timing noise


def test_run_benchmark_writes_reports(tmp_path):
    config = BenchConfig(
        client_concurrency=1, q_values=(1, 2), repetitions=3, max_new_tokens=2
    )
    report = run_benchmark(config, out_dir=tmp_path)
    assert len(report["rows"]) == 4  # 2 pipelines x 2 Q values
    table = (tmp_path / "report.txt").read_text()
    assert table.startswith("pipeline\tQ\t")
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["equivalence_ok"] is True
    assert {row["pipeline"] for row in payload["rows"]} == {"kv_prefix", "prompt_concat"}


def test_kv_latency_beats_concat_on_small_grid():
    config = BenchConfig(
        client_concurrency=1, q_values=(1, 8), repetitions=3, max_new_tokens=4
    )
    report = run_benchmark(config)
    by_key = {(r["pipeline"], r["q"]): r for r in report["rows"]}
    for q in (1, 8):
        assert (
            by_key[("kv_prefix", q)]["mean_latency_ms"]
            <= by_key[("prompt_concat", q)]["mean_latency_ms"]
        )


def test_concurrency_runs_disjoint_sessions(workload):
    run = run_pipeline_kv_prefix(workload, q=2, concurrency=3)
    assert run.requests == 6
    assert run.concept_prefill_events == 3  # one cold prefill per worker session
    first = run.outputs[0]
    assert all(out == first for out in run.outputs)


def test_workload_is_deterministic():
    a = build_workload(BenchConfig(client_concurrency=1, seed=7))
    b = build_workload(BenchConfig(client_concurrency=1, seed=7))
    assert a.concat_turn_text() == b.concat_turn_text()
    assert [e.entry_id for e in a.store.patch_index.entries] == [
        e.entry_id for e in b.store.patch_index.entries
    ]
    run_a = run_pipeline_kv_prefix(a, q=2, concurrency=1)
    run_b = run_pipeline_kv_prefix(b, q=2, concurrency=1)
    assert run_a.outputs == run_b.outputs
