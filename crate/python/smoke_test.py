"""Smoke test for the pymergebench extension module.

Build the module first, e.g.

    cargo build -p mergebench-py --features extension-module --release
    cp target/release/libpymergebench.so python/pymergebench.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pymergebench as mb


def check_merges():
    a, b = mb.TensorMap(), mb.TensorMap()
    a.insert("w", [1.0, 0.0])
    b.insert("w", [0.0, 1.0])
    mid = mb.linear_merge([a, b], [0.5, 0.5])
    assert mid.get("w")[0] == [0.5, 0.5]

    out, records = mb.slerp_merge(a, b, 0.25)
    x, y = out.get("w")[0]
    assert abs(x - math.cos(math.pi / 8)) < 1e-6 and abs(y - math.sin(math.pi / 8)) < 1e-6
    assert records[0]["fallback"] == "none" and abs(records[0]["omega"] - math.pi / 2) < 1e-9

    v, omega, fallback = mb.slerp_vector([1.0, 2.0], [1.0, 2.0], 0.3)
    assert fallback == "linear_parallel"

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.safetensors")
        a.write(path)
        assert mb.TensorMap.read(path) == a


def check_metrics():
    assert mb.auroc([0.9, 0.1], [1, 0]) == 1.0
    assert mb.auprc([0.5, 0.5], [1, 0]) == 0.5
    report = mb.dlt_deltas(9.22, 9.24, 4.97)
    assert round(report["delta1"], 2) == 4.27 and round(report["delta2"], 2) == 0.02
    folds = mb.kfold_split([0, 1] * 4, 2)
    assert sorted(folds) == [0, 0, 0, 0, 1, 1, 1, 1]


def check_toy_lm():
    letters = mb.ToyLm.train(["abab ab ba"] * 5, vocab_texts=["123 45"])
    digits = mb.ToyLm.train(["12 34 5"] * 5, vocab_texts=["ab"])
    assert letters.vocab_size() == digits.vocab_size()
    merged, _ = mb.slerp_merge(letters.to_tensor_map(), digits.to_tensor_map(), 0.5)
    lm = mb.ToyLm.from_tensor_map(merged)
    assert abs(sum(lm.next_token_distribution("a")) - 1.0) < 1e-12
    assert lm.perplexity("ab 12") > 1.0


def check_retrieval():
    index = mb.Bm25Index([("d1", "heart failure patient"), ("d2", "kidney stones"), ("d3", "heart attack")])
    plain = index.search("heart")
    assert {d for d, _ in plain} == {"d1", "d3"}
    expanded = index.search(mb.expand_query("heart", ["failure"]))
    assert expanded[0][0] == "d1"
    fused = mb.rrf_fuse([plain, expanded])
    m = mb.ir_metrics(fused, {"d1": 1, "d2": 0})
    assert m["mrr_1000"] == 1.0 and 0.0 <= m["ndcg_10"] <= 1.0


def check_patients():
    line = (
        '{"patient_id": "P1", "outcome": "deceased", "sections": {'
        '"Demographics": [{"name": "age", "value": 71, "unit": "years"}], '
        '"ChartEvents": [{"name": "heart_rate", "value": 88, "unit": "bpm", "timestamp": "08:00"}]}}'
    )
    full = mb.serialize_patients(line, "full")
    hard = mb.serialize_patients(line, "hard")
    assert full[0][0] == "P1" and full[0][1] == 1
    assert "age" in full[0][2] and "age" not in hard[0][2]
    prompt = mb.build_prompt(hard[0][2])
    assert hard[0][2] in prompt and "{patient_data}" not in prompt
    stats = mb.corpus_stats([hard[0][2], full[0][2]])
    total = stats["digit_proportion"] + stats["space_proportion"] + stats["letterpunct_proportion"]
    assert abs(total - 1.0) < 1e-12


if __name__ == "__main__":
    for check in (check_merges, check_metrics, check_toy_lm, check_retrieval, check_patients):
        check()
        print(f"ok {check.__name__}")
    print("smoke test passed")
