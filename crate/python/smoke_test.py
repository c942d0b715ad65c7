#!/usr/bin/env python3
"""Smoke test for the kgpath_py extension module.

Build the module first, then run this script from anywhere:

    cargo build -p kgpath-py
    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import sys
import tempfile
from pathlib import Path


def load_extension():
    root = Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / "release" / "libkgpath_py.so",
        root / "target" / "debug" / "libkgpath_py.so",
    ]
    for so in candidates:
        if so.exists():
            loader = importlib.machinery.ExtensionFileLoader("kgpath_py", str(so))
            spec = importlib.util.spec_from_loader("kgpath_py", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("libkgpath_py.so not found; run `cargo build -p kgpath-py` first")


def main():
    kg = load_extension()

    # corpus generation and template split
    corpus = kg.generate_corpus(0)
    assert len(corpus) == 50, len(corpus)
    train_qs, test_qs = kg.split_by_template(corpus)
    assert len(train_qs) == 35 and len(test_qs) == 15
    q0 = train_qs[0]
    assert q0.question_id and q0.text and q0.triples
    assert not q0.is_held_out() and test_qs[0].is_held_out()

    # hand-built question and line-graph shape
    q = kg.Question(
        "manual",
        "what is the subject directed by born in",
        ["m.0film01"],
        ["m.0city01"],
        [
            ("m.0film01", "directed_by", "m.0dir001"),
            ("m.0dir001", "born_in", "m.0city01"),
            ("m.0film01", "starring", "m.0act001"),
        ],
    )
    edges = kg.line_graph_edges(q)
    assert (0, 1) in edges and (2, 1) not in edges, edges
    assert q.shortest_distance("m.0film01", "m.0city01") == 2

    # labeling: the rational label for the manual question is its gold chain
    labels = kg.label_questions([q])
    assert labels == [("manual", [[0, 1]])], labels
    targets = kg.relation_targets([q])
    assert targets == [("manual", ["directed_by", "born_in"])], targets

    # a tiny training run on a slice of the corpus must drive the loss down
    # and recover the labeled path greedily
    slice_qs = train_qs[:6]
    slice_labels = kg.label_questions(slice_qs)
    slice_targets = kg.relation_targets(slice_qs)
    model, trace = kg.train(
        slice_qs,
        slice_labels,
        slice_targets,
        dim=16,
        epochs=60,
        hidden=32,
        batch_size=3,
        seed=1,
    )
    assert len(trace) == 60 and trace[-1] < trace[0], (trace[0], trace[-1])
    recovered = 0
    by_id = dict(slice_labels)
    for sq in slice_qs:
        if kg.greedy_decode(model, sq) in by_id[sq.question_id]:
            recovered += 1
    assert recovered >= 5, f"greedy recovery {recovered}/6"

    # checkpoint round-trip
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.json"
        model.save(path)
        reloaded = kg.Model.load(path)
        assert reloaded.d_text == model.d_text and reloaded.hidden == model.hidden

    # retrieval is deterministic per seed and bounded by M
    r1 = kg.retrieve(model, slice_qs, k=8, m=10, seed=3)
    r2 = kg.retrieve(model, slice_qs, k=8, m=10, seed=3)
    assert [r.paths for r in r1] == [r.paths for r in r2]
    assert all(len(r.paths) <= 10 for r in r1)
    baseline = kg.retrieve(model, slice_qs, k=8, m=10, seed=3, random_baseline=True)
    assert len(baseline) == len(slice_qs)

    # evaluation report shape
    report = kg.evaluate(slice_qs, r1)
    assert report["count"] == 6.0
    assert 0.0 <= report["hit"] <= 1.0 and 0.0 <= report["macro_f1"] <= 1.0
    assert report["mean_retrieved_triples"] > 0.0

    print("smoke test passed")
    print(f"  trained {len(slice_qs)} questions, loss {trace[0]:.3f} -> {trace[-1]:.4f}")
    print(f"  greedy recovery {recovered}/6, eval hit {report['hit']:.3f}")


if __name__ == "__main__":
    main()
