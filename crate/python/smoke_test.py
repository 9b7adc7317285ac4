"""Smoke test for the neoc Python module.

Build and install first:  maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/neoc-*.whl
"""

import math
import os
import tempfile

import neoc


def main():
    with tempfile.TemporaryDirectory() as tmp:
        corpus = os.path.join(tmp, "corpus")
        n = neoc.synth_corpus(corpus, seed=3, classes=["chair", "table", "clock"], images_per_class=30)
        assert n == 90, n

        manifest = neoc.Manifest.read(os.path.join(corpus, "manifest.jsonl"))
        assert len(manifest) == 90
        assert manifest.histogram() == {"chair": 30, "clock": 30, "table": 30}

        train, test, non_computable = neoc.split(manifest, test_ratio=0.2, seed=1)
        assert len(train) + len(test) == 90 and non_computable == []

        model, history = neoc.train(train, corpus, epochs=4, seed=0, test=test)
        assert len(history) == 4
        assert model.class_names == ["chair", "clock", "table"]

        ckpt = os.path.join(tmp, "model.ckpt")
        model.save(ckpt)
        again = neoc.Model.load(ckpt)
        assert again.digest() == model.digest()

        report = neoc.evaluate(again, test, corpus)
        leaf = report["leaf"]
        print("mean class accuracy", round(leaf["mean_class_accuracy"], 3))
        assert 0.0 <= leaf["mean_class_accuracy"] <= 1.0

        first = test.samples()[0]["path"]
        label, p = again.classify(os.path.join(corpus, first))
        assert label in model.class_names and 0.0 < p <= 1.0

        m = neoc.metrics_from_counts(["a", "b"], [[3, 1], [0, 2]])
        assert math.isclose(m["mean_class_accuracy"], (0.75 + 1.0) / 2)
        assert math.isclose(m["overall_accuracy"], 5 / 6)

        tax = neoc.Taxonomy()
        chest = tax.add_class("Chest of drawers")
        sem = tax.add_class("Semainier", chest)
        assert tax.rollup(sem, 0) == chest
        assert tax.ancestors(sem) == [chest]

        assert neoc.iou((0, 0, 10, 10), (5, 0, 10, 10)) == 50 / 150
        assert all(r["passed"] for r in neoc.gradcheck(seeds=2))

        dets = neoc.detect(again, os.path.join(corpus, first), scales=[32])
        assert isinstance(dets, list)

        out = os.path.join(tmp, "split_out")
        code = neoc.run_cli(["--quiet", "split", f"--corpus_root={corpus}", f"--output_dir={out}"])
        assert code == 0 and os.path.exists(os.path.join(out, "train.jsonl"))
        assert neoc.run_cli(["--quiet", "nonsense"]) == 2

    print("python smoke test passed")


if __name__ == "__main__":
    main()
