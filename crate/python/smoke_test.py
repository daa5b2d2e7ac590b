#!/usr/bin/env python3
"""Smoke test for the medmark Python bindings.

Build the extension (and optionally the CLI, which unlocks the tagger
check), then run this script from anywhere:

    cargo build -p medmark-py -p medmark-cli
    python3 python/smoke_test.py

The cdylib is copied into a temporary directory under the importable name
`medmark.so`, so no installation step is needed.
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
FIXTURES = REPO / "fixtures" / "synthetic"


def import_medmark(work_dir: Path):
    for profile in ("debug", "release"):
        cdylib = REPO / "target" / profile / "libmedmark.so"
        if cdylib.exists():
            shutil.copy(cdylib, work_dir / "medmark.so")
            sys.path.insert(0, str(work_dir))
            import medmark

            return medmark
    sys.exit("libmedmark.so not found; run `cargo build -p medmark-py` first")


def check_text_pipeline(medmark):
    assert medmark.preprocess("Hello WORLD\n\nsee https://e.co now!") == "hello world see  now!"
    tokens = medmark.tokenize("An itchy rash, spreading fast!")
    assert [t[1] for t in tokens] == ["an", "itchy", "rash", ",", "spreading", "fast", "!"]
    for surface, _, start, end in tokens:
        assert "An itchy rash, spreading fast!"[start:end] == surface
    print("text pipeline ok")


def check_metrics(medmark):
    assert medmark.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert medmark.pr_auc([0.9, 0.1], [1, 0]) == 1.0
    precision, recall = medmark.precision_recall_at([0.9, 0.6, 0.2], [1, 0, 1], 0.5)
    assert (precision, recall) == (0.5, 0.5)
    assert medmark.krippendorff_alpha([[0, 1, 1, None], [0, 1, 1, 0]]) == 1.0
    assert medmark.krippendorff_alpha([[0, 1, 0, 1], [1, 0, 1, 0]]) == -1.0
    print("metrics ok")


def check_tfidf(medmark, work_dir: Path):
    model = medmark.TfidfModel.fit(str(FIXTURES / "train.jsonl"))
    scored = model.highlight("I have a fever and a rash today")
    assert len(scored) == 8 and all(s >= 0.0 for _, s in scored)
    path = work_dir / "tfidf.json"
    model.save(str(path))
    reloaded = medmark.TfidfModel.load(str(path))
    assert repr(reloaded) == repr(model)
    assert reloaded.highlight("I have a fever and a rash today") == scored
    assert 0.0 < medmark.TfidfModel.default_threshold < 1.0
    print(f"tfidf ok: {model!r}")


def check_classifier(medmark):
    classifier = medmark.Classifier.train(
        str(FIXTURES / "train.jsonl"), loss="hinge", epochs=60
    )
    assert classifier.loss == "hinge"
    category = classifier.predict("itchy rash spreading on my arm")
    proba = classifier.predict_proba("itchy rash spreading on my arm")
    assert category in dict(proba)
    assert math.isclose(sum(p for _, p in proba), 1.0, abs_tol=1e-9)
    explanation = classifier.explain("itchy rash on my arm", n_samples=400)
    assert explanation["target_class"] == category
    assert len(explanation["word_weights"]) == 5
    scored = classifier.highlight("itchy rash on my arm", n_samples=400)
    assert all(s >= 0.0 for _, s in scored)
    print(f"classifier ok: predicts {category!r}")


def check_tagger(medmark, work_dir: Path):
    cli = next(
        (REPO / "target" / p / "medmark" for p in ("debug", "release")
         if (REPO / "target" / p / "medmark").exists()),
        None,
    )
    if cli is None:
        print("tagger skipped: build the CLI with `cargo build -p medmark-cli`")
        return
    checkpoint = work_dir / "tagger.json"
    subprocess.run(
        [
            str(cli), "pretrain", "tagger",
            "--data-root", str(FIXTURES),
            "--medical-terms", "medical_terms.txt",
            "--non-medical-terms", "non_medical_terms.txt",
            "--embeddings", "embeddings.txt",
            "--mode", "ngram", "--hidden", "6", "--epochs", "1",
            "--out", str(checkpoint),
        ],
        check=True,
        capture_output=True,
    )
    tagger = medmark.Tagger.load(str(checkpoint), str(FIXTURES / "embeddings.txt"))
    assert tagger.mode == "ngram"
    scored = tagger.highlight("the fever started two days ago")
    assert len(scored) == 6 and all(0.0 <= s <= 1.0 for _, s in scored)
    print(f"tagger ok: {tagger!r}")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        work_dir = Path(tmp)
        medmark = import_medmark(work_dir)
        check_text_pipeline(medmark)
        check_metrics(medmark)
        check_tfidf(medmark, work_dir)
        check_classifier(medmark)
        check_tagger(medmark, work_dir)
    print("smoke test passed")


if __name__ == "__main__":
    main()
