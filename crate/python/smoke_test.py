"""Smoke test for the pyderail extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/pyderail-*.whl
"""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

import pyderail

ROOT = Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "crates/core/tests/fixtures/worked_examples.conllu"

HOSTILE = ["Why is there no source for this ?", "You removed my edit again", "Your claim is wrong"]
POLITE = ["Thanks for the help with the page", "Hello , I think this could use a source", "Please add a citation"]


def conllu(comment_id, text):
    tokens = text.split()
    lines = [f"# comment_id = {comment_id}", f"# text = {text}"]
    for i, tok in enumerate(tokens, 1):
        head, rel = (0, "root") if i == 1 else (1, "dep")
        lines.append(f"{i}\t{tok}\t{tok.lower()}\tX\t_\t_\t{head}\t{rel}\t_\t_")
    return "\n".join(lines) + "\n\n"


def synthetic_corpus(tmp):
    rng = random.Random(0)
    convs, parses = [], []
    for page in range(12):
        for label in ("awry", "ontrack"):
            cid = f"p{page}-{label}"
            pool = HOSTILE if label == "awry" else POLITE
            comments = []
            for i in range(4):
                text = rng.choice(pool if i < 2 else HOSTILE + POLITE)
                comments.append({
                    "id": f"{cid}-c{i}",
                    "author_id": f"{cid}-u{i % 2}",
                    "author_edit_count": rng.randint(0, 500),
                    "timestamp": 1_500_000_000 + page * 10_000 + i * 60 + (0 if label == "awry" else 5),
                    "text": text,
                    "toxicity": 0.9 if (label == "awry" and i == 3) else 0.1,
                })
                parses.append(conllu(comments[-1]["id"], text))
            conv = {"id": cid, "page_id": f"page-{page}", "label": label, "comments": comments}
            if label == "awry":
                conv["attack_index"] = 3
            convs.append(conv)
    labeled = tmp / "labeled.jsonl"
    labeled.write_text("".join(json.dumps(c) + "\n" for c in convs))
    parsed = tmp / "labeled.conllu"
    parsed.write_text("".join(parses))
    return labeled, parsed


def main():
    assert abs(pyderail.log_odds_ratio(3, 10, 7, 10) + pyderail.log_odds_ratio(7, 10, 3, 10)) < 1e-12
    p = pyderail.binomial_test(7, 10, 0.5)
    assert abs(p - 0.34375) < 1e-12, p
    assert abs(pyderail.fisher_exact(3, 4, 1, 4) - 0.4857142857142857) < 1e-12

    text = FIXTURE.read_text()
    parsed = pyderail.parse_conllu_text(text)
    assert any(c["comment_id"] == "gratitude" for c in parsed)
    reg = pyderail.Registry.default()
    assert len(reg) == 19
    counts = reg.extract(text)
    assert counts["gratitude"]["gratitude"] == 1
    assert counts["please_start"]["please_start"] == 1
    assert pyderail.Registry.from_json(reg.to_json()).names() == reg.names()

    rows = [[x, 1.0] for x in (-2.0, -1.0, -0.5, 0.5, 1.0, 2.0)]
    labels = [False, False, True, False, True, True]
    model = pyderail.fit_logistic(rows, labels, l2=0.1)
    probs = model.predict_proba(rows)
    assert model.converged and model.weights[0] > 0 and model.weights[1] == 0.0
    assert all(0.0 < q < 1.0 for q in probs) and probs[0] < probs[-1]
    assert all(math.isfinite(d) for d in model.decision(rows))

    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        labeled, parses = synthetic_corpus(tmp)
        paired = pyderail.PairedDataset.from_labeled(str(labeled))
        assert len(paired) == 12
        summary = paired.summary()
        assert summary["pages"] == 12 and summary["max_pairs_per_page"] == 1
        assert len(pyderail.PairedDataset.from_json(paired.to_json())) == 12
        assert len(paired.horizon()) == 0
        report = pyderail.lopo_cv(paired, str(parses), features="politeness", l2_grid=[1.0])
        assert report["pairs"] == 12 and len(report["folds"]) == 12
        assert report["accuracy"] > 0.8, report["accuracy"]

        cfg = tmp / "derail.toml"
        cfg.write_text(f'output_dir = "out"\n[corpus]\nlabeled = "{labeled.name}"\n')
        assert pyderail.run_cli(["--config", str(cfg), "ingest"]) == 0
        assert pyderail.run_cli(["--config", str(cfg), "match"]) == 0
        assert (tmp / "out" / "pairs.json").exists()
        assert pyderail.run_cli(["--config", str(cfg), "predict"]) == 4

    print("pyderail smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
