"""Writes a self-contained demo workspace for rubric-refine.

The corpus is synthetic: each essay's word count encodes its human score
(ten words per point). The scripted model fixture scores by length, adds
noise for any rubric except the one its "refiner" proposes, and so lets a
full refine/evaluate/report cycle run offline.

    python3 tools/make_demo.py demo
    build/rubric-refine refine --config demo/config.json
"""

import argparse
import json
from pathlib import Path

WORDS_PER_POINT = 10
IMPROVED = "Count the words in the response. Award one point for every ten words, from 1 to 6."


def essay_text(score, variant):
    words = score * WORDS_PER_POINT + WORDS_PER_POINT // 2
    return " ".join(f"w{(variant * 31 + w) % 97}" for w in range(words))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path, help="directory to create")
    parser.add_argument("--essays", type=int, default=300)
    parser.add_argument("--noise", type=int, default=2, help="score noise for unimproved rubrics")
    args = parser.parse_args()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rows = ["essay_id\tessay_set\tessay\trater1_domain1\trater2_domain1\tdomain1_score"]
    for i in range(args.essays):
        score = 1 + (i * 7 + i // 3) % 6
        rows.append(f"{i + 1}\t1\t{essay_text(score, i)}\t{score}\t{score}\t{score}")
    (out / "corpus.tsv").write_text("\n".join(rows) + "\n")
    (out / "prompt1.txt").write_text(
        "Write a letter to your local newspaper stating your opinion on the effects computers have on people."
    )

    exact = {"words_per_point": WORDS_PER_POINT, "offset": 0, "noise": 0, "min": 1, "max": 6}
    fixture = {
        "seed": 5,
        "routes": [
            {"match": {"purpose": "refinement"}, "replies": [f"Revised rubric:\n```\n{IMPROVED}\n```"]},
            {"match": {"rubric_contains": "Count the words"}, "score_rule": exact},
            {"score_rule": dict(exact, noise=args.noise)},
        ],
    }
    (out / "fixture.json").write_text(json.dumps(fixture, indent=2) + "\n")

    config = {
        "task": {
            "corpus": "corpus.tsv",
            "format": "asap_tsv",
            "scale": {"min": 1, "max": 6},
            "load": {"prompt_ids": ["1"]},
            "prompt_files": {"1": "prompt1.txt"},
        },
        "split": {"n_train": 100, "n_val": 100, "test": {"kind": "count", "value": 50}, "seed": 0},
        "refinement": {
            "iterations": 10,
            "batch_size": 10,
            "trials": 3,
            "rng_seed": 0,
            "eval_repeats": 3,
            "scorer": {"backend": "scripted", "fixture_path": "fixture.json", "audit_dir": "run/audit"},
        },
        "run_dir": "run",
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"demo workspace written to {out}")


if __name__ == "__main__":
    main()
