#!/usr/bin/env python3
"""Regenerates the bundled fixture dataset under fixtures/.

Deterministic: a fixed RNG seed and stable iteration order mean the
output files are byte-identical on every run. Each query carries a
unique topic word that appears only in its one relevant document, so a
reranker must match tokens across the query/document boundary to find
the positive. Two traps are closed deliberately:

* every non-positive document carries its own decoy word with the same
  rarity profile as the topics, so "contains any rare word" does not
  separate positives from the rest;
* positives and queries share one filler vocabulary while decoy
  documents use a disjoint one, so BM25 pools (and the negatives
  sampled from them) are rich in other queries' positives. A model can
  then only separate its positive from the sampled negatives by
  matching the topic word itself, not by scoring "looks like a
  positive".

A shared anchor word keeps every document inside every query's BM25
candidate pool at depth 100.
"""

import json
import pathlib
import random

OUT = pathlib.Path(__file__).resolve().parent.parent / "fixtures"
SEED = 20240917

FILLERS_POS = [
    "river", "stone", "amber", "harbor", "meadow", "signal", "copper", "violet",
    "timber", "canyon", "ember", "willow", "falcon", "marble", "cedar", "prairie",
    "anchor", "breeze", "garnet", "hollow",
]
FILLERS_DECOY = [
    "summit", "quarry", "lantern", "mosaic", "thicket", "orchard", "bramble",
    "cobalt", "juniper", "saffron", "tundra", "velvet", "walnut", "yarrow",
    "zephyr", "basalt", "clover", "drift", "fjord", "gully",
]
ANCHOR = "ledger"

CONS = ["br", "cl", "dr", "fl", "gr", "kr", "pl", "sk", "tr", "vl", "zn", "qu", "sp", "st"]
VOW = ["a", "e", "i", "o", "u"]


def topic_words(n):
    words = []
    for c1 in CONS:
        for v1 in VOW:
            for c2 in ["n", "r", "x", "m", "k"]:
                for v2 in ["on", "ar", "is"]:
                    words.append(c1 + v1 + c2 + v2)
    seen = set(FILLERS_POS) | set(FILLERS_DECOY) | {ANCHOR}
    out = []
    for w in words:
        if w not in seen:
            out.append(w)
            seen.add(w)
        if len(out) == n:
            return out
    raise SystemExit("not enough synthetic topic words")


def sentence(rng, n, pool):
    return " ".join(rng.choice(pool) for _ in range(n))


def main():
    rng = random.Random(SEED)
    topics = topic_words(200)
    train_topics = topics[:50]
    held_topics = topics[50:70]
    decoys = topics[70:]

    def make_doc(i, rare, pool, titled):
        words = [rare, rare] + sentence(rng, rng.randint(4, 9), pool).split() + [ANCHOR]
        rng.shuffle(words)
        doc = {"_id": f"d{i:03d}", "text": " ".join(words)}
        if titled:
            doc["title"] = sentence(rng, 2, pool)
        return doc

    docs = []
    # d000..d049: the training positives, one topic word each.
    for i, topic in enumerate(train_topics):
        docs.append(make_doc(i, topic, FILLERS_POS, i % 3 == 0))
    # d050..d069: held-out positives.
    for i, topic in enumerate(held_topics):
        docs.append(make_doc(50 + i, topic, FILLERS_POS, False))
    # d070..d199: distractors, each with its own decoy word.
    for i in range(70, 200):
        docs.append(make_doc(i, decoys[i - 70], FILLERS_DECOY, i % 4 == 0))

    queries = []
    qrels = []
    for i, topic in enumerate(train_topics):
        extra = 2 + (i % 7)  # whitespace lengths 4..10 after topic+anchor
        text = " ".join([topic] + sentence(rng, extra, FILLERS_POS).split() + [ANCHOR])
        queries.append({"_id": f"q{i:02d}", "text": text})
        qrels.append((f"q{i:02d}", f"d{i:03d}", 1))
        if i % 5 == 0:
            # A judged non-relevant document; keeps rel=0 handling honest.
            qrels.append((f"q{i:02d}", f"d{100 + i:03d}", 0))

    held_queries = []
    held_qrels = []
    for i, topic in enumerate(held_topics):
        extra = 1 + (i % 6)
        text = " ".join([topic] + sentence(rng, extra, FILLERS_POS).split() + [ANCHOR])
        held_queries.append({"_id": f"hq{i:02d}", "text": text})
        held_qrels.append((f"hq{i:02d}", f"d{50 + i:03d}", 2))
        held_qrels.append((f"hq{i:02d}", f"d{70 + i:03d}", 1))

    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "corpus.jsonl", "w") as f:
        for d in docs:
            f.write(json.dumps(d, sort_keys=True) + "\n")
    with open(OUT / "queries.jsonl", "w") as f:
        for q in queries:
            f.write(json.dumps(q, sort_keys=True) + "\n")
    with open(OUT / "queries-heldout.jsonl", "w") as f:
        for q in held_queries:
            f.write(json.dumps(q, sort_keys=True) + "\n")
    with open(OUT / "qrels.tsv", "w") as f:
        for qid, did, rel in qrels:
            f.write(f"{qid}\t0\t{did}\t{rel}\n")
    with open(OUT / "qrels-heldout.tsv", "w") as f:
        for qid, did, rel in held_qrels:
            f.write(f"{qid}\t0\t{did}\t{rel}\n")

    # Every document carries the anchor word, so each query's candidate
    # pool is the whole corpus; spot-check the invariant anyway.
    for d in docs:
        assert ANCHOR in d["text"].split(), d
    lengths = {len(q["text"].split()) for q in queries}
    assert len(lengths) >= 5, lengths
    print(f"wrote {len(docs)} docs, {len(queries)}+{len(held_queries)} queries to {OUT}")


if __name__ == "__main__":
    main()
