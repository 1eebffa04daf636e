"""Smoke test for the `cirl` Python extension.

Build and run from the repository root:

    cargo build --release -p cirl-py --features extension-module
    cp target/release/libcirl_py.so python/cirl.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cirl  # noqa: E402


def main():
    w = cirl.pooling_weights("weighted_mean", 4)
    assert all(abs(a - b) < 1e-15 for a, b in zip(w, [0.1, 0.2, 0.3, 0.4])), w

    same = [[1.0, 2.0, 3.0]] * 8
    assert abs(cirl.contrastive_loss(same, same, 20.0) - math.log(8)) < 1e-9

    m = cirl.metrics([[0, 1, 2], [2, 1, 0]], [0, 1], ks=[1, 2])
    assert m["recall"] == {"1": 0.5, "2": 1.0}, m

    cfg = cirl.RunConfig(overrides={
        "corpus.candidates": "60",
        "corpus.triplets_per_subset": "4",
        "corpus.val_subsets": "1",
        "corpus.test_subsets": "1",
        "model.d_text": "16",
        "model.heads": "2",
        "model.layers": "1",
        "train.epochs": "2",
        "train.batch": "8",
    })
    assert "train.epochs = 2" in cfg.dump()
    try:
        cfg.set("train.batch", "1")
        raise AssertionError("invalid batch accepted")
    except cirl.CirlError:
        pass

    corpus = cirl.Corpus.generate(cfg)
    assert corpus.num_candidates == 60
    assert len(corpus.subsets) == 10

    model = cirl.Model(cfg)
    log = model.train(corpus, cfg)
    assert len(log) == 2 and all(math.isfinite(e["loss"]) for e in log)

    before = model.decoder_forwards
    q = model.encode_queries(corpus, "test")
    assert len(q) == corpus.num_triplets("test")
    assert model.decoder_forwards - before == len(q)

    report = model.evaluate(corpus, "test")
    assert 0.0 <= report["r_mean"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = cirl.Model.load(path)
        c1 = model.encode_candidates(corpus)
        c2 = again.encode_candidates(corpus)
        assert max(abs(a - b) for r1, r2 in zip(c1, c2) for a, b in zip(r1, r2)) < 1e-5

    print("smoke test ok:", {k: report[k] for k in ("r_mean", "avg_r5_rsub1")})


if __name__ == "__main__":
    main()
