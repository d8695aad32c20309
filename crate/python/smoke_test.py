"""Smoke test for the acenas extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml --features extension-module`.
"""

import math
import tempfile
from pathlib import Path

import acenas


def check_metrics():
    assert abs(acenas.dcg([3, 1, 2]) - 9.13093) < 1e-5
    assert abs(acenas.ndcg([3.0, 2.0, 1.0], [3, 1, 2]) - 0.97212) < 1e-5
    lower, upper, mapped = acenas.relevance_map([0, 25, 50, 75, 100], [60, 10, 100])
    assert (lower, upper) == (20.0, 100.0)
    assert mapped == [10.0, 0.0, 20.0]
    assert acenas.kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    lambdas = acenas.lambdarank_lambdas([0.0, 0.0], [1.0, 0.0])
    assert lambdas[0] < 0 < lambdas[1] and math.isclose(sum(lambdas), 0.0, abs_tol=1e-12)


def check_pipeline():
    space = acenas.Space.synthetic(300, seed=1, tau=0.6)
    assert len(space) == 300
    assert space.ws_acc() is not None
    rec = space.record(space.ids()[0])
    assert 0 <= rec["val_acc"] <= 100

    model = acenas.Model(space, seed=1, gcn_hidden=[8, 8], sort_k=6, conv_channels=4, head_hidden=16)
    report = model.pretrain(space, seed=1, epochs=2, sample_size=200)
    assert len(report["r2"]) == 3
    scores = model.score(space)
    assert len(scores) == 300

    result = acenas.search(space, model, seed=2, per_round=10, rounds=2, top_k=5, epochs=3)
    ids = [s[1] for s in result["samples"]]
    assert len(ids) == 25 == len(set(ids))
    assert result["chosen"] in ids

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "model.json"
        model.save(str(path))
        again = acenas.Model.load(str(path))
        assert again.score(space, space.ids()[:5]) == scores[:5]


if __name__ == "__main__":
    check_metrics()
    check_pipeline()
    print("smoke test passed")
