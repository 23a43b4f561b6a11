"""Smoke test for the compiled extension.

Build and run from the repository root:

    cargo build --release -p rlt4rec-py --features extension-module
    cp target/release/librlt4rec_py.so crates/py/python/rlt4rec_py.so
    python3 crates/py/python/smoke_test.py

or install with ``maturin develop`` inside ``crates/py`` and run the script.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import rlt4rec_py as rl  # noqa: E402


def main():
    gm = json.loads(rl.group_model_json("pd1"))
    assert gm["n_groups"] == 4 and gm["n_items"] == 100

    post = rl.posterior("pd1", [(3, 5.0)])
    assert post[0] > 0.999999 and abs(sum(post) - 1.0) < 1e-12
    assert rl.posterior("pd2", []) == [0.2] * 5

    seqs, groups = rl.generate("pd1", 3, 10, seed=1)
    assert len(seqs) == 12 and groups == [0] * 3 + [1] * 3 + [2] * 3 + [3] * 3
    assert all(len({v for v, _ in s}) == 10 for s in seqs)

    model = rl.Model.init(json.dumps({"d": 16, "max_timesteps": 10}))
    dist = model.next_item_dist(seqs[0][:4], target=5.0)
    assert len(dist) == model.n_items == 100
    assert math.isclose(sum(dist), 1.0, abs_tol=1e-5)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = rl.Model.load(path)
        assert again.next_item_dist(seqs[0][:4]) == dist
        assert json.loads(again.hyperparams())["d"] == 16

    curve = rl.evaluate("best_star", "pd1", users_per_group=20, horizon=25)
    assert len(curve) == 25 and abs(curve[-1][1] - 5.0) < 0.05
    model_curve = rl.evaluate("rlt4rec", "pd1", users_per_group=2, horizon=5, model=model)
    assert len(model_curve) == 5

    for bad in (lambda: rl.evaluate("oracle", "pd1"), lambda: rl.posterior("pd1", [(100, 1.0)])):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")
    try:
        rl.Model.load("/nonexistent.ckpt")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
