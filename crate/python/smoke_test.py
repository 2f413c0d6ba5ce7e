"""Smoke test for the ripple_py extension.

Build and copy the module next to this file first:

    cargo build --release -p ripple-py
    cp target/release/libripple_py.so python/ripple_py.so
    python3 python/smoke_test.py
"""

import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ripple_py as rp


def rand_matrix(rng, rows, cols):
    return [[rng.uniform(-1.0, 1.0) for _ in range(cols)] for _ in range(rows)]


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    spec = rp.PatternSpec.ripple(4, 3)
    assert spec.row_columns(0, 12) == [0, 1, 2, 5, 8, 11]
    assert str(spec) == "ripple:4:3"
    mask = rp.build_mask(spec, 12)
    assert sum(map(sum, mask)) == rp.nnz(spec, 12) == 78
    assert [str(s) for s in rp.layer_schedule(4, rp.PatternSpec("ripple:12:24"))] == [
        "band:12", "band:12", "ripple:12:24", "ripple:12:24"]
    try:
        rp.PatternSpec.band(5)
    except ValueError:
        pass
    else:
        raise AssertionError("odd window accepted")

    rng = random.Random(0)
    attn = rp.Attention(heads=2, d_model=8, seed=1)
    x = rand_matrix(rng, 20, 8)
    dense = attn.dense(x, x, x, spec)
    sparse = attn.sparse(x, x, x, spec)
    assert max_abs_diff(dense, sparse) < 1e-9

    assert abs(rp.irm_value(3 + 0j, 4 + 0j) - 0.6) < 1e-15
    assert rp.psm_value(1 + 0j, -1 + 0j) == 0.0
    clean = [0.3 * math.sin(0.05 * n) for n in range(4000)]
    noise = [rng.gauss(0.0, 1.0) for _ in range(4000)]
    target = rp.mask_target(clean, noise, 0.0, "psm", bins=129)
    assert len(target[0]) == 129 and all(0.0 <= v <= 1.0 for row in target for v in row)

    model = rp.Model(pattern="ripple:2:2", blocks=2, heads=2, d_model=8, d_ff=16, bins=5, seed=3)
    mag = [[abs(v) for v in row] for row in rand_matrix(rng, 7, 5)]
    out = model.forward(mag)
    assert len(out) == 7 and all(0.0 < v < 1.0 for row in out for v in row)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = rp.Model.load(path)
        assert again.forward(mag) == out
        assert again.config()["pattern"] == "ripple:2:2"
        with open(path, "r+b") as f:
            f.seek(0)
            f.write(b"XXXX")
        try:
            rp.Model.load(path)
        except ValueError:
            pass
        else:
            raise AssertionError("corrupt checkpoint accepted")

    assert abs(rp.lr_at(256, 40000, 40000) - 3.125e-4) < 1e-18
    report = rp.macs("full", 1000)
    assert report["macs_scores"] // 4 == 256_000_000
    assert rp.macs("ripple:12:24", 2000)["macs_total"] < rp.macs("sepformer:50", 2000)["macs_total"]
    print("ok")


if __name__ == "__main__":
    main()
