"""Smoke test for the tinyunet Python extension.

Build it first, either with `maturin develop -m crates/python/Cargo.toml` or
with `cargo build --release -p tinyunet-py --features extension-module` and
`--lib-dir target/release`.
"""

import argparse
import math
import os
import random
import shutil
import sys
import tempfile


def import_module(lib_dir):
    if lib_dir:
        # cargo names the library libtinyunet_py.so; Python wants tinyunet.so
        stage = tempfile.mkdtemp(prefix="tinyunet-py-")
        for name in ("libtinyunet_py.so", "libtinyunet_py.dylib", "tinyunet_py.dll"):
            src = os.path.join(lib_dir, name)
            if os.path.exists(src):
                ext = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(src, os.path.join(stage, "tinyunet" + ext))
                break
        else:
            sys.exit(f"no tinyunet_py library in {lib_dir}")
        sys.path.insert(0, stage)
    import tinyunet

    return tinyunet


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lib-dir", help="cargo target dir holding libtinyunet_py")
    args = ap.parse_args()
    tu = import_module(args.lib_dir)

    assert tu.count_params() == 108976
    assert tu.count_params(levels=3, filters=1) == 451
    assert tu.count_params(convs=1) == 49072
    assert tu.count_params(variant="side_output") == 109072

    assert tu.auc([0.9, 0.1], [True, False]) == 1.0
    assert tu.auc([0.5] * 4, [True, False, True, False]) == 0.5
    m = tu.metrics_at([0.9, 0.8, 0.3, 0.7, 0.2, 0.1], [True, True, True, False, False, False], 0.5)
    for k in ("specificity", "sensitivity", "f1", "accuracy"):
        assert abs(m[k] - 2 / 3) < 1e-12, (k, m[k])
    t = tu.select_threshold([0.9, 0.8, 0.3, 0.7, 0.2, 0.1], [True, True, True, False, False, False])
    assert 0.0 <= t <= 1.0

    w, h = 12, 9
    mask = [True] * (w * h)
    eroded = tu.erode_fov(mask, w, h, 2.0)
    assert sum(eroded) < sum(mask) and all(m or not e for m, e in zip(mask, eroded))
    label = [y == 4 and 2 <= x < 10 for y in range(h) for x in range(w)]
    wm = tu.weight_map(label, w, h)
    assert all(v == 1.0 for v, l in zip(wm, label) if not l)
    assert all(abs(v - 1 / 0.18) < 1e-4 for v, l in zip(wm, label) if l)

    net = tu.UNet(levels=2, filters=4, seed=3)
    assert net.num_params == tu.count_params(levels=2, filters=4)
    rng = random.Random(0)
    img = [rng.uniform(-1, 1) for _ in range(30 * 22)]
    p = net.predict(img, 30, 22)
    assert len(p) == 30 * 22 and all(0.0 <= v <= 1.0 and math.isfinite(v) for v in p)

    with tempfile.TemporaryDirectory() as d:
        ck = os.path.join(d, "net.tuck")
        net.save(ck)
        again = tu.UNet.load(ck)
        assert again.predict(img, 30, 22) == p

        data = os.path.join(d, "synthetic")
        tu.synth(data, count=8, test=2, size=48, seed=5)
        res = tu.train(
            "levels-1", data, os.path.join(d, "runs"), seed=1,
            patch=16, batch_size=4, batches_per_epoch=2, max_epochs=2, lr0=0.005,
        )
        assert res is not None and 0.0 <= res["auc"] <= 1.0, res
        assert os.path.exists(os.path.join(d, "runs", "levels-1", "seed-1", "metrics.csv"))

    print("tinyunet python smoke test: ok", repr(net))


if __name__ == "__main__":
    main()
