#!/usr/bin/env python3
"""Smoke test for the mfgp Python module.

Builds nothing itself: it imports the cdylib produced by
    cargo build -p mfgp-py
by copying target/<profile>/libmfgp.so next to a temporary import root.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_mfgp():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libmfgp.so", "libmfgp.dylib", "mfgp.dll")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p mfgp-py")
    root = Path(tempfile.mkdtemp(prefix="mfgp-py-"))
    shutil.copy2(built, root / "mfgp.so")
    sys.path.insert(0, str(root))
    import mfgp

    return mfgp


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"  {name}: {status}{' - ' + detail if detail and not ok else ''}")
    if not ok:
        sys.exit(1)


def main():
    mfgp = import_mfgp()
    print("mfgp module loaded")

    pts = mfgp.sample("lhs", 8, 2, seed=3)
    strata_ok = all(
        sorted(int(row[j] * 8) for row in pts) == list(range(8)) for j in range(2)
    )
    check("lhs sampling", len(pts) == 8 and strata_ok)

    names = mfgp.benchmark_names()
    lo, hi = mfgp.benchmark_bounds("piston")
    mid = [(a + b) / 2 for a, b in zip(lo, hi)]
    check("benchmark eval", "piston" in names and mfgp.benchmark_eval("piston", mid) > 0)

    x = [[i / 19] for i in range(20)]
    y = [math.sin(2 * math.pi * v[0]) for v in x]
    gp = mfgp.Gp.fit(x, y, restarts=5, seed=1)
    mean, var = gp.predict(x)
    err = max(abs(m - t) for m, t in zip(mean, y))
    check("gp interpolation", err < 1e-6, f"residual {err:.2e}")
    gp2 = mfgp.Gp.from_json(gp.to_json())
    mean2, _ = gp2.predict(x)
    check("gp json round trip", mean2 == mean)

    w = [0.6, -0.8]
    grads = []
    inputs, outputs = [], []
    for i in range(30):
        u, v = (i % 6) / 5, (i // 6) / 4
        t = w[0] * u + w[1] * v
        inputs.append([u, v])
        outputs.append(math.sin(t))
        grads.append([math.cos(t) * w[0], math.cos(t) * w[1]])
    evals, evecs = mfgp.active_subspace(grads)
    lead = evecs[0]
    align = abs(lead[0] * w[0] + lead[1] * w[1])
    check("active subspace", evals[0] > 100 * evals[1] and align > 0.999)

    xs, ys, gs = mfgp.benchmark_dataset("paraboloid", 40, kind="lhs", seed=5)
    surr = mfgp.MfSurrogate.train(xs, ys, gradients=gs, rank=2, n_lf_extra=40, seed=2)
    xt, yt, _ = mfgp.benchmark_dataset("paraboloid", 60, kind="lhs", seed=8)
    pm, pv = surr.predict(xt, particles=100, seed=4)
    score = mfgp.r2_score(yt, pm)
    check("multi-fidelity surrogate", score > 0.9, f"r2 {score:.3f}")

    surr2 = mfgp.MfSurrogate.from_json(surr.to_json())
    pm2, _ = surr2.predict(xt, particles=100, seed=4)
    check("surrogate json round trip", pm2 == pm)

    print("smoke test passed")


if __name__ == "__main__":
    main()
