"""Smoke test for the hfwave Python extension.

Build and install it first:

    pip install --no-build-isolation ./crates/python
"""

import math
import tempfile

import hfwave


def main():
    x = hfwave.Tensor([math.sin(0.37 * i) * 40.0 for i in range(8 * 8 * 3)], [8, 8, 3])

    ll, lh, hl, hh = hfwave.haar_forward(x)
    err = hfwave.haar_inverse(ll, lh, hl, hh).max_abs_diff(x)
    energy = sum(b.sum_sq() for b in (ll, lh, hl, hh))
    print(f"haar: reconstruction error {err:.2e}, energy {energy:.6f} vs {x.sum_sq():.6f}")
    assert err < 1e-12 and abs(energy - x.sum_sq()) < 1e-9

    y = hfwave.hfqe_enhance(x, q=hfwave.DEFAULT_Q)
    ll_q = hfwave.haar_forward(y)[0].tolist()
    assert all(abs(v - 15.0 * round(v / 15.0)) < 1e-9 for v in ll_q)
    assert hfwave.haar_forward(y)[1].max_abs_diff(lh) < 1e-9
    print(f"hfqe: LL on the q={hfwave.DEFAULT_Q:g} grid, detail subbands unchanged")

    tokens = hfwave.Tensor([float(i % 5) for i in range(10 * 2)], [10, 2])
    print("top-k rows:", hfwave.top_k(tokens, hfwave.DEFAULT_K_RATIO))

    for target in ("mixing", "encoder", "lp", "oim", "detection"):
        e = hfwave.gradcheck(target, seed=1)
        print(f"gradcheck {target}: {e:.2e}")
        assert e <= 1e-4

    with tempfile.TemporaryDirectory() as out:
        cfg = hfwave.TrainConfig(steps=30, stage1_steps=10)
        result = hfwave.train(cfg, out)
        print(f"train: {cfg!r} -> top1={result['top1']:.3f} mAP={result['mAP']:.3f}")
        assert hfwave.evaluate(result["checkpoint"])[1] >= 0.0

    rows, slopes = hfwave.scaling_study(sizes=[16, 64, 256], reps=20)
    print("scaling slopes:", {k: round(v, 3) for k, v in slopes.items()})
    assert len(rows) == 6

    print("ok")


if __name__ == "__main__":
    main()
