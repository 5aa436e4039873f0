"""Smoke test for the proxmed Python extension.

Build and install first:  pip install --no-build-isolation ./crates/python
"""
import math

import proxmed


def main():
    data = proxmed.simulate(1000, seed=4)
    assert len(data["y"]) == 1000 and len(data["x"][0]) == 2

    truth = proxmed.true_piie()
    assert math.isfinite(truth)

    reports = proxmed.estimate(
        data["y"], data["a"], data["m"], data["x"], data["w"], data["z"],
        estimators=["P-MR", "P-OR"], boot=50, seed=1,
    )
    assert [r["method"] for r in reports] == ["P-MR", "P-OR"]
    for r in reports:
        lo, hi = r["ci"]
        assert lo <= hi and math.isfinite(r["piie"])
        print(f"{r['method']:8s} piie={r['piie']:+.4f}  ci=({lo:+.4f}, {hi:+.4f})")

    wald = proxmed.estimate(
        data["y"], data["a"], data["m"], data["x"], data["w"], data["z"], boot=0,
    )
    assert wald[0]["n_boot"] == 0 and wald[0]["se"] > 0

    try:
        proxmed.estimate(data["y"], data["a"], data["m"], data["x"], data["w"], data["z"], estimators=["P-XYZ"])
    except ValueError as e:
        print("rejected unknown estimator:", e)
    else:
        raise AssertionError("unknown estimator accepted")

    print(f"true PIIE {truth:+.4f}; smoke test ok (proxmed {proxmed.__version__})")


if __name__ == "__main__":
    main()
