"""Smoke test for the Python extension.

Build first with either
    maturin develop --release
or
    cargo build --release -p profit-py --features extension-module
in which case the shared library is picked up from target/.
"""

import importlib.util
import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import profit  # noqa: F401

        return profit
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libprofit.so"
        if lib.exists():
            dest = Path(tempfile.mkdtemp()) / "profit.so"
            shutil.copy(lib, dest)
            spec = importlib.util.spec_from_file_location("profit", dest)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("profit extension not found; build it first")


def main():
    profit = load()

    ds = profit.simulate(n=60, m_min=4, m_max=6, delta=0.0, seed=1, r=41)
    assert ds.n_subjects == 60
    assert len(ds.grid) == 41
    print(ds)

    report = profit.run_test(ds, alpha=0.05, nsim=2000, seed=7)
    again = profit.run_test(ds, alpha=0.05, nsim=2000, seed=7)
    assert report.to_json() == again.to_json()
    assert report.k == len(report.p_values) >= 1
    assert all(0.0 <= p <= 1.0 for p in report.p_values)
    assert report.exit_code() in (0, 3)
    parsed = json.loads(report.to_json())
    assert parsed["schema"] == profit.REPORT_SCHEMA
    print(report)

    trend = profit.simulate(n=60, m_min=4, m_max=6, delta=6.0, seed=2, r=41)
    strong = profit.run_test(trend, nsim=2000, seed=1, method="zc-mc")
    assert strong.reject and strong.decision == "reject"
    competitor = json.loads(strong.competitor)
    assert competitor["method"] == "ZC-MC"
    assert competitor["basis"]["hash"] == json.loads(strong.to_json())["basis"]["hash"]

    draws = profit.null_dist([1.0], [1.0], p=0, nsim=20000, seed=2)
    zero = sum(d <= 0.0 for d in draws) / len(draws)
    assert abs(zero - 0.6827) < 0.015, zero

    values, functions = profit.basis(ds)
    assert len(values) == len(functions) and len(functions[0]) == 41

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.csv"
        ds.save_csv(str(path))
        back = profit.Dataset.from_csv(str(path))
        assert back.n_subjects == ds.n_subjects
        try:
            profit.Dataset.from_csv(str(Path(tmp) / "missing.csv"))
        except OSError as e:
            assert "cannot read" in str(e)
        else:
            raise AssertionError("missing file accepted")

    try:
        profit.run_test(ds, alpha=1.5)
    except ValueError as e:
        assert "alpha" in str(e)
    else:
        raise AssertionError("invalid alpha accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
