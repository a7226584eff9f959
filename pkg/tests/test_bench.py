import importlib.util
from pathlib import Path

import pytest

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


@pytest.fixture(scope="module")
def bench():
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_workloads_run_on_both_backends(bench):
    for backend in bench.BACKENDS.values():
        bench.sumtree_workload(backend, capacity=64, ops=96)()
        bench.gaze_workload(backend, n=3)()


def test_main_reports_every_pair(bench, tmp_path, monkeypatch):
    small_tree, small_gaze = bench.sumtree_workload, bench.gaze_workload
    monkeypatch.setattr(bench, "sumtree_workload", lambda b: small_tree(b, capacity=64, ops=96))
    monkeypatch.setattr(bench, "gaze_workload", lambda b: small_gaze(b, n=2))
    out = bench.main(["--repeat", "1", "--json", str(tmp_path / "r.json")])
    assert set(out) == {f"{w}/{b}" for w in ("sumtree", "gaze_target") for b in ("cython", "python")}
    assert (tmp_path / "r.json").exists()
