import json

import numpy as np
import pytest

from cacgan import experiments as ex
from cacgan.phantom import LesionSpec, PhantomSpec, generate_pair, save_phantom
from cacgan.volume import Volume, write_volume


def test_cache_trains_once(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.CACHE_ENV, str(tmp_path))
    calls = []

    def train(path):
        calls.append(path)
        path.mkdir(parents=True)
        (path / "manifest.json").write_text("{}")

    a = ex._cached("toy", ex.DESK_GAN, (1, 2), train)
    b = ex._cached("toy", ex.DESK_GAN, (1, 2), train)
    c = ex._cached("toy", ex.DESK_GAN, (1, 3), train)
    assert a == b != c and len(calls) == 2 and a.parent == tmp_path


def test_benchmark_spec_deterministic_and_rca_biased():
    bc = ex.BenchmarkConfig(n_pairs=40, rca_fraction=1.0)
    s1, s2 = ex.benchmark_spec(bc, 3), ex.benchmark_spec(bc, 3)
    assert s1 == s2 and s1.motion_jitter == bc.motion_jitter
    assert all(l.artery == "RCA" for i in range(5) for l in ex.benchmark_spec(bc, i).lesions)


def test_lesion_detection_with_perfect_and_empty_maps(tmp_path):
    spec = PhantomSpec(lesions=[LesionSpec("RCA", 0.5, 2.5, 160.0), LesionSpec("LAD", 0.4, 2.5, 600.0)],
                       motion_sigma_mm={"LAD": 0.3, "RCA": 2.5, "LCX": 0.5}, seed=1)
    data, run = tmp_path / "data", tmp_path / "run"
    run.mkdir()
    for k, (v, t) in enumerate(generate_pair(spec), start=1):
        save_phantom(data, f"s_scan{k}", v, t)
        write_volume(run / f"s_scan{k}_roi.vol", Volume(t.heart_mask.data.astype(np.int16), v.spacing))
        write_volume(run / f"s_scan{k}_map.vol", Volume(t.cac_map.astype(np.float32), v.spacing), dtype="float32")
    rows, spurious = ex.lesion_detection(data, run, "s", "scan1")
    assert [r["artery"] for r in rows] == ["RCA", "LAD"]
    assert all(r["proposed"] for r in rows) and spurious["proposed"] == 0
    assert rows[1]["baseline"] and rows[0]["below"] > rows[0]["voxels"] / 2
    c = ex.subthreshold_pair_detection(data, run, ["s"])
    assert c["pairs"] == 1 and c["lesion_pairs"] == 1 and c["proposed"] == 1 and c["proposed"] >= c["baseline"]
    for k in (1, 2):
        write_volume(run / f"s_scan{k}_map.vol", Volume(np.zeros(spec.dims, np.float32), spec.spacing), dtype="float32")
    assert ex.subthreshold_pair_detection(data, run, ["s"])["proposed"] == 0


def test_write_benchmark(tmp_path):
    scans, truth = ex.write_benchmark(tmp_path, ex.BenchmarkConfig(n_pairs=2))
    assert len(scans) == 4 and set(truth) == {s.key for s in scans}
    assert json.loads((tmp_path / "truth.json").read_text()) == truth
    assert all(v["positive"] for v in truth.values())


@pytest.mark.slow
def test_desk_pipeline_scores_calcium_free_scans_zero(tmp_path):
    # pairs unrelated to the training and benchmark seeds
    bc = ex.BenchmarkConfig(n_pairs=4, seed0=9000, n_lesions=(0, 0))
    _, man, rep = ex.run_benchmark(tmp_path, bc)
    recs = man.records()
    assert len(recs) == 8 and not man.errors
    assert all(r.pseudo_mass == 0 and r.adjusted_agatston == 0 for r in recs.values())
    assert rep["detection"]["proposed"]["fp"] == 0
