import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from hbuq import pipeline
from hbuq.cli import main
from hbuq.data import load_record
from hbuq.errors import InvalidConfig, MissingArtifacts, TooFewSegments
from hbuq.pipeline import PipelineConfig, calibrate, cmd_report, format_hyper_table
from hbuq.prediction import read_prediction_csv

REFERENCE_CONFIG = "configs/sdof_reference.json"


def small_config(out, **over):
    with open(REFERENCE_CONFIG) as fh:
        d = json.load(fh)
    d["data"]["generator"]["duration"] = 400.0
    d["segmentation"] = {"segment_seconds": 40.0, "n_segments": 10}
    d["prediction"].update(n_samples=50, duration=10.0)
    d["out"] = str(out)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key].update(value)
        else:
            d[key] = value
    return d


def write_config(tmp_path, name="cfg.json", **over):
    path = tmp_path / name
    path.write_text(json.dumps(small_config(tmp_path / "run", **over)))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cal")
    cfg = write_config(tmp)
    assert main(["calibrate", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_generate_full_record(tmp_path):
    out = tmp_path / "a"
    assert main(["generate", "--config", REFERENCE_CONFIG, "--out", str(out)]) == 0
    record = load_record(out / "record.csv")
    assert record.n == 400_000 and record.dt == 0.005
    truth = json.loads((out / "truth.json").read_text())
    assert len(truth["block_parameters"]) == 40


def test_generate_is_reproducible(tmp_path):
    cfg = write_config(tmp_path)
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a" / "record.csv") == sha(tmp_path / "b" / "record.csv")
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "1"])
    assert sha(tmp_path / "a" / "record.csv") != sha(tmp_path / "c" / "record.csv")


def test_zero_duration_is_invalid(tmp_path):
    d = small_config(tmp_path)
    d["data"]["generator"]["duration"] = 0.0
    with pytest.raises(InvalidConfig):
        PipelineConfig.from_dict(d)
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(d))
    assert main(["generate", "--config", str(cfg)]) == 2


def test_one_segment_is_rejected(tmp_path):
    with pytest.raises(TooFewSegments):
        PipelineConfig.from_dict(small_config(tmp_path, segmentation={"n_segments": 1}))


def test_both_data_sources_rejected(tmp_path):
    d = small_config(tmp_path)
    d["data"]["source"] = "x.csv"
    with pytest.raises(InvalidConfig):
        PipelineConfig.from_dict(d)


def test_calibration_artifacts(calibrated):
    tmp, _ = calibrated
    report = json.loads((tmp / "run" / "report.json").read_text())
    assert report["summary"]["n_converged"] == 10
    assert report["hyper"]["converged"]
    hyper = json.loads((tmp / "run" / "hyper.json").read_text())
    assert hyper["provenance"] == report["provenance"]
    assert abs(hyper["mean"][0] - 1 / (2 * np.pi)) < 0.01
    assert (tmp / "run" / "timing.json").exists()
    assert "timing" not in json.dumps(report)


def test_workers_do_not_change_report(tmp_path):
    d = small_config(tmp_path / "w1")
    a, _, _ = calibrate(PipelineConfig.from_dict(d))
    b, _, _ = calibrate(PipelineConfig.from_dict({**d, "workers": 2}))
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_below_policy_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline, "MIN_CONVERGED_FRACTION", 1.01)
    cfg = write_config(tmp_path)
    assert main(["calibrate", "--config", str(cfg)]) == 1


def test_report_output(calibrated, capsys):
    tmp, _ = calibrated
    assert main(["report", "--out", str(tmp / "run")]) == 0
    text = capsys.readouterr().out
    assert "10/10 converged" in text
    assert "frequency" in text or "mean" in text


def test_report_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifacts):
        cmd_report(tmp_path)
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_predict_missing_hyper(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["predict", "--config", str(cfg), "--hyper", str(tmp_path / "nope.json")]) == 2


def test_predict_refuses_other_config(calibrated, tmp_path):
    tmp, _ = calibrated
    other = write_config(tmp_path, seed=5)
    rc = main(["predict", "--config", str(other), "--hyper", str(tmp / "run" / "hyper.json")])
    assert rc == 2
    assert not (tmp_path / "run" / "prediction_displacement.csv").exists()


def test_predict_outputs(calibrated):
    tmp, cfg = calibrated
    out = tmp / "pred"
    rc = main(["predict", "--config", str(cfg), "--hyper", str(tmp / "run" / "hyper.json"),
               "--out", str(out)])
    assert rc == 0
    for q in ("displacement", "velocity", "acceleration"):
        cols = read_prediction_csv(out / f"prediction_{q}.csv")
        assert cols["mean"].shape == (1, 2000)
        assert np.all(cols["lo"] <= cols["mean"]) and np.all(cols["mean"] <= cols["hi"])
    meta = json.loads((out / "prediction_meta.json").read_text())
    assert set(meta["coverage"]) == {"displacement", "velocity", "acceleration"}
    assert (out / "prediction_truth.csv").exists()


def test_single_sample_zero_width(calibrated, tmp_path):
    tmp, _ = calibrated
    d = json.loads((tmp / "cfg.json").read_text())
    # changing the sample count changes the hash, so reuse the hyper file by recalibrating
    d["prediction"]["n_samples"] = 1
    d["out"] = str(tmp_path / "run")
    cfg = tmp_path / "one.json"
    cfg.write_text(json.dumps(d))
    assert main(["calibrate", "--config", str(cfg)]) == 0
    assert main(["predict", "--config", str(cfg), "--hyper", str(tmp_path / "run" / "hyper.json")]) == 0
    cols = read_prediction_csv(tmp_path / "run" / "prediction_velocity.csv")
    np.testing.assert_array_equal(cols["lo"], cols["hi"])
    np.testing.assert_array_equal(cols["var"], 0.0)


def test_table_identity_correlations():
    text = format_hyper_table({"mean": [1.0, 2.0, 3.0], "cov": np.eye(3).ravel().tolist(),
                               "names": ["a", "b", "c"]})
    rhos = [float(line.split("=")[1]) for line in text.splitlines() if "rho" in line]
    assert rhos == [0.0, 0.0, 0.0]


def test_table_rank_one_plus_diagonal():
    v = np.array([1.0, -2.0, 0.5])
    dg = np.array([0.5, 1.0, 2.0])
    cov = np.outer(v, v) + np.diag(dg)
    text = format_hyper_table({"mean": [0.0] * 3, "cov": cov.ravel().tolist(), "names": ["a", "b", "c"]})
    rhos = [float(line.split("=")[1]) for line in text.splitlines() if "rho" in line]
    expected = [v[p] * v[q] / np.sqrt((v[p] ** 2 + dg[p]) * (v[q] ** 2 + dg[q]))
                for p, q in [(0, 1), (0, 2), (1, 2)]]
    np.testing.assert_allclose(rhos, expected, atol=5e-5)
    stds = [float(line.split()[2]) for line in text.splitlines()[1:4]]
    np.testing.assert_allclose(stds, np.sqrt(v ** 2 + dg), rtol=1e-4)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hbuq", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "calibrate" in res.stdout
