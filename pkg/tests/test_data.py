import numpy as np
import pytest
from hypothesis import given, strategies as st

from hbuq.data import (
    FrequencyLaw,
    GeneratorConfig,
    ShearTwinConfig,
    TimeHistoryRecord,
    generate_gwn,
    load_record,
    save_record,
    split_segments,
    synthesize_prediction_case,
    synthesize_sdof_dataset,
    synthesize_shear_dataset,
)
from hbuq.errors import InsufficientData, InvalidConfig, ParseError, SchemaError
from hbuq.model import SdofSpec, simulate


# -- white noise -------------------------------------------------------------

def test_gwn_zero_power():
    assert not np.any(generate_gwn(0.0, 0.005, 1000, 1))


def test_gwn_deterministic():
    np.testing.assert_array_equal(generate_gwn(0.0013, 0.005, 500, 4), generate_gwn(0.0013, 0.005, 500, 4))


def test_gwn_variance_convention():
    n = 400000
    x = generate_gwn(0.0013, 0.005, n, 2)
    target = 2 * np.pi * 0.0013 / 0.005
    assert target == pytest.approx(1.634, abs=1e-3)
    se = target * np.sqrt(2 / (n - 1))
    assert abs(x.var() - target) < 3 * se


# -- SDOF generator ----------------------------------------------------------

def test_noise_free_constant_frequency_is_single_simulation():
    law = FrequencyLaw(0.2, 0.0, 10.0)
    cfg = GeneratorConfig(duration=60.0, noise_rms_ratio=0.0, frequency_law=law, seed=5)
    rec, truth = synthesize_sdof_dataset(cfg, return_truth=True)
    h = simulate(SdofSpec(0.2, cfg.damping_true), [0.2], None, rec.inputs[0], cfg.dt, rec.n)
    np.testing.assert_allclose(rec.outputs[0], h.displacement[0], rtol=0,
                               atol=1e-12 * np.abs(h.displacement).max())


def test_reference_settings_block_frequencies_and_noise():
    rec, truth = synthesize_sdof_dataset(GeneratorConfig(seed=3), return_truth=True)
    assert rec.n == 400000 and rec.dt == 0.005
    f = truth["block_frequencies"]
    assert f.size == 40
    assert abs(f.mean() - 1 / (2 * np.pi)) < 3 * (1 / (200 * np.pi)) / np.sqrt(40)
    rms = lambda a: np.sqrt(np.mean(a**2))
    assert rms(truth["noise"]) / rms(truth["clean"]) == pytest.approx(0.01, abs=1e-3)
    e = truth["noise"][0]
    assert abs(np.corrcoef(e[:-1], e[1:])[0, 1]) < 0.02


def test_generator_deterministic():
    cfg = GeneratorConfig(duration=100.0, seed=9)
    a, b = synthesize_sdof_dataset(cfg), synthesize_sdof_dataset(cfg)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    c = synthesize_sdof_dataset(GeneratorConfig(duration=100.0, seed=10))
    assert not np.array_equal(a.outputs, c.outputs)


@pytest.mark.parametrize("bad", [dict(duration=0.0), dict(dt=-1.0), dict(noise_rms_ratio=1.0),
                                 dict(spectral_power=-1.0), dict(damping_true=0.0)])
def test_generator_rejects_invalid(bad):
    with pytest.raises(InvalidConfig):
        synthesize_sdof_dataset(GeneratorConfig(**bad))


def test_generator_config_round_trip():
    cfg = GeneratorConfig(seed=4, frequency_law=FrequencyLaw(0.2, 0.01, 20.0))
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


def test_shear_twin(shear_spec):
    cfg = ShearTwinConfig(duration=40.0, seed=2)
    rec, truth = synthesize_shear_dataset(shear_spec, cfg, return_truth=True)
    assert rec.sensor_map == (2,) and rec.quantity == "acceleration"
    assert truth["block_thetas"].shape == (4, 6)
    rms = lambda a: np.sqrt(np.mean(a**2))
    assert rms(truth["noise"]) / rms(truth["clean"]) == pytest.approx(0.01, rel=1e-9)


def test_prediction_case_is_fresh_and_deterministic(sdof_spec):
    cfg = GeneratorConfig()
    u1, h1, th1 = synthesize_prediction_case(cfg, sdof_spec, 50.0, 0)
    u2, h2, th2 = synthesize_prediction_case(cfg, sdof_spec, 50.0, 0)
    np.testing.assert_array_equal(h1.displacement, h2.displacement)
    assert u1.size == 10000 and th1.size == 1
    rec = synthesize_sdof_dataset(GeneratorConfig(duration=50.0, seed=0))
    assert not np.allclose(u1, rec.inputs[0])


# -- segmentation ------------------------------------------------------------

def _record(n, ni=1, no=1, dt=0.005, seed=0):
    rng = np.random.default_rng(seed)
    return TimeHistoryRecord(dt, rng.standard_normal((ni, n)), rng.standard_normal((no, n)))


def test_reference_segmentation():
    segs = split_segments(_record(400000), 10000, 40)
    assert len(segs) == 40 and all(s.n == 10000 for s in segs)


def test_whole_record_single_segment():
    rec = _record(1234)
    seg = split_segments(rec, 1234, 1)[0]
    np.testing.assert_array_equal(seg.outputs, rec.outputs)


@given(st.integers(1, 50), st.integers(1, 10), st.integers(0, 30))
def test_segments_partition_prefix(length, count, extra):
    rec = _record(length * count + extra, ni=2, no=2)
    segs = split_segments(rec, length, count)
    assert segs.offsets == tuple(i * length for i in range(count))
    np.testing.assert_array_equal(np.concatenate([s.outputs for s in segs], axis=1),
                                  rec.outputs[:, : length * count])
    np.testing.assert_array_equal(np.concatenate([s.inputs for s in segs], axis=1),
                                  rec.inputs[:, : length * count])


def test_insufficient_data():
    with pytest.raises(InsufficientData):
        split_segments(_record(100), 30, 4)


# -- CSV ---------------------------------------------------------------------

@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 40), st.sampled_from(["displacement", "velocity", "acceleration"]))
def test_csv_round_trip(tmp_path_factory, ni, no, n, quantity):
    rng = np.random.default_rng(n)
    rec = TimeHistoryRecord(0.005, rng.standard_normal((ni, n)) * 1e-7,
                            rng.standard_normal((no, n)) * 1e5, None, quantity)
    path = tmp_path_factory.mktemp("csv") / "r.csv"
    save_record(rec, path)
    back = load_record(path)
    assert back.dt == rec.dt and back.quantity == quantity
    np.testing.assert_array_equal(back.inputs, rec.inputs)
    np.testing.assert_array_equal(back.outputs, rec.outputs)


def test_csv_sensor_map_round_trip(tmp_path):
    rec = TimeHistoryRecord(0.01, np.zeros((1, 3)), np.ones((1, 3)), (2,), "acceleration")
    save_record(rec, tmp_path / "r.csv")
    assert load_record(tmp_path / "r.csv").sensor_map == (2,)


def test_csv_three_inputs_one_output(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("# dt=0.01\n# channels=u:3,y:1,quantity=acc\nt,u1,u2,u3,y1\n0,1,2,3,4\n0.01,5,6,7,8\n")
    rec = load_record(p)
    assert (rec.n_inputs, rec.n_outputs, rec.n) == (3, 1, 2)
    assert rec.quantity == "acceleration"


def test_csv_missing_dt(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("# channels=u:1,y:1,quantity=disp\nt,u1,y1\n0,1,2\n")
    with pytest.raises(SchemaError) as err:
        load_record(p)
    assert "dt" in err.value.missing


def test_csv_missing_column(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("# dt=0.1\n# channels=u:1,y:2,quantity=disp\nt,u1,y1\n0,1,2\n")
    with pytest.raises(SchemaError) as err:
        load_record(p)
    assert err.value.missing == ("y2",)


def test_csv_parse_error_location(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("# dt=0.1\n# channels=u:1,y:1,quantity=disp\nt,u1,y1\n0,1,2\n0.1,abc,3\n")
    with pytest.raises(ParseError) as err:
        load_record(p)
    assert (err.value.line, err.value.column) == (5, 2)
