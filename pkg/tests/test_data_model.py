import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncov.data_model import (
    Dataset,
    LayoutConfig,
    ModalityLayout,
    ObservationRecord,
    build_design,
    ingest_csv,
    load_layout_config,
    save_layout_config,
    validate,
    write_csv,
)
from asyncov.errors import ConfigError, DataError

from conftest import make_dataset

LAYOUT_34 = {"modalities": {"plasma": ["a1", "a2", "a3"], "pet": ["t1", "t2", "t3", "t4"]},
             "covariates": ["age"]}


def _write(tmp_path, text):
    path = tmp_path / "d.csv"
    path.write_text(text, encoding="utf-8")
    return path


HEADER = "subject_id,visit,time,age,a1,a2,a3,t1,t2,t3,t4\n"


def test_full_row_gives_full_mask(tmp_path):
    cfg = LayoutConfig.from_dict(LAYOUT_34)
    ds = ingest_csv(_write(tmp_path, HEADER + "s1,1,0,70,1,2,3,4,5,6,7\n"), cfg)
    rec = ds.records[0]
    assert rec.mask == (0, 1)
    assert rec.y_obs.size == 7


def test_second_modality_only(tmp_path):
    cfg = LayoutConfig.from_dict(LAYOUT_34)
    ds = ingest_csv(_write(tmp_path, HEADER + "s1,2,1,70,,,,4,5,6,7\n"), cfg)
    rec = ds.records[0]
    assert rec.mask == (1,)
    assert rec.y_obs.size == 4
    np.testing.assert_array_equal(rec.block(1, cfg.layout), [4, 5, 6, 7])


def test_partial_block_rejected(tmp_path):
    cfg = LayoutConfig.from_dict(LAYOUT_34)
    with pytest.raises(DataError, match="partial modality block"):
        ingest_csv(_write(tmp_path, HEADER + "s1,1,0,70,1,2,,4,5,6,7\n"), cfg)


@pytest.mark.parametrize("row,msg", [
    ("s1,1,0,70,1,x,3,4,5,6,7\n", "non-numeric"),
    ("s1,1,0,,1,2,3,4,5,6,7\n", "missing covariate"),
    ("s1,1,0,70,,,,NA,NA,NA,NA\n", "no modality observed"),
])
def test_ingest_errors(tmp_path, row, msg):
    cfg = LayoutConfig.from_dict(LAYOUT_34)
    with pytest.raises(DataError, match=msg):
        ingest_csv(_write(tmp_path, HEADER + row), cfg)


def test_missing_column_and_file(tmp_path):
    cfg = LayoutConfig.from_dict(LAYOUT_34)
    with pytest.raises(DataError, match="missing columns"):
        ingest_csv(_write(tmp_path, "subject_id,visit,time\ns1,1,0\n"), cfg)
    with pytest.raises(DataError, match="cannot read"):
        ingest_csv(tmp_path / "nope.csv", cfg)


def test_blocks_follow_modality_order_not_column_order(tmp_path):
    cfg = LayoutConfig.from_dict(LAYOUT_34)
    text = "t4,t3,t2,t1,a3,a2,a1,age,time,visit,subject_id\n7,6,5,4,3,2,1,70,0,1,s1\n"
    ds = ingest_csv(_write(tmp_path, text), cfg)
    np.testing.assert_array_equal(ds.records[0].y_obs, [1, 2, 3, 4, 5, 6, 7])


def test_build_design():
    rec = ObservationRecord("s", 1, 0.0, [], (0,), [1.0])
    np.testing.assert_array_equal(build_design(rec), [1, 0])
    rec = ObservationRecord("s", 1, 0.5, [1, 0.25], (0,), [1.0])
    np.testing.assert_array_equal(build_design(rec), [1, 0.5, 1, 0.25])
    np.testing.assert_array_equal(build_design(rec, include_time=False), [1, 1, 0.25])
    rec = ObservationRecord("s", 1, 2.0, [0], (0,), [1.0])
    np.testing.assert_array_equal(build_design(rec), [1, 2, 0])


def test_record_validation():
    with pytest.raises(DataError, match="empty"):
        ObservationRecord("s", 1, 0.0, [], (), [])
    lay = ModalityLayout.generic([2, 2])
    bad = ObservationRecord("s", 1, 0.0, [], (0,), [1.0, 2.0, 3.0])
    with pytest.raises(DataError, match="expected 2"):
        Dataset(lay, (bad,))
    with pytest.raises(ConfigError):
        ModalityLayout((2, 0), ("a", "b"), ("x", "y"))


def test_validate_synchrony():
    lay = ModalityLayout.generic([1, 1])
    full = [ObservationRecord(f"s{i}", 1, 0, [], (0, 1), [0, 0]) for i in range(4)]
    assert validate(Dataset(lay, tuple(full)))["synchrony_pct"] == 100.0

    recs = [ObservationRecord(f"s{i % 49}", i, 0, [], (0, 1) if i < 125 else (i % 2,),
                              [0, 0] if i < 125 else [0]) for i in range(490)]
    rep = validate(Dataset(lay, tuple(recs)))
    assert round(rep["synchrony_pct"], 1) == 25.5
    assert rep["n_records"] == 490
    assert sum(rep["pattern_counts"].values()) == 490
    assert sum(rep["records_per_subject"].values()) == 490

    with pytest.raises(DataError, match="no records"):
        validate(Dataset(lay, ()))


def test_layout_config_round_trip(tmp_path):
    cfg = LayoutConfig.from_dict({**LAYOUT_34, "include_time": False, "missing": "."})
    save_layout_config(cfg, tmp_path / "l.yaml")
    back = load_layout_config(tmp_path / "l.yaml")
    assert back == cfg
    with pytest.raises(ConfigError, match="modalities"):
        LayoutConfig.from_dict({"covariates": []})


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_cov=st.integers(0, 2),
       dims=st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_csv_round_trip(tmp_path_factory, seed, n_cov, dims):
    rng = np.random.default_rng(seed)
    lay = ModalityLayout.generic(dims)
    masks = [lay.full_mask()] + [(k,) for k in range(lay.K)]
    ds = make_dataset(rng, dims=dims, n_subjects=3, n_visits=2, n_cov=n_cov, masks=masks)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    cfg = LayoutConfig(lay, ds.covariate_names)
    write_csv(ds, path, cfg)
    back = ingest_csv(path, cfg)
    assert back == ds
    for rec in back.records:
        assert rec.y_obs.size == sum(lay.dims[k] for k in rec.mask)
        assert build_design(rec).size == n_cov + 2
