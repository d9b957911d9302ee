import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from numpy.testing import assert_array_equal

from lowrank_mcr.errors import ValidationError
from lowrank_mcr.io import (
    load_dataset,
    read_matrices,
    read_metadata,
    read_table,
    save_dataset,
    write_table,
)
from lowrank_mcr.model import MatrixDataset


def test_matrix_file_is_column_major(tmp_path):
    (tmp_path / "m.csv").write_text("2 2\n1,3,2,4\n")
    assert_array_equal(read_matrices(tmp_path / "m.csv")[0], [[1, 2], [3, 4]])


def test_missing_covariates_gives_m_zero(tmp_path):
    (tmp_path / "y.csv").write_text("1\n2\n")
    (tmp_path / "m.csv").write_text("1 2\n1,2\n3,4\n")
    data = load_dataset(tmp_path / "y.csv", tmp_path / "m.csv")
    assert data.m == 0 and data.n == 2


@settings(max_examples=25, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_roundtrip_bit_exact(tmp_path, seed, m):
    rng = np.random.default_rng(seed)
    n, p, q = 5, 2, 3
    z = rng.standard_normal((n, m)) * 1e3 if m else None
    data = MatrixDataset(y=rng.standard_normal(n) / 7, mats=rng.standard_normal((n, p, q)), z=z)
    paths = [tmp_path / f"{k}{seed}.csv" for k in "ymz"]
    save_dataset(data, *paths)
    back = load_dataset(paths[0], paths[1], paths[2] if m else None)
    assert_array_equal(back.y, data.y)
    assert_array_equal(back.mats, data.mats)
    assert_array_equal(back.z, data.z)


def test_covariate_header_is_skipped(tmp_path):
    (tmp_path / "y.csv").write_text("1\n0\n")
    (tmp_path / "m.csv").write_text("1 1\n1\n2\n")
    (tmp_path / "z.csv").write_text("age,dose\n30,1\n40,2\n")
    data = load_dataset(tmp_path / "y.csv", tmp_path / "m.csv", tmp_path / "z.csv", "logistic")
    assert_array_equal(data.z, [[30, 1], [40, 2]])


@pytest.mark.parametrize("ycontent,mcontent,zcontent,match", [
    ("1\n2\n", "2 2\n1,2,3\n1,2,3,4\n", None, "line 2 has 3 values"),
    ("1\n2\n", "2 2\n1,2,3,4\n1,x,3,4\n", None, "line 3, column 2"),
    ("1\n2\n3\n", "1 1\n1\n2\n", None, "2 matrices"),
    ("1\n2\n", "1 1\n1\n2\n", "1\n", "1 rows"),
    ("1\n2\n", "1 1\n1\n2\n", "1,2\n3\n", "line 2 has 1 columns"),
    ("1\nnan\n", "1 1\n1\n2\n", None, "line 2: non-finite"),
    ("1\n2\n", "a b\n1\n2\n", None, "two integers"),
    ("1\n2\n", "", None, "empty"),
])
def test_load_errors_locate_the_problem(tmp_path, ycontent, mcontent, zcontent, match):
    (tmp_path / "y.csv").write_text(ycontent)
    (tmp_path / "m.csv").write_text(mcontent)
    zp = None
    if zcontent is not None:
        zp = tmp_path / "z.csv"
        zp.write_text(zcontent)
    with pytest.raises(ValidationError, match=match):
        load_dataset(tmp_path / "y.csv", tmp_path / "m.csv", zp)


def test_logistic_domain_error(tmp_path):
    (tmp_path / "y.csv").write_text("1\n0.5\n")
    (tmp_path / "m.csv").write_text("1 1\n1\n2\n")
    with pytest.raises(ValidationError, match="row 2"):
        load_dataset(tmp_path / "y.csv", tmp_path / "m.csv", family="logistic")


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_dataset(tmp_path / "none.csv", tmp_path / "m.csv")


def test_table_and_sidecar(tmp_path):
    path = tmp_path / "out" / "t.csv"
    write_table(path, ["a", "b"], [[1, 0.1], ["x", float("nan")]], {"seed": np.int64(3),
                                                                 "lam": np.float64(0.5)})
    header, rows = read_table(path)
    assert header == ["a", "b"] and rows == [["1", "0.1"], ["x", "nan"]]
    assert read_metadata(path) == {"lam": 0.5, "seed": 3}
