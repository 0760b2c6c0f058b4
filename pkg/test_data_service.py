import json

import numpy as np
import pandas as pd
import pytest

from services.data_service import INTERCEPT, DataManager
from services.errors import DataError


@pytest.fixture
def manager():
    return DataManager()


class TestLoadDataset:
    def test_intercept_prepended(self, tmp_path, manager):
        path = tmp_path / "data.csv"
        path.write_text("y,age,dose\n1,30,0.5\n0,41,1.5\n1,25,2.0\n")
        data = manager.load_dataset(path)
        assert data.columns == (INTERCEPT, "age", "dose")
        np.testing.assert_array_equal(data.X[:, 0], 1.0)
        np.testing.assert_array_equal(data.y, [1.0, 0.0, 1.0])
        assert data.column_index("dose") == 2

    def test_response_column_anywhere(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x, outcome\n0.1, 3.5\n0.2, 4.0\n")
        data = DataManager(response="outcome", intercept=False).load_dataset(path)
        assert data.columns == ("x",)
        np.testing.assert_array_equal(data.y, [3.5, 4.0])

    def test_missing_value_is_reported_with_location(self, tmp_path, manager):
        path = tmp_path / "data.csv"
        path.write_text("y,x\n1,2\n0,\n")
        with pytest.raises(DataError, match="'x', data row 2"):
            manager.load_dataset(path)

    def test_non_numeric_cell(self, tmp_path, manager):
        path = tmp_path / "data.csv"
        path.write_text("y,x\n1,two\n")
        with pytest.raises(DataError):
            manager.load_dataset(path)

    def test_missing_response(self, tmp_path, manager):
        path = tmp_path / "data.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataError, match="response column"):
            manager.load_dataset(path)

    def test_empty_file(self, tmp_path, manager):
        path = tmp_path / "data.csv"
        path.write_text("")
        with pytest.raises(DataError):
            manager.load_dataset(path)

    def test_header_only(self, tmp_path, manager):
        path = tmp_path / "data.csv"
        path.write_text("y,x\n")
        with pytest.raises(DataError, match="no data rows"):
            manager.load_dataset(path)

    def test_no_covariates_without_intercept(self):
        with pytest.raises(DataError):
            DataManager(intercept=False).dataset_from_frame(pd.DataFrame({"y": [1.0, 2.0]}))

    def test_missing_file(self, tmp_path, manager):
        with pytest.raises(DataError):
            manager.load_dataset(tmp_path / "absent.csv")


class TestArtifacts:
    def test_save_table(self, tmp_path, manager):
        path = tmp_path / "out" / "table.csv"
        manager.save_table(path, ("n", "value", "flag"), [(150, 0.25, True), (300, None, False)])
        assert path.read_bytes() == b"n,value,flag\r\n150,0.25,1\r\n300,,0\r\n"

    def test_save_report(self, tmp_path, manager):
        path = tmp_path / "report.json"
        manager.save_report(path, {"matrix": np.eye(2), "value": np.float64(1.5)})
        assert json.loads(path.read_text()) == {"matrix": [[1.0, 0.0], [0.0, 1.0]], "value": 1.5}
