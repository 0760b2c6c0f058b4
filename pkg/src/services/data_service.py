import logging
from pathlib import Path

import numpy as np
import pandas as pd

from services.errors import DataError
from services.model_service import Dataset
from utils.common import render_csv, save_json_file, write_text_atomic

logger = logging.getLogger(__name__)

INTERCEPT = "(intercept)"


class DataManager:
    """Reads regression datasets from CSV and writes run artifacts.

    Artifacts are written to a temp file next to the target and renamed into
    place, so a failed run never leaves a partial output behind.
    """

    def __init__(self, response="y", intercept=True):
        self.response = response
        self.intercept = intercept

    def load_dataset(self, path) -> Dataset:
        path = Path(path)
        if not path.exists():
            raise DataError(f"input file not found: {path}")
        try:
            frame = pd.read_csv(path, sep=",", decimal=".", header=0, skipinitialspace=True)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise DataError(f"malformed CSV {path}: {e}") from None
        return self.dataset_from_frame(frame, source=str(path))

    def dataset_from_frame(self, frame: pd.DataFrame, source="<frame>") -> Dataset:
        frame.columns = [str(c).strip() for c in frame.columns]
        if self.response not in frame.columns:
            raise DataError(f"{source}: response column {self.response!r} not found")
        if frame.empty:
            raise DataError(f"{source}: no data rows")

        numeric = frame.apply(pd.to_numeric, errors="coerce")
        missing = numeric.isna().to_numpy()
        if missing.any():
            row, col = np.argwhere(missing)[0]
            raise DataError(
                f"{source}: non-numeric or missing value in column "
                f"{frame.columns[col]!r}, data row {row + 1}"
            )

        y = numeric[self.response].to_numpy(dtype=float)
        covariates = [c for c in numeric.columns if c != self.response]
        X = numeric[covariates].to_numpy(dtype=float)
        if self.intercept:
            X = np.column_stack([np.ones(len(y)), X]) if covariates else np.ones((len(y), 1))
            covariates = [INTERCEPT] + covariates
        if not covariates:
            raise DataError(f"{source}: no covariate columns")

        logger.info("Loaded %d rows, %d covariates from %s", len(y), len(covariates), source)
        return Dataset(y, X, tuple(covariates), self.response)

    def save_report(self, path, payload: dict):
        save_json_file(path, payload)

    def save_table(self, path, header, rows):
        write_text_atomic(path, render_csv(header, rows))
