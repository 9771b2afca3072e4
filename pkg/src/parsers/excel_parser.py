import pandas as pd

from .base_parser import BaseParser


class ExcelParser(BaseParser):
    def read(self, path) -> pd.DataFrame:
        """First worksheet; the header row carries the column names."""
        df = pd.read_excel(path, sheet_name=0, dtype=str, engine="openpyxl")
        if df.empty:
            raise ValueError("Excel file is empty")
        return df
