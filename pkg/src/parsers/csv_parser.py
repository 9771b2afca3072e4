import pandas as pd

from .base_parser import BaseParser


class CSVParser(BaseParser):
    def read(self, path) -> pd.DataFrame:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
