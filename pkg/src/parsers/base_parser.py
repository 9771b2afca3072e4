from abc import ABC, abstractmethod
from pathlib import Path

import pandas as pd

from errors import DataFormatError


class BaseParser(ABC):
    @abstractmethod
    def read(self, path: Path) -> pd.DataFrame:
        """Read the raw table with every cell as a string."""

    def parse(self, input_source, columns: list[str]) -> pd.DataFrame:
        """
        Parse a tabular return file into a frame of string cells.

        Args:
            input_source: Path to the file to parse
            columns: Column names the table must provide

        Returns:
            pd.DataFrame: The requested columns, one row per data line. Row ``i``
                          sits on line ``i + 2`` of the file (the header is line 1).

        Raises:
            DataFormatError: If the file cannot be read or lacks a column
            FileNotFoundError: If the input file does not exist
        """
        path = Path(input_source)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {input_source}")
        try:
            df = self.read(path)
        except Exception as e:
            raise DataFormatError(f"{path}: failed to parse {self.name} file: {e}") from e

        df.columns = [str(c).strip().lower() for c in df.columns]
        missing = [c for c in columns if c not in df.columns]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}; expected {', '.join(columns)}")
        return df[columns].fillna("").astype(str)

    @property
    def name(self):
        """Return a human-readable name for this parser"""
        return self.__class__.__name__.replace('Parser', '')
