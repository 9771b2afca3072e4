from pathlib import Path

from errors import DataFormatError

from .base_parser import BaseParser
from .csv_parser import CSVParser
from .excel_parser import ExcelParser

__all__ = ['BaseParser', 'CSVParser', 'ExcelParser', 'discover_parsers', 'parser_for']


def discover_parsers():
    """
    Returns a dictionary of available parsers.
    The key is the file suffix the parser handles, and the value is the parser instance.
    """
    return {
        '.csv': CSVParser(),
        '.xlsx': ExcelParser(),
    }


def parser_for(path) -> BaseParser:
    """Pick the parser for a return-panel file by its suffix."""
    parsers = discover_parsers()
    suffix = Path(path).suffix.lower()
    parser = parsers.get(suffix)
    if parser is None:
        supported = ', '.join(parsers)
        raise DataFormatError(f"Unsupported file type: {suffix}. Supported types: {supported}")
    return parser
