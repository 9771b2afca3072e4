import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from config import RunConfig

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config.echo.json"
METRICS = "metrics.json"


class RunManager:
    """Owns one command's output directory: config echo, metrics and CSV artifacts."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.init_directories()

    @classmethod
    def for_command(cls, cfg: RunConfig, command: str, output_root: str = "runs") -> "RunManager":
        """``--out`` when given, else ``<output_root>/<kind>-<command>-seed<seed>``."""
        if cfg.out:
            return cls(cfg.out)
        return cls(Path(output_root) / f"{cfg.kind}-{command}-seed{cfg.seed}")

    def init_directories(self):
        """Create the output directory if it doesn't exist"""
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_config_echo(self, cfg: RunConfig) -> Path:
        path = self.path(CONFIG_ECHO)
        path.write_text(cfg.echo())
        return path

    def load_reports(self) -> List[Dict]:
        """Load all reports from the metrics.json file"""
        path = self.path(METRICS)
        if not path.exists():
            return []
        with open(path) as f:
            return json.load(f).get("reports", [])

    def append_reports(self, reports: List[Dict]) -> Path:
        """Append reports to metrics.json, keeping the ones earlier commands wrote."""
        existing = self.load_reports()
        existing.extend(reports)
        path = self.path(METRICS)
        with open(path, "w") as f:
            json.dump({"reports": existing}, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info("Appended %d report(s) to %s", len(reports), path)
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(name)
        frame.to_csv(path, index=False, float_format="%.17g")
        logger.info("Wrote %s (%d rows)", path, len(frame))
        return path

    def write_json(self, name: str, data: Dict) -> Path:
        path = self.path(name)
        with open(path, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def read_json(self, name: str) -> Optional[Dict]:
        path = self.path(name)
        if not path.exists():
            return None
        with open(path) as f:
            return json.load(f)
