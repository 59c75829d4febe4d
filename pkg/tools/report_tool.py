# tools/report_tool.py
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from utils.logger import get_logger

SIGNIFICANT_DIGITS = 12


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    return value


class ReportTool:
    """
    Writes JSON summaries and CSV tables in a byte-stable layout.
    """
    @staticmethod
    def to_json(document: dict, include_timing: bool = True) -> str:
        doc = dict(document)
        if not include_timing:
            doc.pop("timing", None)
        return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def write_json(document: dict, path, include_timing: bool = True) -> Path:
        logger = get_logger("ReportTool")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ReportTool.to_json(document, include_timing), encoding="utf-8")
        logger.info(f"Wrote report {path}")
        return path

    @staticmethod
    def write_table(table: pd.DataFrame, path, include_timing: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not include_timing:
            table = table.drop(columns=[c for c in table.columns if "time" in c])
        table.to_csv(path, index=False, float_format=f"%.{SIGNIFICANT_DIGITS}g", lineterminator="\n")
        return path

# End of tools/report_tool.py
