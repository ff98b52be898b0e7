#!/usr/bin/env python3
"""
Artifact writers: logging setup, JSON reports, plot columns and the summary workbook.
"""

import json
import logging
import os
import sys
from typing import Any, Dict, Optional

import numpy as np
import openpyxl
import pandas as pd
from openpyxl.styles import Alignment, Font, PatternFill

from config import LOG_FILE

logger = logging.getLogger(__name__)


def setup_logging(output_dir: str, level: int = logging.INFO) -> None:
    """Log to <output_dir>/run.log and stdout."""
    os.makedirs(output_dir, exist_ok=True)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(output_dir, LOG_FILE)),
            logging.StreamHandler(sys.stdout),
        ],
    )


def _to_builtin(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(path: str, payload: Dict[str, Any]) -> str:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=_to_builtin)
    logger.info(f"💾 Wrote {path}")
    return path


def write_plotdata(path: str, frame: pd.DataFrame, comment: Optional[str] = None) -> str:
    """Whitespace-separated columns with a '#' header line."""
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("# " + " ".join(frame.columns) + "\n")
        frame.to_csv(f, sep=" ", header=False, index=False, float_format="%.17g")
    logger.info(f"💾 Wrote plot data {path}")
    return path


def write_summary_workbook(path: str, tables: Dict[str, pd.DataFrame]) -> Optional[str]:
    """One sheet per non-empty table, bold coloured header row, fitted column widths."""
    tables = {name: df for name, df in tables.items() if df is not None and not df.empty}
    if not tables:
        logger.info("No tables for the summary workbook")
        return None

    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for name, df in tables.items():
            # sheet names are limited to 31 characters
            df.to_excel(writer, sheet_name=name[:31], index=False)

    wb = openpyxl.load_workbook(path)
    for sheet_name in wb.sheetnames:
        ws = wb[sheet_name]
        for col in range(1, ws.max_column + 1):
            cell = ws.cell(row=1, column=col)
            cell.font = Font(bold=True, color="FFFFFF")
            cell.fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
            cell.alignment = Alignment(horizontal="center", vertical="center")
        for column in ws.columns:
            max_length = 0
            column_letter = column[0].column_letter
            for cell in column:
                if cell.value is not None:
                    max_length = max(max_length, len(str(cell.value)))
            ws.column_dimensions[column_letter].width = min(max_length + 2, 50)
    wb.save(path)
    logger.info(f"📊 Summary workbook saved to {path}")
    return path


def report_frame(report: Dict[str, Any]) -> pd.DataFrame:
    """Flatten a report dict to a two-column key/value table for the workbook."""
    rows = []
    for key, value in report.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, default=_to_builtin)
        rows.append({"key": key, "value": value})
    return pd.DataFrame(rows)
