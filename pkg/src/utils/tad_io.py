"""
TAD table and run manifest I/O
"""

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

import pandas as pd

from src.utils.errors import ParseError

logger = logging.getLogger("tadlp.tad_io")

TAD_COLUMNS = ["chrom", "start_bp", "end_bp", "level", "pvalue", "cell_type", "parent_id", "id"]
# Benjamini-Hochberg adjusted p-value, present only when some record carries one
QVALUE_COLUMN = "qvalue"


@dataclass(frozen=True)
class TadRecord:
    """One output row; 0-based half-open bp coordinates

    pvalue is always the raw post-test p-value; qvalue is set only for FDR runs.
    """

    chrom: str
    start_bp: int
    end_bp: int
    level: int
    pvalue: Optional[float]
    cell_type: str
    parent_id: Optional[int]
    id: int
    qvalue: Optional[float] = None


def write_tads(records: List[TadRecord], path: str) -> str:
    """Write records as a tab-separated table with a header row"""
    columns = TAD_COLUMNS + ([QVALUE_COLUMN] if any(r.qvalue is not None for r in records) else [])
    df = pd.DataFrame([asdict(r) for r in records], columns=columns)
    df["parent_id"] = df["parent_id"].astype("Int64")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    df.to_csv(path, sep="\t", index=False, na_rep="NA", float_format="%.17g")
    logger.info(f"Wrote {len(records)} TADs to {path}")
    return path


def read_tads(path: str) -> List[TadRecord]:
    """Read a table written by write_tads"""
    try:
        df = pd.read_csv(path, sep="\t", dtype={"chrom": str, "cell_type": str}, na_values=["NA"],
                         keep_default_na=False, float_precision="round_trip")
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed TAD table: {e}", path)
    missing = [c for c in TAD_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", path)

    has_qvalue = QVALUE_COLUMN in df.columns
    records = []
    for row in df.itertuples(index=False):
        qvalue = row.qvalue if has_qvalue else None
        records.append(TadRecord(
            chrom=row.chrom,
            start_bp=int(row.start_bp),
            end_bp=int(row.end_bp),
            level=int(row.level),
            pvalue=None if pd.isna(row.pvalue) else float(row.pvalue),
            cell_type=row.cell_type,
            parent_id=None if pd.isna(row.parent_id) else int(row.parent_id),
            id=int(row.id),
            qvalue=None if qvalue is None or pd.isna(qvalue) else float(qvalue),
        ))
    return records


def write_manifest(manifest: Dict[str, Any], path: str) -> str:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    logger.info(f"Wrote run manifest to {path}")
    return path


def read_manifest(path: str) -> Dict[str, Any]:
    with open(path, "r") as f:
        return json.load(f)
