"""
Sweep Tracker

Collects per-seed benchmark accuracies and summarizes them per
(r, method) point.
"""

import logging
import os
from typing import Dict, List, Optional

import pandas as pd

logger = logging.getLogger("tadlp.sweep_tracker")

SWEEP_COLUMNS = ["r", "method", "seed", "accuracy"]


class SweepTracker:
    """
    Track benchmark results across ratios, methods and seeds
    """

    def __init__(self):
        self.rows: List[Dict[str, object]] = []

    def log_result(self, r: float, method: str, seed: int, accuracy: float) -> None:
        """
        Record one benchmark run

        Args:
            r: Within/background probability ratio
            method: "lp-opt" or "spectral"
            seed: Simulation seed
            accuracy: Best-permutation node accuracy
        """
        self.rows.append({"r": float(r), "method": method, "seed": int(seed), "accuracy": float(accuracy)})
        logger.debug(f"r={r:g} {method} seed={seed}: accuracy {accuracy:.3f}")

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=SWEEP_COLUMNS)
        return df.sort_values(["r", "method", "seed"], kind="mergesort").reset_index(drop=True)

    def summary(self) -> pd.DataFrame:
        """Mean accuracy, standard error and seed count per (r, method)"""
        df = self.to_frame()
        if df.empty:
            return pd.DataFrame(columns=["r", "method", "mean", "sem", "n"])
        return (
            df.groupby(["r", "method"])["accuracy"]
            .agg(mean="mean", sem="sem", n="size")
            .reset_index()
        )

    def save(self, path: str, summary_path: Optional[str] = None) -> str:
        """
        Write the per-seed table (and optionally the summary) as TSV

        Returns:
            Path of the per-seed table
        """
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, sep="\t", index=False)
        if summary_path is not None:
            self.summary().to_csv(summary_path, sep="\t", index=False)
        logger.info(f"Wrote {len(self.rows)} sweep rows to {path}")
        return path
