"""
Run logging for tadlp

This module sets up the file/console logging used by the command-line tool and
provides SolveLogger, which records every interval-LP solve (window, level,
convergence, beta, objective) to JSONL and CSV files so that runs can be
audited and their convergence flags copied into the run manifest.
"""

import os
import sys
import json
import uuid
import logging
import threading
import pandas as pd
from datetime import datetime
from typing import Dict, Any, Optional, List

logger = logging.getLogger("tadlp.run_logger")

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

SOLVE_COLUMNS = [
    "timestamp", "run_id", "cell_type", "level", "window", "start", "end",
    "n", "grid_size", "K", "iterations", "converged", "beta", "objective",
    "selected"
]


def setup_logging(log_dir: str = "logs", level: int = logging.INFO, console: bool = True) -> str:
    """
    Configure the "tadlp" logger hierarchy

    Args:
        log_dir: Directory for tadlp.log
        level: Logging level for both handlers
        console: Also echo records to stderr

    Returns:
        Path of the log file
    """
    os.makedirs(log_dir, exist_ok=True)
    log_path = os.path.join(log_dir, "tadlp.log")

    root = logging.getLogger("tadlp")
    root.setLevel(level)
    # Re-running setup (tests, repeated CLI calls in one process) must not stack handlers
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    file_handler = logging.FileHandler(log_path, mode='a')
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(file_handler)

    if console:
        stream_handler = logging.StreamHandler(sys.stderr)
        stream_handler.setFormatter(logging.Formatter('%(levelname)s - %(message)s'))
        stream_handler.setLevel(max(level, logging.WARNING))
        root.addHandler(stream_handler)

    return log_path


class SolveLogger:
    """
    Records one entry per alternating-maximization solve
    """

    def __init__(self, log_dir: Optional[str] = None, run_id: Optional[str] = None):
        """
        Initialize the solve logger

        Args:
            log_dir: Directory for solves.jsonl / solves.csv; None keeps
                entries in memory only
            run_id: Identifier stamped on every entry
        """
        self.log_dir = log_dir
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.entries: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

        self.jsonl_file = None
        self.csv_file = None
        if log_dir is not None:
            os.makedirs(log_dir, exist_ok=True)
            self.jsonl_file = os.path.join(log_dir, "solves.jsonl")
            self.csv_file = os.path.join(log_dir, "solves.csv")
            self._ensure_log_files_exist()

    def _ensure_log_files_exist(self) -> None:
        """Create the CSV with headers if needed"""
        if not os.path.exists(self.csv_file):
            pd.DataFrame(columns=SOLVE_COLUMNS).to_csv(self.csv_file, index=False)
            logger.info(f"Created new solve log at {self.csv_file}")

    def log_solve(self,
                  cell_type: str,
                  level: int,
                  window: int,
                  start: int,
                  end: int,
                  grid_size: int,
                  K: int,
                  iterations: int,
                  converged: bool,
                  beta: Any,
                  objective: float,
                  selected: int) -> Dict[str, Any]:
        """
        Log a finished solve

        Args:
            cell_type: Cell-type label, or "joint"
            level: Hierarchy level (1 = base)
            window: Window index at level 1, parent index at nested levels
            start: First global bin of the solved block
            end: One past the last global bin
            grid_size: Number of candidate intervals
            K: Cardinality bound
            iterations: Alternating iterations used
            converged: Whether |delta beta| fell below tol
            beta: Final beta (a float, or a list for joint solves)
            objective: Final relaxed objective
            selected: Number of intervals selected

        Returns:
            The logged entry
        """
        entry = {
            "timestamp": datetime.now().isoformat(),
            "run_id": self.run_id,
            "cell_type": cell_type,
            "level": level,
            "window": window,
            "start": start,
            "end": end,
            "n": end - start,
            "grid_size": grid_size,
            "K": K,
            "iterations": iterations,
            "converged": converged,
            "beta": beta if not isinstance(beta, (list, tuple)) else ",".join(f"{b:.6g}" for b in beta),
            "objective": objective,
            "selected": selected,
        }

        message = (
            f"Solve: level {level} | window {window} [{start},{end}) | "
            f"grid {grid_size} | K {K} | iterations {iterations} | "
            f"selected {selected} | converged {converged}"
        )
        if converged:
            logger.info(message)
        else:
            logger.warning(f"{message} | did not converge")

        with self._lock:
            self.entries.append(entry)
            if self.jsonl_file is not None:
                try:
                    with open(self.jsonl_file, "a") as f:
                        f.write(json.dumps(entry) + "\n")
                    pd.DataFrame([entry], columns=SOLVE_COLUMNS).to_csv(
                        self.csv_file, mode='a', header=False, index=False
                    )
                except OSError as e:
                    logger.error(f"Error writing solve log: {e}")
        return entry

    def non_converged(self) -> List[Dict[str, Any]]:
        """Entries whose ascent hit max_iter"""
        return [e for e in self.entries if not e["converged"]]

    def summary(self) -> Dict[str, Any]:
        """
        Summarize this run's solves

        Returns:
            Dictionary with solve counts, convergence rate and per-level stats
        """
        if not self.entries:
            return {"solves": 0, "converged": 0, "non_converged": 0, "by_level": {}}

        df = pd.DataFrame(self.entries)
        by_level = df.groupby("level").agg(
            solves=("converged", "size"),
            converged=("converged", "sum"),
            mean_iterations=("iterations", "mean"),
            selected=("selected", "sum"),
        )
        return {
            "solves": int(len(df)),
            "converged": int(df["converged"].sum()),
            "non_converged": int((~df["converged"].astype(bool)).sum()),
            "by_level": {
                int(level): {k: float(v) if k == "mean_iterations" else int(v) for k, v in row.items()}
                for level, row in by_level.iterrows()
            },
        }
