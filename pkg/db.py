"""
Run registry for the lesion classification pipeline.

A small sqlite index of training runs and evaluations under the output root.
Run directories stay the source of truth; registry failures are logged and
reported as False or empty results.
"""

import logging
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# seeds are unsigned 64-bit and overflow sqlite INTEGER, so they are stored as text
REGISTRY_ERRORS = (sqlite3.Error, OverflowError)


def _run_row(row: sqlite3.Row) -> Dict[str, Any]:
    entry = dict(row)
    if entry.get("seed") not in (None, ""):
        entry["seed"] = int(entry["seed"])
    return entry


class RunRegistry:
    """Index of training runs and evaluations."""

    def __init__(self, db_path: PathLike):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def init_database(self) -> None:
        try:
            with self._connect() as conn:
                cursor = conn.cursor()
                cursor.execute(
                    """
                    CREATE TABLE IF NOT EXISTS runs (
                        run_id TEXT PRIMARY KEY,
                        task TEXT NOT NULL,
                        architecture_id TEXT NOT NULL,
                        input_size INTEGER,
                        schedule_id TEXT,
                        seed TEXT,
                        selected_epoch INTEGER,
                        run_dir TEXT,
                        created_at TEXT NOT NULL
                    )
                    """
                )
                cursor.execute(
                    """
                    CREATE TABLE IF NOT EXISTS evaluations (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        source TEXT NOT NULL,
                        task TEXT NOT NULL,
                        n_images INTEGER,
                        auc REAL,
                        accuracy REAL,
                        sensitivity REAL,
                        specificity REAL,
                        threshold REAL,
                        report_path TEXT,
                        created_at TEXT NOT NULL
                    )
                    """
                )
                cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_task ON runs(task)")
                cursor.execute("CREATE INDEX IF NOT EXISTS idx_evaluations_source ON evaluations(source)")
                conn.commit()
                logger.debug(f"Run registry ready at {self.db_path}")
        except sqlite3.Error as e:
            logger.error(f"Error initializing run registry: {e}")
            raise

    def register_run(self, record, run_dir: Optional[PathLike] = None) -> bool:
        """Insert-or-replace on run_id."""
        run_dir = run_dir if run_dir is not None else record.run_dir
        try:
            with self._connect() as conn:
                conn.execute(
                    """
                    INSERT OR REPLACE INTO runs
                    (run_id, task, architecture_id, input_size, schedule_id, seed, selected_epoch, run_dir, created_at)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
                    """,
                    (
                        record.run_id,
                        record.task.value,
                        record.spec.architecture_id.value,
                        record.spec.input_size,
                        record.schedule.schedule_id,
                        str(record.seed),
                        record.selected_epoch,
                        None if run_dir is None else str(run_dir),
                        datetime.now().isoformat(),
                    ),
                )
                conn.commit()
                logger.info(f"Registered run {record.run_id}")
                return True
        except REGISTRY_ERRORS as e:
            logger.error(f"Error registering run {record.run_id}: {e}")
            return False

    def record_evaluation(self, source: str, report, report_path: Optional[PathLike] = None) -> bool:
        try:
            with self._connect() as conn:
                conn.execute(
                    """
                    INSERT INTO evaluations
                    (source, task, n_images, auc, accuracy, sensitivity, specificity, threshold, report_path, created_at)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                    """,
                    (
                        source,
                        report.task,
                        report.n_images,
                        report.auc,
                        report.accuracy,
                        report.sensitivity,
                        report.specificity,
                        report.threshold,
                        None if report_path is None else str(report_path),
                        datetime.now().isoformat(),
                    ),
                )
                conn.commit()
                return True
        except REGISTRY_ERRORS as e:
            logger.error(f"Error recording evaluation for {source}: {e}")
            return False

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        try:
            with self._connect() as conn:
                row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
                return _run_row(row) if row else None
        except REGISTRY_ERRORS as e:
            logger.error(f"Error loading run {run_id}: {e}")
            return None

    def list_runs(self, task: Optional[str] = None) -> List[Dict[str, Any]]:
        """Newest first."""
        query = "SELECT * FROM runs"
        params: tuple = ()
        if task:
            query += " WHERE task = ?"
            params = (task,)
        query += " ORDER BY created_at DESC, rowid DESC"
        try:
            with self._connect() as conn:
                return [_run_row(row) for row in conn.execute(query, params).fetchall()]
        except REGISTRY_ERRORS as e:
            logger.error(f"Error listing runs: {e}")
            return []

    def list_evaluations(self, source: Optional[str] = None) -> List[Dict[str, Any]]:
        query = "SELECT * FROM evaluations"
        params: tuple = ()
        if source:
            query += " WHERE source = ?"
            params = (source,)
        query += " ORDER BY id DESC"
        try:
            with self._connect() as conn:
                return [dict(row) for row in conn.execute(query, params).fetchall()]
        except REGISTRY_ERRORS as e:
            logger.error(f"Error listing evaluations: {e}")
            return []
