"""
Run Tracker with SQLite Database

Index of experiment runs: one row per (strategy, seed) run with its run
directory and status, plus the per-round accuracy records. The CSV artifacts
in each run directory stay the source of truth; this index makes past runs
queryable without walking the filesystem.
"""

import sqlite3
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from adroit.logger import get_logger

logger = get_logger(__name__)


class RunTracker:
    """
    SQLite-based tracker for experiment runs

    Manages two tables:
    - experiment_runs: one row per (strategy, seed) run
    - round_records: accuracy and loss summaries per AL round
    """

    def __init__(self, db_path: str = "./runs/run_tracker.db"):
        self.db_path = db_path
        self._lock = threading.Lock()
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self._init_database()
        logger.info(f"📊 Run Tracker initialized: {db_path}")

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _init_database(self):
        """Create database tables if they don't exist"""
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS experiment_runs (
                run_id TEXT PRIMARY KEY,
                strategy TEXT NOT NULL,
                seed INTEGER NOT NULL,
                run_dir TEXT NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                finished_at TIMESTAMP,
                status TEXT,
                rounds_completed INTEGER DEFAULT 0,
                final_accuracy REAL,
                config_snapshot TEXT
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS round_records (
                record_id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                round INTEGER NOT NULL,
                labeled_count INTEGER NOT NULL,
                accuracy REAL,
                target_loss REAL,
                vae_loss REAL,
                disc_accuracy REAL,
                FOREIGN KEY (run_id) REFERENCES experiment_runs(run_id)
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_round_run_id
            ON round_records(run_id)
        """)

        conn.commit()
        conn.close()
        logger.debug("✅ Database tables initialized")

    def create_run(self, run_id: str, strategy: str, seed: int, run_dir: str,
                   config_items: Sequence[Tuple[str, str]] = ()) -> str:
        """Register a run; re-registering an existing id resets its round records"""
        snapshot = "\n".join(f"{k}={v}" for k, v in config_items)
        with self._lock:
            conn = self._connect()
            try:
                conn.execute("DELETE FROM round_records WHERE run_id = ?", (run_id,))
                conn.execute("""
                    INSERT OR REPLACE INTO experiment_runs
                    (run_id, strategy, seed, run_dir, created_at, status, rounds_completed, config_snapshot)
                    VALUES (?, ?, ?, ?, ?, 'running', 0, ?)
                """, (run_id, strategy, int(seed), str(run_dir), datetime.now().isoformat(timespec="seconds"),
                      snapshot))
                conn.commit()
                logger.info(f"✅ Registered run: {run_id}")
                return run_id
            finally:
                conn.close()

    def add_round(self, run_id: str, record: Dict[str, Any]):
        with self._lock:
            conn = self._connect()
            try:
                conn.execute("""
                    INSERT INTO round_records
                    (run_id, round, labeled_count, accuracy, target_loss, vae_loss, disc_accuracy)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                """, (
                    run_id,
                    int(record["round"]),
                    int(record["labeled_count"]),
                    float(record["accuracy"]),
                    _nullable(record.get("target_loss")),
                    _nullable(record.get("vae_loss")),
                    _nullable(record.get("disc_accuracy")),
                ))
                conn.execute("UPDATE experiment_runs SET rounds_completed = ? WHERE run_id = ?",
                             (int(record["round"]) + 1, run_id))
                conn.commit()
            except Exception as e:
                logger.error(f"❌ Error saving round {record.get('round')} for {run_id}: {e}")
                conn.rollback()
            finally:
                conn.close()

    def finish_run(self, run_id: str, status: str, final_accuracy: Optional[float] = None):
        with self._lock:
            conn = self._connect()
            try:
                conn.execute("""
                    UPDATE experiment_runs
                    SET status = ?, final_accuracy = ?, finished_at = ?
                    WHERE run_id = ?
                """, (status, _nullable(final_accuracy), datetime.now().isoformat(timespec="seconds"), run_id))
                conn.commit()
                logger.info(f"🏁 Run {run_id} marked {status}")
            finally:
                conn.close()

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        conn = self._connect()
        try:
            row = conn.execute("SELECT * FROM experiment_runs WHERE run_id = ?", (run_id,)).fetchone()
            if row is None:
                logger.warning(f"⚠️ Run {run_id} not found")
                return None
            return dict(row)
        finally:
            conn.close()

    def get_rounds(self, run_id: str) -> List[Dict[str, Any]]:
        conn = self._connect()
        try:
            rows = conn.execute(
                "SELECT * FROM round_records WHERE run_id = ? ORDER BY round", (run_id,)
            ).fetchall()
            return [dict(r) for r in rows]
        finally:
            conn.close()

    def list_runs(self, strategy: Optional[str] = None, status: Optional[str] = None,
                  limit: int = 100, offset: int = 0) -> List[Dict[str, Any]]:
        """Runs newest first, optionally filtered by strategy and status"""
        query = "SELECT * FROM experiment_runs WHERE 1=1"
        params: List[Any] = []
        if strategy:
            query += " AND strategy = ?"
            params.append(strategy)
        if status:
            query += " AND status = ?"
            params.append(status)
        query += " ORDER BY created_at DESC, run_id LIMIT ? OFFSET ?"
        params.extend([limit, offset])

        conn = self._connect()
        try:
            runs = [dict(r) for r in conn.execute(query, params).fetchall()]
            logger.debug(f"📚 Retrieved {len(runs)} runs")
            return runs
        finally:
            conn.close()


def _nullable(value: Optional[float]) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return None if value != value else value


# Singleton instance
_tracker_instance = None


def get_run_tracker(db_path: str = None) -> RunTracker:
    """Shared RunTracker, created on first use at ``Config.TRACKER_DB``"""
    global _tracker_instance

    if _tracker_instance is None:
        from config import Config
        db_path = db_path or Config.TRACKER_DB
        _tracker_instance = RunTracker(db_path)

    return _tracker_instance
