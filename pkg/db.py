"""
Run registry for fedsim.
Schema: runs (one row per simulation, status running/finished/failed), round_metrics (per-round series).
"""
import sqlite3
from contextlib import contextmanager
from config import DATABASE_PATH


@contextmanager
def get_db(db_path=None):
    conn = sqlite3.connect(db_path or DATABASE_PATH)
    conn.row_factory = sqlite3.Row
    try:
        yield conn
        conn.commit()
    finally:
        conn.close()


def init_db(db_path=None):
    with get_db(db_path) as conn:
        c = conn.cursor()
        c.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                name TEXT,
                strategy TEXT,
                quant_mode TEXT,
                seed INTEGER,
                status TEXT DEFAULT 'running',
                tail_accuracy REAL,
                final_train_loss REAL,
                wall_time REAL,
                out_dir TEXT,
                error TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)
        c.execute("""
            CREATE TABLE IF NOT EXISTS round_metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                round INTEGER NOT NULL,
                train_loss REAL,
                eval_loss REAL,
                eval_accuracy REAL,
                grad_norm_sq REAL,
                r_norm REAL,
                table_bytes INTEGER,
                participants TEXT,
                FOREIGN KEY (run_id) REFERENCES runs(id)
            )
        """)
        c.execute("CREATE INDEX IF NOT EXISTS idx_round_metrics_run ON round_metrics(run_id, round)")


def insert_run(name, strategy, quant_mode, seed, out_dir, db_path=None):
    with get_db(db_path) as conn:
        c = conn.cursor()
        c.execute(
            "INSERT INTO runs (name, strategy, quant_mode, seed, out_dir) VALUES (?, ?, ?, ?, ?)",
            (name, strategy, quant_mode, seed, str(out_dir) if out_dir is not None else None)
        )
        return c.lastrowid


def finish_run(run_id, status, tail_accuracy=None, final_train_loss=None, wall_time=None, error=None,
               db_path=None):
    with get_db(db_path) as conn:
        conn.execute(
            "UPDATE runs SET status = ?, tail_accuracy = ?, final_train_loss = ?, wall_time = ?, error = ? "
            "WHERE id = ?",
            (status, tail_accuracy, final_train_loss, wall_time, error, run_id)
        )


def record_round_metrics(run_id, metrics, db_path=None):
    """Bulk insert one row per RoundMetrics."""
    rows = [
        (run_id, m.round, m.train_loss, m.eval_loss, m.eval_accuracy, m.grad_norm_sq, m.r_norm,
         m.table_bytes, ";".join(str(p) for p in m.participants))
        for m in metrics
    ]
    with get_db(db_path) as conn:
        conn.executemany("""
            INSERT INTO round_metrics (
                run_id, round, train_loss, eval_loss, eval_accuracy, grad_norm_sq, r_norm,
                table_bytes, participants
            ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, rows)


def list_runs(limit=20, db_path=None):
    with get_db(db_path) as conn:
        c = conn.cursor()
        c.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,))
        return [dict(row) for row in c.fetchall()]


def get_run(run_id, db_path=None):
    with get_db(db_path) as conn:
        c = conn.cursor()
        c.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = c.fetchone()
        return dict(row) if row else None


def get_round_metrics(run_id, db_path=None):
    with get_db(db_path) as conn:
        c = conn.cursor()
        c.execute("SELECT * FROM round_metrics WHERE run_id = ? ORDER BY round", (run_id,))
        return [dict(row) for row in c.fetchall()]
