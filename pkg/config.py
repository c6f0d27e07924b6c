import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env from project root if present
env_path = Path(__file__).parent.joinpath('.env')
if env_path.exists():
	load_dotenv(env_path)
else:
	load_dotenv()  # fallback to environment

# Run registry - sqlite file next to the outputs by default
DATABASE_PATH = os.getenv('FEDSIM_DB_PATH', 'runs.db')

# Output directory for metrics, summaries, checkpoints and snapshots
OUT_DIR = os.getenv('FEDSIM_OUT_DIR', 'runs')

# Client fan-out workers when --workers is not given
WORKERS = int(os.getenv('FEDSIM_WORKERS', '1'))

# Master seed when --seed is not given and the config has none
DEFAULT_SEED = int(os.getenv('FEDSIM_SEED', '42'))

LOG_LEVEL = os.getenv('FEDSIM_LOG_LEVEL', 'INFO').upper()

# eval_loss above this aborts a run as diverged
DIVERGENCE_LIMIT = float(os.getenv('FEDSIM_DIVERGENCE_LIMIT', '1e6'))

# Accuracy targets for the rounds-to-target report written by sweeps
SWEEP_THRESHOLDS = [float(x) for x in os.getenv('FEDSIM_SWEEP_THRESHOLDS', '0.5,0.7,0.8').split(',') if x.strip()]
SWEEP_REFERENCE = os.getenv('FEDSIM_SWEEP_REFERENCE', 'fedavg')
