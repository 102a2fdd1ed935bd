"""Conservative optimistic policy search with multiple importance sampling."""
from .algo import AlgoConfig, run_coptimist, run_optimist
from .cucbvi import run_cucbvi
from .harness import load_config, run_experiment, sigma_sweep, top_policy_report

__all__ = [
    "AlgoConfig",
    "load_config",
    "run_coptimist",
    "run_cucbvi",
    "run_experiment",
    "run_optimist",
    "sigma_sweep",
    "top_policy_report",
]
__version__ = "0.1.0"
