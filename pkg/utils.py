"""
Utility functions for reranking-laws: settings, logging, errors, run log
"""

import os
import yaml
import logging
import json
from typing import Any, Dict, List, Optional
from datetime import datetime

LOGGER_NAME = 'reranking_laws'

DEFAULT_SETTINGS: Dict[str, Any] = {
    'logging': {
        'level': 'WARNING',
        'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        'file': None,
    },
    'simulation': {
        'work_budget': 5_000_000_000,
        'chunk_size': 65536,
        'ci_level': 0.99,
        'threads': 1,
    },
    'empirical': {
        'ci_level': 0.99,
    },
    'fit': {
        'max_iterations': 500,
        'threads': 1,
    },
    'predict': {
        'n_cap': 100_000,
    },
    'run_log': {
        'enabled': False,
        'file': 'reranking_laws_runs.jsonl',
    },
}


class RerankingLawError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(RerankingLawError, ValueError):
    """An argument is outside the domain of the operation."""


class ResourceLimitError(RerankingLawError):
    """A request exceeds a configured or structural size guard."""


class ConvergenceError(RerankingLawError):
    """An internal root search failed to bracket or converge."""


class DatasetParseError(RerankingLawError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)


class DatasetValidationError(RerankingLawError):
    """Records are well-formed but lack what an operation needs."""


class FitError(RerankingLawError):
    """The least-squares fit could not be started or completed."""


class UnderdeterminedFitError(FitError):
    """Too few usable curve points to fit the requested parameters."""


def load_config(config_path: str = "config.yaml") -> Dict:
    """Load configuration from YAML file"""
    if not os.path.exists(config_path):
        # Return default config if file doesn't exist
        return {'settings': json.loads(json.dumps(DEFAULT_SETTINGS))}

    with open(config_path, 'r') as f:
        data = yaml.safe_load(f)
        return data if isinstance(data, dict) else {}


def get_setting(config: Dict[str, Any], path: List[str], default: Any) -> Any:
    """Walk `path` under config; fall back to the built-in default, then `default`."""
    for root in (config, {'settings': DEFAULT_SETTINGS}):
        cur: Any = root
        found = True
        for p in path:
            if isinstance(cur, dict) and p in cur and cur[p] is not None:
                cur = cur[p]
            else:
                found = False
                break
        if found:
            return cur
    return default


def get_bool_setting(config: Dict[str, Any], path: List[str], default: bool) -> bool:
    val = get_setting(config, path, default)
    if isinstance(val, str):
        return val.strip().lower() in {"1", "true", "t", "yes", "y", "on"}
    return bool(val)


def setup_logging(config: Optional[Dict[str, Any]] = None, level: Optional[str] = None) -> logging.Logger:
    """Setup logging configuration from settings.

    Log records go to stderr (and optionally a file); stdout stays reserved
    for CSV/JSON data.
    """
    config = config or {}
    log_level = level or get_setting(config, ['settings', 'logging', 'level'], 'WARNING')
    log_format = get_setting(config, ['settings', 'logging', 'format'],
                             '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    log_file = get_setting(config, ['settings', 'logging', 'file'], None)

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logger = logging.getLogger(LOGGER_NAME)
    for h in list(logger.handlers):
        logger.removeHandler(h)
    formatter = logging.Formatter(log_format)
    for h in handlers:
        h.setFormatter(formatter)
        logger.addHandler(h)
    logger.setLevel(getattr(logging, str(log_level).upper(), logging.WARNING))
    logger.propagate = False
    return logger


class RunLogger:
    """Append one JSON line per completed command, for reproducing artifacts"""

    def __init__(self, log_file: str = "reranking_laws_runs.jsonl"):
        self.log_file = log_file
        self.logger = logging.getLogger(f'{LOGGER_NAME}.runs')
        self.logger.propagate = False
        for h in list(self.logger.handlers):
            self.logger.removeHandler(h)
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter('%(message)s'))
        self.logger.addHandler(handler)
        self.logger.setLevel(logging.INFO)

    def log_command(self, command: str, arguments: Dict[str, Any],
                    output: Optional[str], seed: Optional[int] = None):
        """Log a finished subcommand"""
        self.logger.info(json.dumps({
            'event': 'command_finished',
            'timestamp': datetime.now().isoformat(),
            'command': command,
            'arguments': arguments,
            'output': output,
            'seed': seed,
        }, default=str, sort_keys=True))

    def log_failure(self, command: str, error: BaseException):
        """Log a command that ended with an error"""
        self.logger.info(json.dumps({
            'event': 'command_failed',
            'timestamp': datetime.now().isoformat(),
            'command': command,
            'error': type(error).__name__,
            'message': str(error),
        }, sort_keys=True))

    def close(self):
        for h in list(self.logger.handlers):
            h.close()
            self.logger.removeHandler(h)


def get_run_logger(config: Dict[str, Any]) -> Optional[RunLogger]:
    """Factory for the run log based on settings.run_log."""
    if not get_bool_setting(config, ['settings', 'run_log', 'enabled'], False):
        return None
    path = get_setting(config, ['settings', 'run_log', 'file'], 'reranking_laws_runs.jsonl')
    return RunLogger(str(path))
