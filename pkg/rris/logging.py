import os
import json
from datetime import datetime
import logging

from dotenv import load_dotenv

load_dotenv()

# Diagnostics always go to stderr; stdout is reserved for results
log_level = os.environ.get("RRIS_LOG_LEVEL", "WARNING").upper()
logs_dir = os.environ.get("RRIS_LOG_DIR")

logger = logging.getLogger("rris")
logger.setLevel(log_level)
logger.propagate = False

if not logger.handlers:
    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    logger.addHandler(stream_handler)

    if logs_dir:
        # Local runs can keep a persistent log next to the artifacts
        os.makedirs(logs_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(logs_dir, "rris.log"))
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        logger.addHandler(file_handler)


def set_verbose(verbose: bool):
    """Lower the threshold to INFO for --verbose runs."""
    logger.setLevel(logging.INFO if verbose else log_level)


def _event(**fields) -> str:
    event = {"timestamp": datetime.now().isoformat()}
    event.update(fields)
    return json.dumps(event, sort_keys=True)


def log_generation_event(ref_id, strategy_counts, fallbacks):
    """Log the strategy mix produced for one reference"""
    logger.info(f"GENERATION: {_event(ref_id=ref_id, strategies=strategy_counts, fallbacks=fallbacks)}")


def log_validation_failure(ref_id, text, reason):
    """Log a negative sentence that failed re-validation"""
    logger.warning(f"VALIDATION FAILURE: {_event(ref_id=ref_id, text=text, reason=reason)}")


def log_eval_summary(report):
    """Log an evaluation report"""
    logger.info(f"EVAL: {_event(report=report)}")


def log_degenerate_metric(metric, reason):
    """Log a metric that could not be computed for this input"""
    logger.warning(f"DEGENERATE METRIC: {_event(metric=metric, reason=reason)}")


def log_gradcheck(max_rel_error, tol, passed, samples):
    """Log the outcome of a finite-difference gradient check"""
    event = _event(max_rel_error=max_rel_error, tol=tol, passed=passed, samples=samples)
    if passed:
        logger.info(f"GRADCHECK: {event}")
    else:
        logger.warning(f"GRADCHECK: {event}")
