import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.environ.get("BUFFERGUARD_LOG_LEVEL", "INFO").upper()

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance for a module"""
    return logging.getLogger(name)


def log_command(
    logger: logging.Logger,
    command: str,
    config_name: str,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
):
    """Log CLI command start"""
    logger.info(
        f"Command - Name: {command}, Config: {config_name}, Seed: {seed}, Out: {out_dir}"
    )


def log_command_error(
    logger: logging.Logger,
    command: str,
    error: Exception,
    exit_code: int,
):
    """Log CLI command failure"""
    logger.error(
        f"Command Error - Name: {command}, Exit: {exit_code}, Error: {str(error)}",
        exc_info=True,
    )


def log_artifact(
    logger: logging.Logger,
    operation: str,
    path: str,
    rows: Optional[int] = None,
    success: bool = True,
):
    """Log artifact write/read"""
    status = "SUCCESS" if success else "FAILED"
    logger.info(f"Artifact - {status}: {operation} {path}, Rows: {rows}")


def log_training_iteration(
    logger: logging.Logger,
    iteration: int,
    return_mean: float,
    penalty: float,
    min_vertex_margin: float,
    eps: float,
):
    """Log one PPO iteration"""
    logger.info(
        f"Train - Iter: {iteration}, Return: {return_mean:.4f}, Penalty: {penalty:.6g}, "
        f"MinMargin: {min_vertex_margin:.6g}, Eps: {eps:.6g}"
    )


def log_certificate(
    logger: logging.Logger,
    env_id: str,
    verdict: str,
    eps: float,
    failing_vertices: int,
    details: Optional[str] = None,
):
    """Log certificate outcome"""
    logger.info(
        f"Certificate - Env: {env_id}, Verdict: {verdict}, Eps: {eps:.6g}, "
        f"Failing vertices: {failing_vertices}, Details: {details}"
    )


def log_rollout_summary(
    logger: logging.Logger,
    env_id: str,
    rollouts: int,
    entered: int,
    violations: int,
    overshoots: int,
):
    """Log trajectory check summary"""
    logger.info(
        f"Rollouts - Env: {env_id}, Count: {rollouts}, Entered: {entered}, "
        f"Violations: {violations}, Overshoots: {overshoots}"
    )
