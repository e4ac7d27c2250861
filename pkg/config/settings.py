"""Configuration settings for the federated GLMM engine."""

import os
from typing import Optional


class Settings:
    """Application settings."""

    # Logging configuration
    LOG_LEVEL: str = os.getenv("FEDGLMM_LOG", "INFO")
    LOG_FORMAT: Optional[str] = os.getenv("FEDGLMM_LOG_FORMAT", None)

    # Federation transport
    ROUND_TIMEOUT: float = float(os.getenv("FEDGLMM_ROUND_TIMEOUT", "300"))
    MAX_FRAME_BYTES: int = int(os.getenv("FEDGLMM_MAX_FRAME_BYTES", str(64 * 1024 * 1024)))
    CONNECT_RETRIES: int = int(os.getenv("FEDGLMM_CONNECT_RETRIES", "3"))
    RETRY_BACKOFF: float = float(os.getenv("FEDGLMM_RETRY_BACKOFF", "0.5"))
    PROTOCOL_VERSION: int = 1

    # Coordinator status API
    STATUS_HOST: str = os.getenv("FEDGLMM_STATUS_HOST", "127.0.0.1")
    STATUS_PORT: int = int(os.getenv("FEDGLMM_STATUS_PORT", "0"))

    # Reproducibility
    DEFAULT_SEED: int = int(os.getenv("FEDGLMM_SEED", "20211"))
    SPLIT_RATIO: float = float(os.getenv("FEDGLMM_SPLIT_RATIO", "0.7"))

    # Model fitting
    THETA_TOL: float = float(os.getenv("FEDGLMM_THETA_TOL", "1e-3"))
    MU_TOL: float = float(os.getenv("FEDGLMM_MU_TOL", "1e-6"))
    MAX_OUTER_ITERS: int = int(os.getenv("FEDGLMM_MAX_OUTER_ITERS", "200"))
    LAMBDA_GRID: list = [float(v) for v in os.getenv("FEDGLMM_LAMBDA_GRID", "0,1,2,3,4,5,6,7,8,9,10").split(",")]


settings = Settings()
