"""Read-only status routes of a running coordinator."""

import logging

from fastapi import APIRouter, HTTPException, Request

from src.models.schemas import HealthResponse, SessionStatusResponse

logger = logging.getLogger(__name__)
router = APIRouter()


@router.get("/health", response_model=HealthResponse)
def health_check():
    """Health check endpoint."""
    return HealthResponse(status="ok")


@router.get("/session", response_model=SessionStatusResponse)
def session_status(request: Request):
    """Snapshot of the coordinator session: registered sites, round, lambda, theta and trajectory."""
    session = getattr(request.app.state, "session", None)
    if session is None:
        raise HTTPException(status_code=404, detail="No coordinator session is attached")
    return session.snapshot()
