"""Status application factory and a background server for the coordinator process."""

import logging
import threading
from typing import Optional

import uvicorn
from fastapi import FastAPI

from src.api.routes import router
from src.services.federation_server import CoordinatorSession

logger = logging.getLogger(__name__)


def create_status_app(session: Optional[CoordinatorSession] = None) -> FastAPI:
    app = FastAPI(
        title="Federated GLMM coordinator",
        description="Read-only status of a running federated fit",
        version="1.0.0",
    )
    app.state.session = session
    app.include_router(router)
    return app


class StatusServer:
    """Runs the status app with uvicorn on a daemon thread."""

    def __init__(self, session: CoordinatorSession, host: str, port: int):
        config = uvicorn.Config(create_status_app(session), host=host, port=port, log_level="warning")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, name="status-api", daemon=True)
        self.host = host
        self.port = port

    def start(self) -> None:
        self.thread.start()
        logger.info(f"Status API on http://{self.host}:{self.port}/session")

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=5.0)
