"""Site side of the federation: answers COMPUTE requests from local rows only."""

import logging
import socket
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from config.settings import settings
from src.models.domain import ApproximationMethod, MethodKind, SiteData
from src.models.schemas import (
    AbortMessage, ByeMessage, ComputeMessage, ConfigMessage, FitResult, ResultMessage, SummaryMessage, Theta,
)
from src.pipelines.coordinator import split_site
from src.services.model_core import ModelError
from src.services.site_engine import SiteEngine
from src.services.wire import (
    Channel, ConnectionClosedError, FederationError, FrameCapture, SessionAbortedError, hello_for,
)

logger = logging.getLogger(__name__)


@dataclass
class SiteSession:
    """What a site saw during one session."""
    site_id: int
    rounds_answered: int = 0
    configs_received: int = 0
    result: Optional[FitResult] = None
    abort_reason: Optional[str] = None
    finished: bool = False
    events: List[str] = field(default_factory=list)


def connect_with_retry(host: str, port: int, retries: Optional[int] = None, backoff: Optional[float] = None,
                       timeout: float = 10.0) -> socket.socket:
    """Open a TCP connection, retrying with exponential backoff.

    Raises:
        ConnectionClosedError: If every attempt fails
    """
    retries = settings.CONNECT_RETRIES if retries is None else retries
    backoff = settings.RETRY_BACKOFF if backoff is None else backoff
    last_error: Optional[Exception] = None
    for attempt in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return sock
        except OSError as e:
            last_error = e
            wait = backoff * (2 ** attempt)
            logger.warning(f"Connection to {host}:{port} failed (attempt {attempt + 1}/{retries}): {e}")
            if attempt + 1 < retries:
                time.sleep(wait)
    raise ConnectionClosedError(f"Could not reach coordinator at {host}:{port} after {retries} attempts: {last_error}")


class SiteAgent:
    """Holds one site's data and engines for the lifetime of a session."""

    def __init__(self, data: SiteData, warm_start: bool = True):
        self.data = data
        self.warm_start = warm_start
        self._split_key = None
        self._engines: Dict[str, SiteEngine] = {}

    def configure(self, msg: ConfigMessage) -> None:
        method = ApproximationMethod(kind=MethodKind(msg.method), gh_order=msg.gh_order)
        key = (msg.split_ratio, msg.split_seed)
        if key != self._split_key:
            train, validation = split_site(self.data, msg.split_ratio, msg.split_seed)
            self._engines = {"train": SiteEngine(train, method, warm_start=self.warm_start)}
            if validation is not None:
                self._engines["validation"] = SiteEngine(validation, method, warm_start=self.warm_start)
            self._split_key = key
        for engine in self._engines.values():
            engine.configure(method, msg.lambda_value, msg.penalize_intercept)

    def compute(self, msg: ComputeMessage) -> SummaryMessage:
        if not self._engines:
            raise FederationError("COMPUTE arrived before CONFIG")
        engine = self._engines.get(msg.partition)
        if engine is None:
            raise FederationError(f"Site {self.data.site_id} holds no {msg.partition} rows")
        summary = engine.summarize(Theta(beta=msg.beta, tau=msg.tau))
        return SummaryMessage(round=msg.round, payload=summary)


def run_site(
    data: SiteData,
    host: str = "127.0.0.1",
    port: int = 7610,
    warm_start: bool = True,
    retries: Optional[int] = None,
    backoff: Optional[float] = None,
    capture_path: Optional[str] = None,
) -> SiteSession:
    """Register with a coordinator and serve rounds until BYE or ABORT.

    Args:
        data: The site's rows; they never leave this process
        host: Coordinator host
        port: Coordinator port
        warm_start: Start each mode search at the previous mu_hat
        retries: Connection attempts before giving up
        backoff: Base delay in seconds, doubled after each failed attempt
        capture_path: Optional transcript file of every frame

    Returns:
        SiteSession describing the session

    Raises:
        SessionAbortedError: If the coordinator aborted the session
        FederationError: On connection loss or protocol violations
    """
    session = SiteSession(site_id=data.site_id)
    agent = SiteAgent(data, warm_start=warm_start)
    channel = Channel(connect_with_retry(host, port, retries, backoff), "coordinator", FrameCapture(capture_path))
    try:
        channel.send(hello_for(data.site_id, data.n_i, data.p))
        logger.info(f"Site {data.site_id}: registered with {host}:{port} (n_i={data.n_i}, p={data.p})")
        while True:
            msg = channel.receive()
            if isinstance(msg, ConfigMessage):
                agent.configure(msg)
                session.configs_received += 1
                session.events.append(f"CONFIG lambda={msg.lambda_value:g}")
            elif isinstance(msg, ComputeMessage):
                try:
                    reply = agent.compute(msg)
                except (ModelError, ValueError, FederationError) as e:
                    reason = getattr(e, "message", str(e))
                    logger.error(f"Site {data.site_id}: round {msg.round} failed: {reason}")
                    channel.send(AbortMessage(reason=f"site {data.site_id}: {reason}"))
                    raise
                channel.send(reply)
                session.rounds_answered += 1
            elif isinstance(msg, ResultMessage):
                session.result = msg.result
                session.events.append("RESULT")
            elif isinstance(msg, ByeMessage):
                session.finished = True
                session.events.append("BYE")
                logger.info(f"Site {data.site_id}: session finished after {session.rounds_answered} rounds")
                return session
            elif isinstance(msg, AbortMessage):
                session.abort_reason = msg.reason
                session.events.append("ABORT")
                logger.error(f"Site {data.site_id}: coordinator aborted: {msg.reason}")
                raise SessionAbortedError(msg.reason)
            else:
                raise FederationError(f"Unexpected {msg.type} from coordinator")
    except KeyboardInterrupt:
        try:
            channel.send(AbortMessage(reason=f"site {data.site_id} interrupted"))
        except FederationError:
            pass
        raise
    finally:
        channel.close()
