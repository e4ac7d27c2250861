"""Coordinator side of the federation: registration, rounds and teardown over TCP."""

import logging
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional

from config.settings import settings
from src.models.domain import ApproximationMethod
from src.models.schemas import (
    AbortMessage, ByeMessage, ComputeMessage, ConfigMessage, ConvergenceConfig, FitResult, HelloMessage,
    ModelConfig, ResultMessage, SessionStatusResponse, SiteSummary, SummaryMessage, Theta, TrajectoryPoint,
)
from src.pipelines.coordinator import fit, split_sizes
from src.services.wire import (
    Channel, FederationError, FrameCapture, RegistrationError, RoundTimeoutError,
    SessionAbortedError, VersionMismatchError,
)

logger = logging.getLogger(__name__)


class CoordinatorSession:
    """Thread-safe snapshot of a coordinator run, read by the status API."""

    def __init__(self, expected_sites: int):
        self._lock = threading.Lock()
        self.expected_sites = expected_sites
        self.state = "registering"
        self.registered: List[int] = []
        self.round = 0
        self.lambda_value: Optional[float] = None
        self.theta: Optional[Theta] = None
        self.trajectory: List[TrajectoryPoint] = []
        self.message: Optional[str] = None
        self.port: Optional[int] = None

    def register(self, site_id: int) -> None:
        with self._lock:
            self.registered.append(site_id)

    def set_state(self, state: str, message: Optional[str] = None) -> None:
        with self._lock:
            self.state = state
            self.message = message

    def record_round(self, round_index: int) -> None:
        with self._lock:
            self.round = round_index

    def record_iteration(self, lam: float, theta: Theta, point: TrajectoryPoint) -> None:
        with self._lock:
            if self.lambda_value != lam:
                self.trajectory = []
            self.lambda_value = lam
            self.theta = theta
            self.trajectory.append(point)

    def snapshot(self) -> SessionStatusResponse:
        with self._lock:
            return SessionStatusResponse(
                state=self.state,
                expected_sites=self.expected_sites,
                registered_sites=sorted(self.registered),
                round=self.round,
                lambda_value=self.lambda_value,
                theta=self.theta,
                trajectory=list(self.trajectory),
                message=self.message,
            )


class NetworkTransport:
    """Summary provider backed by registered remote site agents."""

    def __init__(
        self,
        channels: Dict[int, Channel],
        hellos: Dict[int, HelloMessage],
        model_cfg: ModelConfig,
        round_timeout: float,
        session: Optional[CoordinatorSession] = None,
    ):
        self.channels = channels
        self.p = next(iter(hellos.values())).p
        self.model_cfg = model_cfg
        self.round_timeout = round_timeout
        self.session = session
        self.round = 0
        self._sizes = {site_id: split_sizes(h.n_i, model_cfg.split_ratio) for site_id, h in hellos.items()}
        self._pool = ThreadPoolExecutor(max_workers=len(channels), thread_name_prefix="site-recv")

    def site_ids(self) -> List[int]:
        return sorted(self.channels)

    def observations(self, partition: str = "train") -> int:
        index = {"train": 0, "validation": 1}[partition]
        return sum(sizes[index] for sizes in self._sizes.values())

    def configure(self, method: ApproximationMethod, lam: float, penalize_intercept: bool) -> None:
        msg = ConfigMessage(
            method=method.kind.value,
            gh_order=method.order,
            lambda_value=lam,
            penalize_intercept=penalize_intercept,
            split_ratio=self.model_cfg.split_ratio,
            split_seed=self.model_cfg.split_seed,
        )
        for site_id in self.site_ids():
            self.channels[site_id].send(msg)

    def collect(self, theta: Theta, partition: str = "train") -> List[SiteSummary]:
        index = 0 if partition == "train" else 1
        targets = [site_id for site_id in self.site_ids() if self._sizes[site_id][index] > 0]
        round_index = self.round
        self.round += 1
        if self.session is not None:
            self.session.record_round(round_index)

        msg = ComputeMessage(round=round_index, beta=list(theta.beta), tau=theta.tau, partition=partition)
        for site_id in targets:
            self.channels[site_id].send(msg)

        futures = {site_id: self._pool.submit(self._await_summary, site_id, round_index) for site_id in targets}
        summaries = []
        for site_id in targets:
            summaries.append(futures[site_id].result())
        return summaries

    def _await_summary(self, site_id: int, round_index: int) -> SiteSummary:
        msg = self.channels[site_id].receive(timeout=self.round_timeout)
        if isinstance(msg, AbortMessage):
            raise SessionAbortedError(f"Site {site_id} aborted: {msg.reason}")
        if not isinstance(msg, SummaryMessage):
            raise FederationError(f"Site {site_id} sent {msg.type} while a SUMMARY was expected")
        if msg.round != round_index or msg.payload.site_id != site_id:
            raise FederationError(
                f"Site {site_id} answered round {msg.round} as site {msg.payload.site_id}, expected round {round_index}"
            )
        return msg.payload

    def broadcast(self, msg) -> None:
        """Best-effort send to every open channel."""
        for site_id, channel in self.channels.items():
            if channel.closed:
                continue
            try:
                channel.send(msg)
            except FederationError as e:
                logger.warning(f"Could not reach site {site_id}: {e.message}")

    def close(self) -> None:
        self._pool.shutdown(wait=False)
        for channel in self.channels.values():
            channel.close()


def _register(
    server: socket.socket,
    expected_sites: int,
    timeout: float,
    capture: FrameCapture,
    session: CoordinatorSession,
):
    channels: Dict[int, Channel] = {}
    hellos: Dict[int, HelloMessage] = {}
    deadline = time.monotonic() + timeout
    while len(channels) < expected_sites:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            for channel in channels.values():
                try:
                    channel.send(AbortMessage(reason="registration timed out"))
                except FederationError:
                    pass
                channel.close()
            raise RoundTimeoutError(f"Only {len(channels)} of {expected_sites} sites registered within {timeout} s")
        server.settimeout(remaining)
        try:
            conn, addr = server.accept()
        except socket.timeout:
            continue
        channel = Channel(conn, f"{addr[0]}:{addr[1]}", capture)
        try:
            hello = channel.receive(timeout=remaining)
            if not isinstance(hello, HelloMessage):
                raise RegistrationError(f"Expected HELLO, got {hello.type}")
            if hello.site_id in channels:
                raise RegistrationError(f"Duplicate site_id {hello.site_id}")
            if hellos and hello.p != next(iter(hellos.values())).p:
                raise RegistrationError(f"Site {hello.site_id} has p={hello.p}, others have p={next(iter(hellos.values())).p}")
        except (RegistrationError, VersionMismatchError) as e:
            logger.warning(f"Rejecting connection from {channel.peer}: {e.message}")
            try:
                channel.send(AbortMessage(reason=e.message))
            except FederationError:
                pass
            channel.close()
            continue
        except FederationError as e:
            logger.warning(f"Dropping connection from {channel.peer}: {e.message}")
            channel.close()
            continue
        channel.peer = f"site-{hello.site_id}"
        channels[hello.site_id] = channel
        hellos[hello.site_id] = hello
        session.register(hello.site_id)
        logger.info(f"Registered site {hello.site_id} (n_i={hello.n_i}, p={hello.p}), {len(channels)}/{expected_sites}")
    return channels, hellos


def run_coordinator(
    model_cfg: ModelConfig,
    cfg: ConvergenceConfig,
    expected_sites: int,
    host: str = "127.0.0.1",
    port: int = 7610,
    round_timeout: Optional[float] = None,
    capture_path: Optional[str] = None,
    session: Optional[CoordinatorSession] = None,
    on_listening: Optional[Callable[[int], None]] = None,
) -> FitResult:
    """Accept exactly expected_sites agents, fit, and deliver RESULT then BYE.

    Args:
        model_cfg: Approximation, lambda grid and split settings
        cfg: Convergence settings
        expected_sites: Number of HELLOs to wait for before the first round
        host: Interface to bind
        port: Port to bind (0 picks a free one)
        round_timeout: Seconds to wait for registration and for each round
        capture_path: Optional transcript file of every frame
        session: Status snapshot updated as the run progresses
        on_listening: Called with the bound port once the socket listens

    Returns:
        The fitted FitResult, also sent to every site

    Raises:
        FederationError: On timeouts, disconnects or protocol violations (survivors get ABORT)
        FitFailedError: If no lambda candidate converged (sites get ABORT)
    """
    round_timeout = settings.ROUND_TIMEOUT if round_timeout is None else round_timeout
    session = session or CoordinatorSession(expected_sites)
    capture = FrameCapture(capture_path)

    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(expected_sites)
    bound_port = server.getsockname()[1]
    session.port = bound_port
    logger.info(f"Coordinator listening on {host}:{bound_port}, waiting for {expected_sites} sites")
    if on_listening is not None:
        on_listening(bound_port)

    transport: Optional[NetworkTransport] = None
    try:
        try:
            channels, hellos = _register(server, expected_sites, round_timeout, capture, session)
        finally:
            # Late connections are refused once registration closes
            server.close()

        transport = NetworkTransport(channels, hellos, model_cfg, round_timeout, session)
        session.set_state("fitting")
        result = fit(transport, model_cfg, cfg, on_iteration=session.record_iteration)
        transport.broadcast(ResultMessage(result=result))
        transport.broadcast(ByeMessage())
        session.set_state("finished")
        logger.info(f"Fit finished after {transport.round} rounds, lambda={result.lambda_hat:g}")
        return result
    except KeyboardInterrupt:
        session.set_state("aborted", "interrupted")
        if transport is not None:
            transport.broadcast(AbortMessage(reason="coordinator interrupted"))
        raise
    except Exception as e:
        reason = getattr(e, "message", str(e))
        session.set_state("aborted", reason)
        logger.error(f"Session aborted: {reason}")
        if transport is not None:
            transport.broadcast(AbortMessage(reason=reason))
        raise
    finally:
        if transport is not None:
            transport.close()
