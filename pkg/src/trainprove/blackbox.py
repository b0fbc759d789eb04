"""The black-box boundary: host a classifier over HTTP and query it batch by batch.

The verifier talks to suspects only through :func:`query_batches`, which
accepts either a remote :class:`Endpoint` or an :class:`InProcessEndpoint`
wrapping a local model. Both return the same per-batch :class:`Prediction`
objects, so the decision path does not depend on the transport.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np
import uvicorn

from trainprove.errors import QueryFailed
from trainprove.learner import MlpClassifier
from trainprove.service.app import create_app
from trainprove.service.schemas import Mode, PredictResponse
from trainprove.synth import LabeledDataset

log = logging.getLogger(__name__)

MAX_IN_FLIGHT = 4
MAX_RETRIES = 3


@dataclass
class Prediction:
    labels: np.ndarray
    logits: np.ndarray | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]


class Predictor(Protocol):
    def predict(self, inputs: np.ndarray, mode: Mode) -> Prediction: ...


class InProcessEndpoint:
    """Same query surface as a remote endpoint, backed by a local model."""

    def __init__(self, model: MlpClassifier):
        self.model = model

    def predict(self, inputs, mode: Mode = Mode.LABELS) -> Prediction:
        z = self.model.logits(np.asarray(inputs, dtype=np.float64))
        labels = np.argmax(z, axis=1).astype(np.int64)
        return Prediction(labels, z if Mode(mode) is Mode.LOGITS else None)


@dataclass(frozen=True)
class Endpoint:
    address: str  # "host:port"
    timeout: float = 10.0

    def __post_init__(self):
        host, sep, port = self.address.rpartition(":")
        if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
            raise ValueError(f"malformed endpoint address {self.address!r}; expected host:port")

    @property
    def url(self) -> str:
        return f"http://{self.address}"


class _HttpPredictor:
    def __init__(self, endpoint: Endpoint, client: httpx.Client, retries: int = MAX_RETRIES):
        self.endpoint = endpoint
        self.client = client
        self.retries = retries

    def predict_batch(self, index: int, inputs: np.ndarray, mode: Mode) -> Prediction:
        body = {"inputs": inputs.tolist(), "mode": Mode(mode).value}
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post(f"{self.endpoint.url}/predict", json=body)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.debug("batch %d attempt %d failed: %s", index, attempt, last)
                continue
            if resp.status_code == 200:
                parsed = PredictResponse.model_validate_json(resp.content)
                labels = np.asarray(parsed.labels, dtype=np.int64)
                logits = None
                if parsed.logits is not None:
                    logits = np.asarray(parsed.logits, dtype=np.float64).reshape(len(labels), -1)
                if len(labels) != len(inputs):
                    raise QueryFailed(f"batch {index}: {len(labels)} labels for {len(inputs)} inputs", index)
                return Prediction(labels, logits)
            detail = _error_text(resp)
            if resp.status_code < 500:
                raise QueryFailed(f"batch {index}: HTTP {resp.status_code}: {detail}", index)
            last = f"HTTP {resp.status_code}: {detail}"
        raise QueryFailed(f"batch {index}: gave up after {self.retries + 1} attempts ({last})", index)


def _error_text(resp: httpx.Response) -> str:
    try:
        err = resp.json()["error"]
        return f"{err['code']}: {err['message']}"
    except Exception:
        return resp.text[:200]


def batch_slices(n: int, batch_size: int) -> list[slice]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def query_batches(
    endpoint,
    data: LabeledDataset,
    batch_size: int,
    mode: Mode = Mode.LABELS,
    max_in_flight: int = MAX_IN_FLIGHT,
    client: httpx.Client | None = None,
) -> list[Prediction]:
    """Send ``data`` to ``endpoint`` in consecutive batches; results keep batch order."""
    mode = Mode(mode)
    slices = batch_slices(len(data), batch_size)
    x = data.features
    if not isinstance(endpoint, Endpoint):
        return [endpoint.predict(x[s], mode) for s in slices]

    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=endpoint.timeout)
    try:
        remote = _HttpPredictor(endpoint, client)
        workers = max(1, min(max_in_flight, MAX_IN_FLIGHT, len(slices)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(remote.predict_batch, i, x[s], mode) for i, s in enumerate(slices)]
            return [f.result() for f in futures]
    finally:
        if own_client:
            client.close()


# ---------------------------------------------------------------------------
# serving
# ---------------------------------------------------------------------------


class ServerHandle:
    """A uvicorn server running in a background thread."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, sock: socket.socket):
        self._server = server
        self._thread = thread
        self._sock = sock
        host, port = sock.getsockname()[:2]
        self.host = host
        self.port = port

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def endpoint(self, timeout: float = 10.0) -> Endpoint:
        return Endpoint(self.address, timeout)

    def shutdown(self, timeout: float = 5.0) -> None:
        self._server.should_exit = True
        self._thread.join(timeout)
        try:
            self._sock.close()
        except OSError:
            pass

    def wait(self) -> None:
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def _split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def serve(model: MlpClassifier, address: str = "127.0.0.1:0", startup_timeout: float = 10.0) -> ServerHandle:
    """Start answering ``POST /predict`` for ``model``; port 0 picks a free port.

    Raises ``OSError`` if the address cannot be bound.
    """
    host, port = _split_address(address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError:
        sock.close()
        raise
    sock.listen(128)
    config = uvicorn.Config(create_app(model), log_level="warning", access_log=False, lifespan="off")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True)
    thread.start()
    deadline = time.monotonic() + startup_timeout
    while not server.started:
        if not thread.is_alive() or time.monotonic() > deadline:
            server.should_exit = True
            sock.close()
            raise RuntimeError(f"server on {address} failed to start")
        time.sleep(0.005)
    return ServerHandle(server, thread, sock)
