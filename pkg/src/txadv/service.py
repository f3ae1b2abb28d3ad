"""Score the target classifier behind a socket, plus the matching client.

Wire format, one JSON object per line (UTF-8, LF):

    request   {"id": <int>, "mcc": [<int>...], "amount": [<float>...]}
    response  {"id": <int>, "label": <int>}
              {"id": <int>, "label": <int>, "proba": [<float>...]}   (proba mode)
    error     {"id": <int>, "error": "bad_request" | "bad_token"}

Amounts travel raw; the server applies its own discretizer, so a client
never learns the target's bin edges. In label mode the response never
carries probabilities. JSON float round-tripping is exact for IEEE doubles,
so remote scores match local inference bit for bit.
"""
from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from .validation import ValidationError

ERR_BAD_REQUEST = "bad_request"
ERR_BAD_TOKEN = "bad_token"


@dataclass(frozen=True)
class ScoreResponse:
    id: int
    label: int
    proba: tuple | None = None


class ScoringError(RuntimeError):
    """Server answered with an error code."""

    def __init__(self, request_id, code):
        super().__init__(f"request {request_id} failed: {code}")
        self.request_id = request_id
        self.code = code


def _score_line(model, mode, line):
    request_id = -1
    try:
        request = json.loads(line)
        request_id = int(request.get("id", -1))
        mcc = request["mcc"]
        amount = request["amount"]
        if not isinstance(mcc, list) or not isinstance(amount, list):
            raise ValueError("mcc and amount must be arrays")
        if len(mcc) != len(amount) or not mcc:
            raise ValueError("mcc and amount must be equal-length and non-empty")
        tokens = np.asarray(mcc, dtype=np.intp)
        amounts = np.asarray(amount, dtype=np.float64)
        if not np.all(np.isfinite(amounts)) or np.any(amounts <= 0.0):
            raise ValueError("amounts must be positive and finite")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, OverflowError):
        return {"id": request_id, "error": ERR_BAD_REQUEST}
    if tokens.min() < 0 or tokens.max() >= model.vocab_size_:
        return {"id": request_id, "error": ERR_BAD_TOKEN}
    probs = model.predict_proba_arrays([(tokens, amounts)])[0]
    label = int(model.classes_[int(np.argmax(probs))])
    response = {"id": request_id, "label": label}
    if mode == "proba":
        response["proba"] = probs.tolist()
    return response


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            reply = _score_line(self.server.model, self.server.mode, line)
            self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
            self.wfile.flush()


class ScoringServer(socketserver.ThreadingTCPServer):
    """Threaded scorer; the model is immutable and shared across handlers."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, model, address=("127.0.0.1", 0), mode="label"):
        if mode not in ("label", "proba"):
            raise ValidationError(f"unknown scoring mode {mode!r}")
        super().__init__(address, _Handler)
        self.model = model
        self.mode = mode


def serve(model, host="127.0.0.1", port=0, mode="label", background=True):
    """Start a scoring server; returns it with `server_address` bound.

    With ``background=True`` the accept loop runs on a daemon thread and the
    caller shuts it down via ``server.shutdown(); server.server_close()``.
    """
    server = ScoringServer(model, (host, port), mode=mode)
    if background:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
    return server


class ScoringClient:
    """Line-oriented client; counts every query it sends.

    Transport failures surface as ConnectionError; there is no retry policy,
    the caller decides what a lost connection means.
    """

    def __init__(self, host, port, timeout=30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._reader = self._sock.makefile("rb")
        self._next_id = 0
        self.query_count = 0

    def query(self, tokens, amounts) -> ScoreResponse:
        request = {
            "id": self._next_id,
            "mcc": [int(t) for t in tokens],
            "amount": [float(a) for a in amounts],
        }
        self._next_id += 1
        self.query_count += 1
        try:
            self._sock.sendall((json.dumps(request) + "\n").encode("utf-8"))
            line = self._reader.readline()
        except OSError as exc:
            raise ConnectionError(f"scoring connection lost: {exc}") from exc
        if not line:
            raise ConnectionError("scoring server closed the connection")
        reply = json.loads(line.decode("utf-8"))
        if "error" in reply:
            raise ScoringError(reply.get("id"), reply["error"])
        proba = tuple(reply["proba"]) if "proba" in reply else None
        return ScoreResponse(id=int(reply["id"]), label=int(reply["label"]), proba=proba)

    def query_sequence(self, seq) -> ScoreResponse:
        return self.query(seq.tokens, seq.amounts)

    def close(self):
        try:
            self._reader.close()
        finally:
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
