"""Line-delimited JSON wire protocol serving the environment to other processes.

Strict request/response over standard streams or TCP: handshake, reset, step,
close in; handshake_ack, state, error (plus a bare ack for close) out. One
connection drives exactly one environment instance.
"""
from __future__ import annotations

import io
import json
import math
import socketserver
import sys
from typing import Optional

import numpy as np

from .env import EnvConfig, EnvError, NavEnv

PROTOCOL_VERSION = "1"

REQUEST_TYPES = ("handshake", "reset", "step", "close")
RESPONSE_TYPES = ("handshake_ack", "state", "error", "ack")


class ProtocolError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def encode_message(msg: dict) -> str:
    """One JSON object per line, newline terminated, insertion order kept."""
    return json.dumps(msg, separators=(",", ":")) + "\n"


def decode_message(line: str) -> dict:
    """Parse and validate one record; unknown fields ride along untouched."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError("bad_request", f"not valid JSON: {e}") from None
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise ProtocolError("bad_request", "message must be an object with a string 'type'")
    t = msg["type"]
    if t not in REQUEST_TYPES and t not in RESPONSE_TYPES:
        raise ProtocolError("bad_request", f"unknown message type {t!r}")
    if t == "reset" and "seed" in msg and msg["seed"] is not None:
        if not isinstance(msg["seed"], int):
            raise ProtocolError("bad_request", "seed must be an integer")
    if t == "step":
        a = msg.get("action")
        if (not isinstance(a, (list, tuple)) or len(a) != 2
                or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in a)):
            raise ProtocolError("bad_request", "action must be two finite numbers")
    return msg


# ---------------------------------------------------------------------------
# server side


def _state_message(observation, reward: float, done: bool, truncated: bool, info: dict) -> dict:
    return {
        "type": "state",
        "observation": [float(v) for v in np.asarray(observation.vector, dtype=float)],
        "reward": float(reward),
        "done": bool(done),
        "truncated": bool(truncated),
        "info": info,
    }


def _handshake_ack(env: NavEnv) -> dict:
    meta = env.scenario_meta()
    return {
        "type": "handshake_ack",
        "protocol_version": PROTOCOL_VERSION,
        "observation_length": meta["observation_length"],
        "action_bounds": env.action_bounds,
        "scenario_meta": meta,
    }


def handle_request(env: NavEnv, msg: dict) -> dict:
    """Map one request to its single response. Never raises for contract
    misuse; those come back as error responses and the session continues."""
    t = msg["type"]
    try:
        if t == "handshake":
            return _handshake_ack(env)
        if t == "reset":
            obs = env.reset(msg.get("seed"))
            return _state_message(obs, 0.0, False, False, {"outcome": None})
        if t == "step":
            r = env.step(np.asarray(msg["action"], dtype=float))
            return _state_message(r.observation, r.reward, r.done, r.truncated, r.info)
        if t == "close":
            return {"type": "ack"}
        return {"type": "error", "code": "bad_request", "message": f"cannot serve {t!r}"}
    except EnvError as e:
        return {"type": "error", "code": "bad_state", "message": str(e)}
    except Exception as e:  # noqa: BLE001 - a broken episode must not kill the stream
        return {"type": "error", "code": "internal", "message": repr(e)}


def serve_connection(env: NavEnv, rin, wout) -> None:
    """Drive one environment over a line stream until close or EOF."""
    text_out = isinstance(wout, io.TextIOBase)

    def send(reply: dict):
        data = encode_message(reply)
        wout.write(data if text_out else data.encode("utf-8"))
        wout.flush()

    for raw in rin:
        line = (raw if isinstance(raw, str) else raw.decode("utf-8")).strip()
        if not line:
            continue
        closing = False
        try:
            msg = decode_message(line)
            closing = msg["type"] == "close"
            reply = handle_request(env, msg)
        except ProtocolError as e:
            reply = {"type": "error", "code": e.code, "message": str(e)}
        send(reply)
        if closing:
            return


def serve_stdio(config: Optional[EnvConfig] = None) -> None:
    serve_connection(NavEnv(config), sys.stdin, sys.stdout)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        env = NavEnv(self.server.env_config)  # type: ignore[attr-defined]
        serve_connection(env, self.rfile, self.wfile)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(config: Optional[EnvConfig], host: str = "127.0.0.1", port: int = 0):
    """Blocking TCP server, one environment per connection. Returns only on
    shutdown; raises OSError if the port is taken."""
    server = _Server((host, port), _Handler)
    server.env_config = config  # type: ignore[attr-defined]
    return server
