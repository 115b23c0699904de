"""
The three servers workers communicate through.

- ParamServer: versioned single-slot, last-writer-wins store of a ParamBlob
  (one instance for policy parameters, one for model parameters).
- DataBufferServer: append/drain queue of trajectories with a monotone push
  counter that drives the global stop criterion.

All operations are safe under concurrent callers. Blobs are immutable, so a
pull hands out the stored object without copying. No server ever touches
another server's lock.
"""

from __future__ import annotations

import logging
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Deque, List, Mapping, Optional, Tuple

from .envs import Trajectory
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParamBlob:
    """Serialized parameters plus small numeric annotations, checksummed at creation."""

    kind: str
    payload: bytes
    info: Tuple[Tuple[str, float], ...] = ()
    checksum: int = field(init=False)

    def __post_init__(self):
        if not isinstance(self.payload, (bytes, bytearray)):
            raise InvalidArgumentError("blob payload must be bytes")
        object.__setattr__(self, "payload", bytes(self.payload))
        object.__setattr__(self, "checksum", zlib.crc32(self.payload))

    @classmethod
    def create(cls, kind: str, payload: bytes, info: Optional[Mapping[str, float]] = None) -> "ParamBlob":
        return cls(kind=kind, payload=payload, info=tuple(sorted((info or {}).items())))

    def verify(self) -> bool:
        return zlib.crc32(self.payload) == self.checksum

    def get(self, key: str, default: float = 0.0) -> float:
        return dict(self.info).get(key, default)


class ParamServer:
    """Latest-only parameter slot; version 0 means nothing was pushed yet."""

    def __init__(self, name: str, kind: Optional[str] = None, audit: bool = False):
        self.name = name
        self.kind = kind
        self.audit = audit
        self._lock = threading.Lock()
        self._slot: Optional[Tuple[ParamBlob, int]] = None
        self._version = 0

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    def push(self, blob: ParamBlob) -> int:
        if not isinstance(blob, ParamBlob) or not blob.verify():
            raise InvalidArgumentError(f"{self.name}: malformed parameter blob")
        if self.kind is not None and blob.kind != self.kind:
            raise InvalidArgumentError(f"{self.name}: expected a '{self.kind}' blob, got '{blob.kind}'")
        with self._lock:
            self._version += 1
            version = self._version
            self._slot = (blob, version)
        if self.audit:
            logger.info("audit %s push version=%d bytes=%d", self.name, version, len(blob.payload))
        return version

    def pull(self) -> Optional[Tuple[ParamBlob, int]]:
        with self._lock:
            slot = self._slot
        if self.audit:
            logger.info("audit %s pull version=%d", self.name, slot[1] if slot else 0)
        return slot


class DataBufferServer:
    """FIFO of pushed trajectories; `drain` empties it in push order."""

    def __init__(self, name: str = "data_buffer", audit: bool = False):
        self.name = name
        self.audit = audit
        self._lock = threading.Lock()
        self._pending: Deque[Trajectory] = deque()
        self._total = 0
        self._listeners: List[Callable[[Trajectory, int], None]] = []

    @property
    def total_pushed(self) -> int:
        with self._lock:
            return self._total

    @property
    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def subscribe(self, listener: Callable[[Trajectory, int], None]) -> None:
        """Call `listener(trajectory, total_pushed)` after every push, outside the lock."""
        self._listeners.append(listener)

    def push(self, trajectory: Trajectory) -> int:
        if not isinstance(trajectory, Trajectory):
            raise InvalidArgumentError(f"{self.name}: expected a Trajectory, got {type(trajectory).__name__}")
        trajectory.validate()
        with self._lock:
            self._pending.append(trajectory)
            self._total += 1
            total = self._total
        if self.audit:
            logger.info("audit %s push total=%d steps=%d", self.name, total, len(trajectory))
        for listener in self._listeners:
            listener(trajectory, total)
        return total

    def drain(self) -> List[Trajectory]:
        with self._lock:
            drained = list(self._pending)
            self._pending.clear()
        if self.audit and drained:
            logger.info("audit %s drain count=%d", self.name, len(drained))
        return drained


def push_params(server: ParamServer, blob: ParamBlob) -> int:
    return server.push(blob)


def pull_params(server: ParamServer) -> Optional[Tuple[ParamBlob, int]]:
    return server.pull()


def push_trajectory(buffer_server: DataBufferServer, trajectory: Trajectory) -> int:
    return buffer_server.push(trajectory)


def drain(buffer_server: DataBufferServer) -> List[Trajectory]:
    return buffer_server.drain()


class MessageType(IntEnum):
    PUSH_PARAMS = 1
    PULL_PARAMS = 2
    PUSH_TRAJ = 3
    DRAIN = 4


_MESSAGE_HEADER = struct.Struct("<BqI")


def encode_message(message_type: MessageType, version: int, payload: bytes = b"") -> bytes:
    """1-byte type, 8-byte version, 4-byte payload length, payload."""
    return _MESSAGE_HEADER.pack(int(message_type), version, len(payload)) + payload


def decode_message(data: bytes) -> Tuple[MessageType, int, bytes]:
    if len(data) < _MESSAGE_HEADER.size:
        raise InvalidArgumentError("message shorter than its header")
    raw_type, version, length = _MESSAGE_HEADER.unpack_from(data, 0)
    try:
        message_type = MessageType(raw_type)
    except ValueError as exc:
        raise InvalidArgumentError(f"unknown message type {raw_type}") from exc
    payload = data[_MESSAGE_HEADER.size:]
    if len(payload) != length:
        raise InvalidArgumentError(f"message payload is {len(payload)} bytes, header says {length}")
    return message_type, version, payload
