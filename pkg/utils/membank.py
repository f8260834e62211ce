"""
FIFO memory bank of detached class features, one buffer per (tissue, scale).
The prototype of a buffer is the mean of its current contents.
"""

import logging
import threading
from collections import deque
from typing import Deque, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from config import Config
from knowledge.tissue_knowledge import tissue_knowledge
from utils.exceptions import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

Key = Tuple[int, int]


class MemoryBank:
    def __init__(self, capacity: int = Config.BANK_CAPACITY, classes: Iterable[int] = tissue_knowledge.tissues):
        if capacity < 1:
            raise ValueError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.classes = tuple(classes)
        self._buffers: Dict[Key, Deque[np.ndarray]] = {}
        self._widths: Dict[int, int] = {}
        self._pushes: Dict[Key, int] = {}
        self._lock = threading.Lock()

    def _check_class(self, cls: int) -> None:
        if cls not in self.classes:
            raise KeyError(f"class {cls} is not tracked by the bank (tracked: {self.classes})")

    def push(self, cls: int, scale: int, feature) -> None:
        """Append a snapshot of `feature`; the oldest entry goes once the buffer is full."""
        self._check_class(cls)
        vector = np.array(feature, dtype=np.float64, copy=True).reshape(-1)
        width = self._widths.setdefault(scale, vector.size)
        if vector.size != width:
            raise ShapeError(f"scale {scale} holds features of length {width}, got {vector.size}")
        vector.setflags(write=False)
        with self._lock:
            buffer = self._buffers.setdefault((cls, scale), deque(maxlen=self.capacity))
            buffer.append(vector)
            self._pushes[(cls, scale)] = self._pushes.get((cls, scale), 0) + 1

    def push_pooled(self, scale: int, vectors: Mapping[int, np.ndarray], present: Mapping[int, bool]) -> int:
        """Push every present class vector of one scale; returns the number pushed."""
        pushed = 0
        for cls in self.classes:
            if present.get(cls, False):
                self.push(cls, scale, vectors[cls])
                pushed += 1
        return pushed

    def buffer(self, cls: int, scale: int) -> Tuple[np.ndarray, ...]:
        """Atomic snapshot of one buffer, oldest first."""
        with self._lock:
            return tuple(self._buffers.get((cls, scale), ()))

    def size(self, cls: int, scale: int) -> int:
        return len(self.buffer(cls, scale))

    def pushes(self, cls: int, scale: int) -> int:
        return self._pushes.get((cls, scale), 0)

    def prototype(self, cls: int, scale: int) -> Optional[np.ndarray]:
        """Mean of the buffer, or None while it is empty."""
        self._check_class(cls)
        snapshot = self.buffer(cls, scale)
        if not snapshot:
            return None
        stacked = np.stack(snapshot)
        # shifted mean: exact for a buffer of identical vectors
        first = stacked[0]
        return first + (stacked - first).mean(axis=0)

    def is_empty(self) -> bool:
        with self._lock:
            return not any(self._buffers.values())

    # ---------------------------------------------------------------- persistence

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Buffers as stacked arrays keyed `c<class>_s<scale>`, oldest row first."""
        with self._lock:
            return {f"c{cls}_s{scale}": np.stack(buf) for (cls, scale), buf in sorted(self._buffers.items()) if buf}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        with self._lock:
            self._buffers.clear()
            self._widths.clear()
            self._pushes.clear()
        for key, stacked in state.items():
            try:
                cls_part, scale_part = key.split("_")
                cls, scale = int(cls_part[1:]), int(scale_part[1:])
            except ValueError as e:
                raise CheckpointError(f"malformed bank entry '{key}'") from e
            stacked = np.atleast_2d(stacked)
            if stacked.shape[0] > self.capacity:
                logger.warning(f"Bank entry {key} holds {stacked.shape[0]} rows, keeping the newest {self.capacity}")
            for row in stacked:
                self.push(cls, scale, row)
