#!/usr/bin/env python3
"""
Collectives Component

Simulated intra-node communication between R logical tensor-parallel ranks
living in one process. Every collective is a synchronization point and
reduces in ascending rank order, so results never depend on which worker
finished first. Communication is fault-free: nothing in this module can be
reached by the injector.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

from .error_handler import ContractViolation

logger = logging.getLogger(__name__)

T = TypeVar("T")


def _check_uniform(tensors: Sequence[np.ndarray], op: str):
    if not tensors:
        raise ContractViolation(f"{op} needs at least one payload")
    first = tensors[0]
    for rank, tensor in enumerate(tensors):
        if tensor.shape != first.shape or tensor.dtype != first.dtype:
            raise ContractViolation(f"{op} payloads differ", rank=rank,
                                    shape=tensor.shape, expected=first.shape)


def rank_ordered_sum(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum accumulated rank 0, then rank 1, and so on."""
    total = np.array(tensors[0], copy=True)
    for tensor in tensors[1:]:
        total = total + tensor
    return total


def broadcast(src: np.ndarray, targets: Iterable[Hashable]) -> Dict[Hashable, np.ndarray]:
    """Bit-identical copy of src for every target."""
    return {target: np.array(src, copy=True) for target in targets}


class Mesh:
    """
    R logical ranks plus the scheduler that runs their per-rank work.

    With workers == 1 ranks run round-robin on the calling thread; with more
    workers they run on a thread pool. Results are always returned in rank
    order, so both schedules give bit-identical outputs.
    """

    def __init__(self, tp_degree: int, workers: int = 1):
        if tp_degree < 1:
            raise ContractViolation("tp_degree must be >= 1", tp_degree=tp_degree)
        if workers < 1:
            raise ContractViolation("workers must be >= 1", workers=workers)
        self.tp_degree = tp_degree
        self.workers = workers
        self._executor: Optional[ThreadPoolExecutor] = None

    def __repr__(self) -> str:
        return f"Mesh(tp_degree={self.tp_degree}, workers={self.workers})"

    @property
    def ranks(self) -> range:
        return range(self.tp_degree)

    def map_ranks(self, fn: Callable[[int], T]) -> List[T]:
        """Run fn(rank) for every rank; the lowest failing rank's exception is raised."""
        if self.workers == 1 or self.tp_degree == 1:
            return [fn(rank) for rank in self.ranks]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(
                max_workers=min(self.workers, self.tp_degree),
                thread_name_prefix="rank_worker",
            )
        futures = [self._executor.submit(fn, rank) for rank in self.ranks]
        return [future.result() for future in futures]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
            self._executor = None

    def __enter__(self) -> "Mesh":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def _check_payloads(self, tensors: Sequence[np.ndarray], op: str):
        if len(tensors) != self.tp_degree:
            raise ContractViolation(f"{op} expects one payload per rank",
                                    payloads=len(tensors), tp_degree=self.tp_degree)
        _check_uniform(tensors, op)

    def all_gather(self, shards: Sequence[np.ndarray], axis: int = 0) -> List[np.ndarray]:
        """Concatenate shards in ascending rank order; every rank gets its own copy."""
        self._check_payloads(shards, "all_gather")
        full = np.concatenate(list(shards), axis=axis)
        return [full] + [full.copy() for _ in range(self.tp_degree - 1)]

    def reduce_scatter(self, fulls: Sequence[np.ndarray], axis: int = 0) -> List[np.ndarray]:
        """Rank-ordered sum, then split into R equal blocks along axis; rank r keeps block r."""
        self._check_payloads(fulls, "reduce_scatter")
        length = fulls[0].shape[axis]
        if length % self.tp_degree != 0:
            raise ContractViolation("reduce_scatter length not divisible by tp_degree",
                                    length=length, tp_degree=self.tp_degree)
        total = rank_ordered_sum(fulls)
        return [np.ascontiguousarray(block) for block in np.split(total, self.tp_degree, axis=axis)]

    def all_reduce(self, tensors: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Rank-ordered sum, one copy per payload (payload count may differ from tp_degree)."""
        _check_uniform(tensors, "all_reduce")
        total = rank_ordered_sum(tensors)
        return [total] + [total.copy() for _ in range(len(tensors) - 1)]

    def broadcast(self, src: np.ndarray, targets: Iterable[Hashable]) -> Dict[Hashable, np.ndarray]:
        return broadcast(src, targets)
