"""Growable structure-of-arrays store for the Gaussian map.

Rows are append-only with stable integer ids that are never reused. Removal
is tombstoning: the row is flagged dead and excluded from rendering, which
keeps DSA steps transactional (a snapshot/restore pair undoes everything).
Physical compaction runs between DSA steps.

Auxiliary per-Gaussian arrays (optimizer moments, provenance labels) are
registered through `register_aux` so growth, compaction and snapshots keep
them row-aligned with the parameters.
"""
from __future__ import annotations

import numpy as np

_PARAM_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "colors")


class GaussianMap:
    """Gaussian parameter store. `dtype` is the storage dtype (float32 by
    default so map files round-trip losslessly; kernels compute in float64)."""

    def __init__(self, dtype=np.float32, capacity: int = 1024):
        self.dtype = np.dtype(dtype)
        self._cap = int(capacity)
        self.means = np.zeros((self._cap, 3), dtype=self.dtype)
        self.quats = np.zeros((self._cap, 4), dtype=self.dtype)
        self.log_scales = np.zeros((self._cap, 3), dtype=self.dtype)
        self.opacity_logits = np.zeros(self._cap, dtype=self.dtype)
        self.colors = np.zeros((self._cap, 3), dtype=self.dtype)
        self.ids = np.zeros(self._cap, dtype=np.int64)
        self.alive = np.zeros(self._cap, dtype=bool)
        self.labels = np.zeros(self._cap, dtype=np.int32)
        self.size = 0
        self.next_id = 0
        self.generation = 0
        self.n_inserted = 0
        self.n_tombstoned = 0
        self._aux: dict[str, np.ndarray] = {}
        self._row_of: dict[int, int] = {}
        self.meta: dict = {}

    # -- bookkeeping ------------------------------------------------------

    def __len__(self) -> int:
        return self.n_inserted - self.n_tombstoned

    def touch(self):
        """Record an in-place parameter mutation (invalidates render contexts)."""
        self.generation += 1

    def count_live(self) -> int:
        return len(self)

    def register_aux(self, name: str, trailing_shape=(), dtype=np.float64) -> np.ndarray:
        if name not in self._aux:
            self._aux[name] = np.zeros((self._cap, *trailing_shape), dtype=dtype)
        return self._aux[name]

    def aux(self, name: str) -> np.ndarray:
        return self._aux[name]

    def _grow(self, need: int):
        if self.size + need <= self._cap:
            return
        new_cap = max(self._cap * 2, self.size + need)
        for f in _PARAM_FIELDS + ("ids", "alive", "labels"):
            old = getattr(self, f)
            fresh = np.zeros((new_cap, *old.shape[1:]), dtype=old.dtype)
            fresh[: self.size] = old[: self.size]
            setattr(self, f, fresh)
        for k, old in self._aux.items():
            fresh = np.zeros((new_cap, *old.shape[1:]), dtype=old.dtype)
            fresh[: self.size] = old[: self.size]
            self._aux[k] = fresh
        self._cap = new_cap

    # -- mutation ---------------------------------------------------------

    def insert(self, means, colors, log_scales=None, quats=None,
               opacity_logits=None, labels=None) -> np.ndarray:
        """Append Gaussians; returns their fresh ids."""
        means = np.atleast_2d(np.asarray(means))
        n = means.shape[0]
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        self._grow(n)
        sl = slice(self.size, self.size + n)
        self.means[sl] = means
        self.colors[sl] = np.atleast_2d(np.asarray(colors))
        if log_scales is None:
            self.log_scales[sl] = 0.0
        else:
            self.log_scales[sl] = np.atleast_2d(np.asarray(log_scales))
        if quats is None:
            self.quats[sl] = np.array([1.0, 0, 0, 0], dtype=self.dtype)
        else:
            self.quats[sl] = np.atleast_2d(np.asarray(quats))
        if opacity_logits is None:
            self.opacity_logits[sl] = 0.0
        else:
            self.opacity_logits[sl] = np.asarray(opacity_logits)
        self.labels[sl] = 0 if labels is None else np.asarray(labels)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.ids[sl] = new_ids
        self.alive[sl] = True
        for row, gid in zip(range(self.size, self.size + n), new_ids):
            self._row_of[int(gid)] = row
        self.size += n
        self.next_id += n
        self.n_inserted += n
        self.generation += 1
        return new_ids

    def tombstone(self, ids) -> int:
        """Retire ids (idempotent). Returns how many were newly retired."""
        retired = 0
        for gid in np.asarray(ids, dtype=np.int64).ravel():
            row = self._row_of.get(int(gid))
            if row is None:
                raise KeyError(f"unknown Gaussian id {int(gid)}")
            if self.alive[row]:
                self.alive[row] = False
                retired += 1
        self.n_tombstoned += retired
        if retired:
            self.generation += 1
        return retired

    def is_live(self, gid: int) -> bool:
        row = self._row_of.get(int(gid))
        return row is not None and bool(self.alive[row])

    def compact(self):
        """Physically drop tombstoned rows (ids keep their values)."""
        keep = np.flatnonzero(self.alive[: self.size])
        if keep.size == self.size:
            return
        for f in _PARAM_FIELDS + ("ids", "alive", "labels"):
            arr = getattr(self, f)
            arr[: keep.size] = arr[keep]
        for arr in self._aux.values():
            arr[: keep.size] = arr[keep]
        dead = set(self._row_of) - set(int(g) for g in self.ids[: keep.size])
        for gid in dead:
            del self._row_of[gid]
        self.size = keep.size
        for row, gid in enumerate(self.ids[: self.size]):
            self._row_of[int(gid)] = row
        self.generation += 1

    # -- access -----------------------------------------------------------

    def live_rows(self) -> np.ndarray:
        return np.flatnonzero(self.alive[: self.size])

    def live_ids(self) -> np.ndarray:
        return self.ids[self.live_rows()]

    def rows_for_ids(self, ids) -> np.ndarray:
        return np.array([self._row_of[int(g)] for g in np.asarray(ids).ravel()],
                        dtype=np.int64)

    def gather(self, rows=None):
        """Contiguous float64 copies of (means, quats, log_scales,
        opacity_logits, colors, ids) for the given rows (default: live)."""
        if rows is None:
            rows = self.live_rows()
        return (
            np.ascontiguousarray(self.means[rows], dtype=np.float64),
            np.ascontiguousarray(self.quats[rows], dtype=np.float64),
            np.ascontiguousarray(self.log_scales[rows], dtype=np.float64),
            np.ascontiguousarray(self.opacity_logits[rows], dtype=np.float64),
            np.ascontiguousarray(self.colors[rows], dtype=np.float64),
            self.ids[rows].copy(),
        )

    def scene_extent(self) -> float:
        """Diagonal of the live means' bounding box (>= 1 as an lr floor)."""
        rows = self.live_rows()
        if rows.size == 0:
            return 1.0
        m = self.means[rows]
        diag = float(np.linalg.norm(m.max(axis=0) - m.min(axis=0)))
        return max(diag, 1.0)

    # -- transactional snapshot ------------------------------------------

    def snapshot(self) -> dict:
        state = {f: getattr(self, f)[: self.size].copy()
                 for f in _PARAM_FIELDS + ("ids", "alive", "labels")}
        state["aux"] = {k: v[: self.size].copy() for k, v in self._aux.items()}
        state["counters"] = (self.size, self.next_id, self.generation,
                            self.n_inserted, self.n_tombstoned)
        state["meta"] = dict(self.meta)
        return state

    def restore(self, state: dict):
        size = state["counters"][0]
        self._grow(max(0, size - self.size))
        for f in _PARAM_FIELDS + ("ids", "alive", "labels"):
            getattr(self, f)[:size] = state[f]
        for k, v in state["aux"].items():
            self._aux[k][:size] = v
        (self.size, self.next_id, self.generation,
         self.n_inserted, self.n_tombstoned) = state["counters"]
        self.meta = dict(state.get("meta", {}))
        self._row_of = {int(g): r for r, g in enumerate(self.ids[: self.size])}
