"""Clustered data container, CSV ingestion, and response preprocessing."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateResponseError,
    DuplicateKeyError,
    EmptyDatasetError,
    InvalidBinsError,
    ParseError,
)

MISSING_TOKENS = frozenset({"", "NA", "na", "NaN", "nan", "N/A"})


@dataclass(frozen=True)
class ClusteredDataset:
    """Responses and covariates grouped into contiguous, time-ordered clusters.

    Build instances with :meth:`from_arrays` (or :func:`load_csv`), which
    sort the rows and validate them; the raw constructor assumes its inputs
    are already canonical.

    Attributes
    ----------
    cluster_id : ndarray of object
        Per-observation cluster label.
    time : ndarray of float
        Per-observation time; strictly increasing within each cluster.
    response : ndarray of float
    covariates : ndarray of float, shape (n_obs, p)
    covariate_names : tuple of str
    cluster_starts : ndarray of int, shape (n_clusters + 1,)
        Offsets such that cluster ``i`` occupies rows
        ``cluster_starts[i]:cluster_starts[i + 1]``.
    dropped_rows : int
        Rows rejected at ingestion because of missing values.
    """

    cluster_id: np.ndarray
    time: np.ndarray
    response: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    cluster_starts: np.ndarray
    dropped_rows: int = 0
    _cluster_codes: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, cluster_id, time, response, covariates=None,
                    covariate_names: Sequence[str] | None = None, dropped_rows: int = 0):
        """Validate, canonically sort, and group observations.

        Clusters keep the order in which their labels first appear; rows
        within a cluster are sorted by time.
        """
        cluster_id = np.asarray(cluster_id, dtype=object).reshape(-1)
        n = cluster_id.shape[0]
        if n == 0:
            raise EmptyDatasetError("dataset has no observations")
        time = np.asarray(time, dtype=float).reshape(-1)
        response = np.asarray(response, dtype=float).reshape(-1)
        if covariates is None:
            covariates = np.zeros((n, 0))
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if time.shape[0] != n or response.shape[0] != n or covariates.shape[0] != n:
            raise ValueError("cluster_id, time, response and covariates must have equal length")
        if not (np.all(np.isfinite(time)) and np.all(np.isfinite(response))
                and np.all(np.isfinite(covariates))):
            raise ValueError("non-finite values in dataset")
        p = covariates.shape[1]
        if covariate_names is None:
            covariate_names = tuple(f"x{k + 1}" for k in range(p))
        covariate_names = tuple(str(c) for c in covariate_names)
        if len(covariate_names) != p:
            raise ValueError("covariate_names length does not match covariates")

        first_seen = {}
        codes = np.empty(n, dtype=np.int64)
        for k, label in enumerate(cluster_id):
            codes[k] = first_seen.setdefault(label, len(first_seen))
        order = np.lexsort((time, codes))
        codes = codes[order]
        time = time[order]
        same = (codes[1:] == codes[:-1]) & (time[1:] == time[:-1])
        if np.any(same):
            k = int(np.flatnonzero(same)[0]) + 1
            raise DuplicateKeyError(
                f"duplicate (cluster, time) pair: ({cluster_id[order][k]!r}, {time[k]!r})")
        starts = np.concatenate([[0], np.flatnonzero(np.diff(codes)) + 1, [n]])
        return cls(cluster_id[order], time, response[order], covariates[order],
                   covariate_names, starts, int(dropped_rows), codes)

    # -- derived structure ----------------------------------------------------

    @property
    def n_obs(self) -> int:
        return self.response.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.cluster_starts.shape[0] - 1

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.diff(self.cluster_starts)

    @property
    def cluster_codes(self) -> np.ndarray:
        """Integer cluster index (0..N-1) of every observation."""
        if self._cluster_codes is not None:
            return self._cluster_codes
        return np.repeat(np.arange(self.n_clusters), self.cluster_sizes)

    @property
    def cluster_index(self) -> list:
        s = self.cluster_starts
        return [np.arange(s[i], s[i + 1]) for i in range(self.n_clusters)]

    def with_response(self, response) -> "ClusteredDataset":
        response = np.asarray(response, dtype=float).reshape(-1)
        if response.shape != self.response.shape:
            raise ValueError("replacement response has the wrong length")
        return ClusteredDataset(self.cluster_id, self.time, response, self.covariates,
                                self.covariate_names, self.cluster_starts,
                                self.dropped_rows, self._cluster_codes)

    def with_covariates(self, covariates, names=None) -> "ClusteredDataset":
        covariates = np.asarray(covariates, dtype=float).reshape(self.n_obs, -1)
        names = self.covariate_names if names is None else tuple(names)
        return ClusteredDataset(self.cluster_id, self.time, self.response, covariates,
                                names, self.cluster_starts, self.dropped_rows,
                                self._cluster_codes)


@dataclass(frozen=True)
class OrdinalEncoding:
    """Distinct response levels and the 1-based rank of every observation."""

    levels: np.ndarray
    rank: np.ndarray

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]

    def decode(self) -> np.ndarray:
        return self.levels[self.rank - 1]


@dataclass(frozen=True)
class ColumnMapping:
    id_col: str
    time_col: str
    response_col: str
    covariate_cols: tuple = ()


def load_csv(path, config: ColumnMapping) -> ClusteredDataset:
    """Read a headed CSV file into a :class:`ClusteredDataset`.

    Rows with a missing field (empty or an NA token) in any mapped column
    are dropped and counted; any other unparsable numeric cell raises
    :class:`ParseError` naming its line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        wanted = [config.id_col, config.time_col, config.response_col, *config.covariate_cols]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ParseError(f"columns not found in header: {', '.join(missing)}", line=1)
        pos = [header.index(c) for c in wanted]

        ids, times, resp, covs = [], [], [], []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
            cells = [row[k].strip() for k in pos]
            if any(c in MISSING_TOKENS for c in cells):
                dropped += 1
                continue
            numbers = []
            for name, cell in zip(wanted[1:], cells[1:]):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r} in column {name!r}",
                                     line=lineno) from None
                if not np.isfinite(value):
                    raise ParseError(f"non-finite value {cell!r} in column {name!r}", line=lineno)
                numbers.append(value)
            ids.append(cells[0])
            times.append(numbers[0])
            resp.append(numbers[1])
            covs.append(numbers[2:])
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing values", stacklevel=2)
    if not ids:
        raise EmptyDatasetError(f"{path}: no complete rows")
    cov = np.asarray(covs, dtype=float).reshape(len(ids), len(config.covariate_cols))
    return ClusteredDataset.from_arrays(ids, times, resp, cov, config.covariate_cols,
                                        dropped_rows=dropped)


def write_csv(data: ClusteredDataset, path, config: ColumnMapping) -> None:
    cols = [config.id_col, config.time_col, config.response_col, *data.covariate_names]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(data.n_obs):
            w.writerow([data.cluster_id[k], repr(float(data.time[k])),
                        repr(float(data.response[k])),
                        *(repr(float(v)) for v in data.covariates[k])])


def encode_ordinal(data: ClusteredDataset) -> OrdinalEncoding:
    if data.n_obs < 2:
        raise DegenerateResponseError("need at least two observations")
    levels, inverse = np.unique(data.response, return_inverse=True)
    if levels.shape[0] < 2:
        raise DegenerateResponseError("response takes a single value; nothing to model")
    return OrdinalEncoding(levels, inverse.reshape(-1).astype(np.int64) + 1)


def bin_sizes(n_obs: int, m_bins: int) -> np.ndarray:
    """Sizes of the equal-quantile bins, lowest-value bin first.

    ``m_bins - r`` bins hold ``q`` observations and the ``r`` highest-value
    bins hold ``q + 1``, where ``n_obs = m_bins * q + r``.
    """
    if not (isinstance(m_bins, (int, np.integer)) and 2 <= m_bins <= n_obs):
        raise InvalidBinsError(f"number of bins must be an integer in [2, {n_obs}], got {m_bins!r}")
    q, r = divmod(int(n_obs), int(m_bins))
    return np.concatenate([np.full(m_bins - r, q), np.full(r, q + 1)]).astype(np.int64)


def bin_equal_quantile(data: ClusteredDataset, m_bins: int) -> ClusteredDataset:
    """Replace responses by the median of their equal-quantile bin.

    Even-sized bins use the lower middle order statistic, so every new value
    is an observed response.
    """
    sizes = bin_sizes(data.n_obs, m_bins)
    order = np.argsort(data.response, kind="stable")
    ys = data.response[order]
    ends = np.cumsum(sizes)
    starts = ends - sizes
    medians = ys[starts + (sizes - 1) // 2]
    binned = np.empty_like(data.response)
    binned[order] = np.repeat(medians, sizes)
    return data.with_response(binned)


def _round_half_away(value: float, quantum: Decimal) -> float:
    d = Decimal(repr(float(value)))
    return float(d.quantize(quantum, rounding=ROUND_HALF_UP))


def round_responses(data: ClusteredDataset, decimals: int) -> ClusteredDataset:
    """Round responses half away from zero to ``decimals`` places.

    Rounding works on the shortest decimal representation of each value, so
    ``1.25`` rounds to ``1.3`` even though its binary value is slightly less.
    """
    decimals = int(decimals)
    if decimals < 0:
        raise ValueError("decimals must be >= 0")
    quantum = Decimal(1).scaleb(-decimals)
    rounded = np.fromiter((_round_half_away(v, quantum) for v in data.response),
                          dtype=float, count=data.n_obs)
    return data.with_response(rounded)
