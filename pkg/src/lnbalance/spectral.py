"""Laplacian eigenvector positional encodings for channel graph nodes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

from .errors import DataError, ValidationError
from .graph import ChannelGraph

DENSE_CUTOFF = 500
EIG_TOL = 1e-10
ZERO_EIG = 1e-9


@dataclass(frozen=True, eq=False)
class PositionalTable:
    k: int
    vectors: Mapping[str, np.ndarray]
    eigenvalues: np.ndarray

    def get(self, node: str) -> np.ndarray:
        vec = self.vectors.get(node)
        if vec is None:
            return np.zeros(self.k)
        return vec

    def matrix(self, order) -> np.ndarray:
        return np.vstack([self.get(n) for n in order]) if len(order) else np.zeros((0, self.k))


def adjacency_matrix(graph: ChannelGraph, weighted: bool = False) -> tuple[list[str], sp.csr_matrix]:
    """Symmetric adjacency over the undirected channel skeleton.

    Parallel channels collapse to one 0/1 entry; with ``weighted`` the entry
    is the summed capacity scaled by the largest such sum.
    """
    order = list(graph.nodes)
    index = {n: i for i, n in enumerate(order)}
    pairs: dict[tuple[int, int], float] = {}
    for ch in graph.channels.values():
        i, j = index[ch.node_a], index[ch.node_b]
        key = (min(i, j), max(i, j))
        pairs[key] = pairs.get(key, 0.0) + ch.capacity_sat
    n = len(order)
    if not pairs:
        return order, sp.csr_matrix((n, n))
    ij = np.array(list(pairs.keys()), dtype=np.int64)
    w = np.array(list(pairs.values()), dtype=float)
    w = w / w.max() if weighted else np.ones_like(w)
    rows = np.concatenate([ij[:, 0], ij[:, 1]])
    cols = np.concatenate([ij[:, 1], ij[:, 0]])
    a = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))
    return order, a


def normalized_laplacian(a: sp.spmatrix) -> sp.csr_matrix:
    """``I - D^-1/2 A D^-1/2``; rows of isolated nodes are left all-zero."""
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    d = sp.diags(inv_sqrt)
    ident = sp.diags(nz.astype(float))
    return (ident - d @ a @ d).tocsr()


def _dense_eigs(lap: sp.spmatrix, count: int):
    vals, vecs = np.linalg.eigh(lap.toarray())
    return vals[:count], vecs[:, :count]


def _iterative_eigs(lap: sp.spmatrix, count: int, rng: np.random.Generator):
    n = lap.shape[0]
    v0 = rng.standard_normal(n)
    # shift-invert Lanczos around a point just below the spectrum
    vals, vecs = eigsh(lap.tocsc(), k=count, sigma=-1e-3, which="LM", v0=v0, tol=EIG_TOL)
    # Rayleigh-Ritz cleanup restores orthonormality and tightens residuals
    q, _ = np.linalg.qr(vecs)
    h = q.T @ (lap @ q)
    h = 0.5 * (h + h.T)
    rvals, rvecs = np.linalg.eigh(h)
    return rvals, q @ rvecs


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest |entry| made positive; argmax returns the first (lowest node id) on ties
    out = vecs.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        mag = np.abs(col)
        top = np.flatnonzero(mag >= mag.max() - 1e-12)
        if col[top[0]] < 0:
            out[:, j] = -col
    return out


def laplacian_encodings(graph: ChannelGraph, k: int = 16, rng_seed: int = 0,
                        solver: str = "auto", weighted: bool = False) -> PositionalTable:
    """Eigenvectors of the ``k`` smallest nonzero eigenvalues of the normalized Laplacian.

    One zero eigenvalue per connected component is dropped. Isolated nodes
    are excluded from the eigenproblem and receive zero vectors.
    """
    if not graph.nodes:
        raise ValidationError("graph has no nodes")
    if k < 1 or k >= len(graph.nodes):
        raise ValidationError(f"k={k} out of range for a graph with {len(graph.nodes)} nodes")
    order, a = adjacency_matrix(graph, weighted=weighted)
    deg = np.asarray(a.sum(axis=1)).ravel()
    active = np.flatnonzero(deg > 0)
    sorted_active = sorted(active, key=lambda i: order[i])
    active = np.array(sorted_active, dtype=np.int64)
    sub = a[active][:, active]
    n_comp, _ = connected_components(sub, directed=False)
    count = k + n_comp
    if count > len(active):
        raise ValidationError(
            f"k={k} too large: {len(active)} connected nodes in {n_comp} components "
            f"leave at most {len(active) - n_comp} nonzero eigenvalues")
    lap = normalized_laplacian(sub)
    if solver == "auto":
        solver = "dense" if len(active) < DENSE_CUTOFF else "iterative"
    if solver == "dense" or count >= len(active) - 1:
        vals, vecs = _dense_eigs(lap, count)
    elif solver == "iterative":
        vals, vecs = _iterative_eigs(lap, count, np.random.default_rng(rng_seed))
    else:
        raise ValueError(f"unknown solver {solver!r}")
    if np.any(vals[:n_comp] > ZERO_EIG) or (k and vals[n_comp] <= ZERO_EIG):
        raise DataError("eigensolver did not isolate the zero eigenspace cleanly")
    vals = np.clip(vals[n_comp:], 0.0, 2.0)
    vecs = _fix_signs(vecs[:, n_comp:])
    vectors = {order[i]: np.zeros(k) for i in range(len(order))}
    for row, i in enumerate(active):
        vectors[order[i]] = vecs[row].copy()
    return PositionalTable(k, vectors, vals)


def laplacian_residuals(graph: ChannelGraph, table: PositionalTable, weighted: bool = False) -> np.ndarray:
    """``||L v - lambda v||`` for each returned eigenpair, over the full node set."""
    order, a = adjacency_matrix(graph, weighted=weighted)
    lap = normalized_laplacian(a)
    v = table.matrix(order)
    return np.linalg.norm(lap @ v - v * table.eigenvalues[None, :], axis=0)


def save_encodings(table: PositionalTable, path) -> None:
    """CSV ``pub_key,z_0..z_{k-1}`` plus a JSON sidecar with the eigenvalues."""
    with open(path, "w", newline="", encoding="utf8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pub_key"] + [f"z_{i}" for i in range(table.k)])
        for node in sorted(table.vectors):
            w.writerow([node] + [repr(float(x)) for x in table.vectors[node]])
    with open(f"{path}.json", "w", encoding="utf8") as f:
        json.dump({"k": table.k, "eigenvalues": [float(x) for x in table.eigenvalues]}, f)


def load_encodings(path) -> PositionalTable:
    with open(path, newline="", encoding="utf8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "pub_key":
            raise DataError(f"{path}: not an encodings cache")
        k = len(header) - 1
        vectors = {}
        for row in reader:
            if len(row) != k + 1:
                raise DataError(f"{path}: ragged row for {row[:1]}")
            vectors[row[0]] = np.array([float(x) for x in row[1:]])
    eigenvalues: Optional[np.ndarray] = None
    try:
        with open(f"{path}.json", encoding="utf8") as f:
            eigenvalues = np.array(json.load(f)["eigenvalues"], dtype=float)
    except FileNotFoundError:
        eigenvalues = np.full(k, np.nan)
    return PositionalTable(k, vectors, eigenvalues)
