"""Data-missing profile: a pool of embedding controls selected by query-key cosine matching."""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .errors import EmptySelection, FormatError, InvalidKappa, InvalidP, ShapeMismatch

_NORM_FLOOR = 1e-12


def init_controls(tau, d_p, generator=None, dtype=None):
    bound = 1.0 / d_p ** 0.5
    u = torch.rand(tau, d_p, generator=generator, dtype=dtype or torch.get_default_dtype())
    return (2 * u - 1) * bound


class DataMissingProfile(nn.Module):
    """Pool of ``tau`` embedding controls plus the linear query projector.

    Keys are the controls themselves. ``selection_counts`` tallies how often each
    control was selected during training since the last :meth:`reset_counts`.
    """

    def __init__(self, tau, d_p, query_in_dim, generator=None):
        super().__init__()
        self.d_p = d_p
        self.query_projector = nn.Linear(query_in_dim, d_p)
        self.controls = nn.Parameter(init_controls(tau, d_p, generator))
        self.selection_counts = np.zeros(tau, dtype=np.int64)

    @property
    def tau(self) -> int:
        return self.controls.shape[0]

    def set_controls(self, controls, counts=None):
        controls = torch.as_tensor(controls, dtype=self.query_projector.weight.dtype)
        if controls.dim() != 2 or controls.shape[1] != self.d_p:
            raise ShapeMismatch(f"controls must have shape (n, {self.d_p}), got {tuple(controls.shape)}")
        self.controls = nn.Parameter(controls.detach().clone())
        self.selection_counts = (
            np.zeros(controls.shape[0], dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64).copy()
        )

    def reset_counts(self):
        self.selection_counts[:] = 0

    def query(self, w_mod, w_ins):
        return query(self.query_projector, w_mod, w_ins)

    def record_selection(self, indices):
        flat = indices.reshape(-1).cpu().numpy()
        self.selection_counts += np.bincount(flat, minlength=self.tau)


class SelectedSet(NamedTuple):
    indices: torch.Tensor
    controls: torch.Tensor
    similarities: torch.Tensor


def query(projector: nn.Linear, w_mod, w_ins):
    if w_mod.shape[-1] + w_ins.shape[-1] != projector.in_features:
        raise ShapeMismatch(
            f"query projector expects {projector.in_features} inputs, got {w_mod.shape[-1]} + {w_ins.shape[-1]}"
        )
    return projector(torch.cat([w_mod, w_ins], dim=-1))


def _unit(x):
    norm = x.norm(dim=-1, keepdim=True)
    return torch.where(norm < _NORM_FLOOR, torch.zeros((), dtype=x.dtype), x / norm.clamp_min(_NORM_FLOOR))


def cosine_matrix(q, controls):
    """Cosine similarity of every query (..., d) with every control (tau, d) -> (..., tau).

    Zero-norm vectors get similarity 0.
    """
    return _unit(q) @ _unit(controls).T


def relevance(q, psi, return_flag=False):
    """Cosine similarity of two vectors; 0 (flagged degenerate) when either norm is below 1e-12."""
    q = torch.as_tensor(q, dtype=torch.float64)
    psi = torch.as_tensor(psi, dtype=torch.float64)
    nq, npsi = float(q.norm()), float(psi.norm())
    degenerate = nq < _NORM_FLOOR or npsi < _NORM_FLOOR
    value = 0.0 if degenerate else float(q @ psi) / (nq * npsi)
    return (value, degenerate) if return_flag else value


def topk_indices(sims, kappa):
    """Indices of the kappa largest similarities along the last axis; ties go to the lower index."""
    tau = sims.shape[-1]
    if not 1 <= kappa <= tau:
        raise InvalidKappa(f"kappa must lie in [1, {tau}], got {kappa}")
    order = torch.sort(sims, dim=-1, descending=True, stable=True).indices
    return order[..., :kappa]


def select(q, profile: DataMissingProfile, kappa, update_counts=True) -> SelectedSet:
    """Pick the kappa controls most relevant to query ``q`` (hard choice, no gradient through the argmax)."""
    sims = cosine_matrix(q, profile.controls)
    idx = topk_indices(sims.detach(), kappa)
    if update_counts:
        profile.record_selection(idx)
    return SelectedSet(idx, profile.controls[idx], torch.gather(sims, -1, idx))


def relevance_regularizer(queries, controls, kappa, indices=None):
    """Sum of the selected top-kappa cosine similarities over all queries.

    ``indices`` freezes the selection; otherwise it is recomputed without
    gradient. Gradients reach the query path and the selected controls.
    """
    sims = cosine_matrix(queries, controls)
    if indices is None:
        indices = topk_indices(sims.detach(), kappa)
    return torch.gather(sims, -1, indices).sum()


def missing_pattern_feature(selected) -> torch.Tensor:
    """Mean of the selected controls. Accepts a :class:`SelectedSet` or a (..., kappa, d) tensor."""
    controls = selected.controls if isinstance(selected, SelectedSet) else selected
    if controls.shape[-2] == 0:
        raise EmptySelection("no controls were selected")
    return controls.mean(dim=-2)


def top_p_indices(counts, p) -> np.ndarray:
    counts = np.asarray(counts)
    if not 1 <= p <= counts.size:
        raise InvalidP(f"p must lie in [1, {counts.size}], got {p}")
    return np.sort(np.argsort(-counts, kind="stable")[:p])


def top_p_compress(profile: DataMissingProfile, p: int) -> DataMissingProfile:
    """Copy of ``profile`` keeping only its p most frequently selected controls (ties -> lower index)."""
    keep = top_p_indices(profile.selection_counts, p)
    out = DataMissingProfile(len(keep), profile.d_p, profile.query_projector.in_features)
    out = out.to(profile.query_projector.weight.dtype)
    out.query_projector.load_state_dict(profile.query_projector.state_dict())
    out.set_controls(profile.controls.detach()[torch.as_tensor(keep)], profile.selection_counts[keep])
    return out


def save_profile(controls, counts, path) -> None:
    """Write ``tau d_p`` then one control per line, then the selection counts line."""
    controls = np.asarray(torch.as_tensor(controls).detach().cpu().double())
    counts = np.zeros(controls.shape[0], dtype=np.int64) if counts is None else np.asarray(counts)
    lines = [f"{controls.shape[0]} {controls.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in controls]
    lines.append(" ".join(str(int(c)) for c in counts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_profile(path):
    """Inverse of :func:`save_profile`; returns (controls float64 array, counts int array)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("empty profile file", path)
    try:
        tau, d_p = (int(t) for t in lines[0].split())
    except ValueError:
        raise FormatError("header must be 'tau d_p'", path, 1) from None
    if len(lines) != tau + 2:
        raise FormatError(f"expected {tau + 2} lines, got {len(lines)}", path)
    rows = []
    for lineno in range(2, tau + 2):
        toks = lines[lineno - 1].split()
        if len(toks) != d_p:
            raise FormatError(f"expected {d_p} values, got {len(toks)}", path, lineno)
        try:
            rows.append([float(t) for t in toks])
        except ValueError:
            raise FormatError("non-numeric control entry", path, lineno) from None
    try:
        counts = np.array([int(t) for t in lines[-1].split()], dtype=np.int64)
    except ValueError:
        raise FormatError("counts line must hold integers", path, tau + 2) from None
    if counts.size != tau:
        raise FormatError(f"expected {tau} counts, got {counts.size}", path, tau + 2)
    return np.array(rows, dtype=np.float64).reshape(tau, d_p), counts
