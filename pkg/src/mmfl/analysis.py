"""Empirical checks of the missing-modality deviation bound, Lipschitz estimates and embedding export."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import MultimodalDataset
from .errors import InvalidSize, MMFLError
from .fusion import ClientData
from .masking import MissingMask, MissingStats, apply_mask, make_missing_mask
from .representation import contrastive_loss

log = logging.getLogger(__name__)


class IOFailure(MMFLError, OSError):
    pass


@dataclass
class BoundEstimate:
    missing_size: int
    mean_deviation: float
    mean_lds: float
    lipschitz_mu: float
    rhs_value: float
    gamma_norm_range: tuple = (float("nan"), float("nan"))
    beta_norm_range: tuple = (float("nan"), float("nan"))


def _patterns(n_modalities, missing_size, n_patterns, seed):
    subsets = list(itertools.combinations(range(n_modalities), missing_size))
    if n_patterns >= len(subsets):
        return subsets
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(subsets), size=n_patterns, replace=False))
    return [subsets[i] for i in pick]


def _mask_for(dataset, missing):
    entries = np.ones((dataset.n_samples, dataset.n_modalities), dtype=np.uint8)
    entries[:, list(missing)] = 0
    return apply_mask(dataset.without_mask(), MissingMask(entries))


def _dtype(model):
    return model.head.weight.dtype


@torch.no_grad()
def _probs(model, dataset):
    model.eval()
    data = ClientData.from_dataset(dataset, _dtype(model))
    return torch.softmax(model(data.xs, data.avail).logits, dim=1)


def _check_size(missing_size, n_modalities):
    if not 0 <= missing_size <= n_modalities - 1:
        raise InvalidSize(f"missing size must lie in [0, {n_modalities - 1}], got {missing_size}")


def output_deviation(model, dataset: MultimodalDataset, missing_size: int, n_patterns: int, seed: int) -> float:
    """Mean l2 distance between softmax outputs with modalities S removed and with all present.

    Up to ``n_patterns`` distinct size-|S| subsets are drawn without replacement
    (all of them when there are no more than ``n_patterns``), shared by every
    instance.
    """
    _check_size(missing_size, dataset.n_modalities)
    if n_patterns < 1:
        raise InvalidSize("n_patterns must be >= 1")
    if missing_size == 0:
        return 0.0
    full = _probs(model, dataset.without_mask())
    devs = []
    for missing in _patterns(dataset.n_modalities, missing_size, n_patterns, seed):
        p = _probs(model, _mask_for(dataset, missing))
        devs.append((p - full).norm(dim=1))
    return float(torch.cat(devs).double().mean())


@torch.no_grad()
def mean_data_specific_loss(model, dataset: MultimodalDataset, missing_size: int, n_patterns: int,
                            seed: int) -> float:
    """Average per-instance contrastive alignment loss of encoder features under sampled patterns."""
    _check_size(missing_size, dataset.n_modalities)
    model.eval()
    vals = []
    pats = [()] if missing_size == 0 else _patterns(dataset.n_modalities, missing_size, n_patterns, seed)
    for missing in pats:
        data = ClientData.from_dataset(_mask_for(dataset, missing), _dtype(model))
        h = model.encode_all(data.xs, data.avail)
        vals.append(contrastive_loss(h.double(), data.avail, reduction="none"))
    return float(torch.cat(vals).mean())


def head_function(model):
    """Post-processing head as a map from flattened representations (N, M*D) to class probabilities."""
    M, D = model.n_modalities, model.rep_dim

    @torch.no_grad()
    def f(flat):
        model.eval()
        w = flat.reshape(flat.shape[0], M, D).to(_dtype(model))
        return torch.softmax(model.post_process(w)[0], dim=1)

    f.input_dim = M * D
    return f


def _ball(n, dim, radius, rng):
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return g * r[:, None]


@torch.no_grad()
def estimate_lipschitz(head, input_dim: int, n_pairs: int, radius: float = 1.0, seed: int = 0) -> float:
    """Largest ||f(a) - f(b)|| / ||a - b|| over random pairs drawn uniformly in a ball.

    This is a lower bound on the true Lipschitz constant.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    a = torch.as_tensor(_ball(n_pairs, input_dim, radius, rng))
    b = torch.as_tensor(_ball(n_pairs, input_dim, radius, rng))
    fa = torch.as_tensor(head(a)).double()
    fb = torch.as_tensor(head(b)).double()
    num = (fa - fb).reshape(n_pairs, -1).norm(dim=1)
    den = (a - b).norm(dim=1)
    ok = den > 0
    return float((num[ok] / den[ok]).max()) if bool(ok.any()) else 0.0


def bound_rhs(mean_lds: float, missing_size: int, n_modalities: int, mu: float) -> float:
    """mu*|S|*sqrt(mean_lds/(M-|S|)^2 + log(M^2/(M-|S|)^2)), the bound's trend quantity (constant 1)."""
    if not 0 <= missing_size < n_modalities:
        raise InvalidSize(f"missing size must lie in [0, {n_modalities}), got {missing_size}")
    if mean_lds < 0:
        log.warning("negative mean L_ds %.6g clamped to 0", mean_lds)
        mean_lds = 0.0
    if missing_size == 0:
        return 0.0
    rest = (n_modalities - missing_size) ** 2
    return mu * missing_size * math.sqrt(mean_lds / rest + math.log(n_modalities ** 2 / rest))


def recommended_top_p(tau: int, m_iter: int, n_clients: int, d_p: int) -> int:
    """Controls each client should upload so clustering cost stays near plain FedAvg."""
    if min(tau, m_iter, n_clients, d_p) < 1:
        raise ValueError("all inputs must be >= 1")
    return max(1, int(math.floor(np.cbrt(tau / (m_iter * n_clients * d_p)) + 0.5)))


def _norm_range(model, attr):
    norms = [float(getattr(enc.norm, attr).detach().norm()) for enc in model.encoders]
    return (min(norms), max(norms))


def estimate_bound(model, dataset, missing_size, n_patterns=4, seed=0, lipschitz_pairs=2000,
                   lipschitz_radius=1.0) -> BoundEstimate:
    dev = output_deviation(model, dataset, missing_size, n_patterns, seed)
    lds = mean_data_specific_loss(model, dataset, missing_size, n_patterns, seed)
    f = head_function(model)
    mu = estimate_lipschitz(f, f.input_dim, lipschitz_pairs, lipschitz_radius, seed)
    rhs = bound_rhs(lds, missing_size, dataset.n_modalities, mu)
    return BoundEstimate(missing_size, dev, lds, mu, rhs, _norm_range(model, "weight"), _norm_range(model, "bias"))


BOUND_FIELDS = ("lambda", "missing_size", "mean_deviation", "mean_lds", "mu_estimate", "rhs_value")


def write_bound_csv(rows, path) -> None:
    """rows: iterable of (lambda, BoundEstimate)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUND_FIELDS)
        for lam, est in rows:
            w.writerow([repr(float(lam)), est.missing_size, repr(est.mean_deviation), repr(est.mean_lds),
                        repr(est.lipschitz_mu), repr(est.rhs_value)])


@torch.no_grad()
def export_embeddings(model, dataset: MultimodalDataset, patterns, path, seed: int = 0) -> int:
    """Write final per-modality representations c for each pattern; returns the number of rows.

    A pattern is either a collection of missing modality indices applied to
    every instance or a :class:`MissingStats` (random mask drawn from ``seed``
    and the pattern index). Rows: instance_id, modality, missing_pattern_id, c_0..c_{D-1}.
    """
    if dataset.n_samples == 0:
        raise ValueError("dataset is empty")
    model.eval()
    D = model.rep_dim
    header = ["instance_id", "modality", "missing_pattern_id"] + [f"c_{k}" for k in range(D)]
    n_rows = 0
    try:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for pid, pattern in enumerate(patterns):
                if isinstance(pattern, MissingStats):
                    mask = make_missing_mask(dataset.n_samples, dataset.n_modalities, pattern,
                                             int(seed) * 1000003 + pid)
                    masked = apply_mask(dataset.without_mask(), mask)
                else:
                    masked = _mask_for(dataset, tuple(int(i) for i in pattern))
                data = ClientData.from_dataset(masked, _dtype(model))
                c = model(data.xs, data.avail).c.double().numpy()
                for i in range(c.shape[0]):
                    for j in range(c.shape[1]):
                        w.writerow([i, dataset.modalities[j], pid] + [repr(float(v)) for v in c[i, j]])
                        n_rows += 1
    except OSError as exc:
        raise IOFailure(f"cannot write embeddings to {path}: {exc}") from exc
    return n_rows
