"""Federated orchestration: sampling, local training, FedAvg and non-parametric profile aggregation."""

from __future__ import annotations

import copy
import csv
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .dataset import MultimodalDataset, partition_dirichlet, partition_iid, train_test_split
from .errors import (DimensionMismatch, EmptyInput, EmptyTestSet, InvalidM, NameMismatch, ShapeMismatch,
                     ZeroWeights)
from .fusion import ClientData, build_model, local_train, predict_dataset
from .masking import MissingStats, apply_mask, make_missing_mask
from .profile import init_controls, save_profile, top_p_indices
from .seeding import derive_seed

log = logging.getLogger(__name__)

METHODS = ("pepsy", "pepsy_np", "pepsy_nr", "fedavg_plain", "fedprox")
CONTROLS_KEY = "profile.controls"


@dataclass
class FederationConfig:
    """Federation and model hyperparameters (defaults sized for a laptop CPU)."""

    n_clients: int = 8
    clients_per_round: int = 4
    rounds: int = 150
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.01
    lam: Optional[float] = None
    eta: float = 0.1
    tau: int = 16
    kappa: int = 4
    embed_dim: int = 16
    d_p: Optional[int] = None
    hidden_dim: Optional[int] = None
    temperature: float = 1.0
    vector_gate: bool = False
    method: str = "pepsy"
    fedprox_mu: float = 0.01
    merge_threshold: float = 0.8
    tau_max: Optional[int] = None
    top_p: Optional[int] = None
    uniform_weights: bool = False
    checkpoint_every: int = 0
    workers: int = 1

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise InvalidM(f"clients_per_round must lie in [1, n_clients={self.n_clients}], got {self.clients_per_round}")
        if not 1 <= self.kappa <= self.tau:
            raise ValueError(f"kappa must lie in [1, tau={self.tau}], got {self.kappa}")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds must be >= 0, local_epochs and batch_size >= 1")
        if self.lam is not None and self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be non-negative")
        if not -1.0 < self.merge_threshold < 1.0:
            raise ValueError("merge_threshold must lie in (-1, 1)")
        if self.top_p is not None and not 1 <= self.top_p:
            raise ValueError("top_p must be >= 1")
        if self.tau_max is not None and self.tau_max < 1:
            raise ValueError("tau_max must be >= 1")
        return self

    @property
    def resolved_tau_max(self) -> int:
        return self.tau_max or 4 * self.tau

    def resolved_lambda(self, train_pm: float) -> float:
        """Explicit lambda, else 0.1 raised to 0.2 for training p_m in {0.8, 1.0}."""
        if self.lam is not None:
            return self.lam
        return 0.2 if train_pm in (0.8, 1.0) else 0.1


def make_model(cfg: FederationConfig, feature_lens, n_classes, seed):
    return build_model(cfg.method, feature_lens, n_classes, embed_dim=cfg.embed_dim, tau=cfg.tau,
                       kappa=cfg.kappa, d_p=cfg.d_p, temperature=cfg.temperature,
                       vector_gate=cfg.vector_gate, hidden_dim=cfg.hidden_dim, seed=seed)


@dataclass
class GlobalState:
    params: OrderedDict
    controls: Optional[torch.Tensor]
    round: int = 0


@dataclass
class RoundRecord:
    round: int
    global_accuracy: float
    L_task: float
    L_ds: float
    L_rc: float
    R: float
    L: float
    global_profile_size: int
    sampled_clients: list

    FIELDS = ("round", "global_accuracy", "L_task", "L_ds", "L_rc", "R", "L", "global_profile_size",
              "sampled_clients")

    def csv_row(self):
        return [str(self.round), repr(self.global_accuracy), repr(self.L_task), repr(self.L_ds),
                repr(self.L_rc), repr(self.R), repr(self.L), str(self.global_profile_size),
                ";".join(str(k) for k in self.sampled_clients)]


def sample_clients(n_clients: int, m: int, round_index: int, seed: int) -> list:
    """Uniform sample of m distinct clients, reproducible from (seed, round_index) alone."""
    if not 1 <= m <= n_clients:
        raise InvalidM(f"cannot sample {m} of {n_clients} clients")
    rng = np.random.default_rng(derive_seed(seed, "sample", round_index))
    return [int(k) for k in rng.choice(n_clients, size=m, replace=False)]


def fedavg(param_sets, weights):
    """Weighted per-tensor average of named-tensor archives.

    Computed as first + sum_k w_k (x_k - first) with normalized weights, which
    returns the archive itself bit-exactly when all inputs agree.
    """
    if not param_sets:
        raise EmptyInput("no archives to average")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(param_sets),):
        raise ValueError("need one weight per archive")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ZeroWeights("weights must be non-negative and not all zero")
    w = weights / weights.sum()
    names = list(param_sets[0].keys())
    for i, ps in enumerate(param_sets[1:], start=1):
        if set(ps.keys()) != set(names):
            diff = sorted(set(ps.keys()) ^ set(names))
            raise NameMismatch(f"archive {i} differs in parameter names: {diff}")
    out = OrderedDict()
    for name in names:
        first = param_sets[0][name]
        for i, ps in enumerate(param_sets[1:], start=1):
            if tuple(ps[name].shape) != tuple(first.shape):
                raise ShapeMismatch(f"{name}: archive {i} has shape {tuple(ps[name].shape)}, expected {tuple(first.shape)}")
        if isinstance(first, torch.Tensor) and not first.is_floating_point():
            out[name] = first.clone()
            continue
        acc = first.clone() if isinstance(first, torch.Tensor) else np.array(first, dtype=np.float64)
        for wk, ps in zip(w, param_sets):
            delta = ps[name] - first
            acc = acc + float(wk) * delta
        out[name] = acc
    return out


def fedprox_local_loss(base_loss, local_params, global_params, mu_prox):
    """base_loss + (mu/2) * sum ||local - global||^2 over the shared parameter names."""
    if set(local_params.keys()) != set(global_params.keys()):
        raise NameMismatch(f"parameter names differ: {sorted(set(local_params) ^ set(global_params))}")
    penalty = 0.0
    for name, p in local_params.items():
        penalty = penalty + ((p - global_params[name]) ** 2).sum()
    return base_loss + 0.5 * mu_prox * penalty


def _as_matrix(profile):
    if hasattr(profile, "controls"):
        profile = profile.controls
    if isinstance(profile, torch.Tensor):
        profile = profile.detach().cpu().double().numpy()
    return np.atleast_2d(np.asarray(profile, dtype=np.float64))


def aggregate_profiles(client_profiles, merge_threshold=0.8, tau_max=64) -> np.ndarray:
    """Cluster all uploaded controls into a global control set (greedy agglomerative surrogate).

    Controls are pooled and put in a canonical (lexicographic) order, so the
    result does not depend on client order. The most cosine-similar pair of
    cluster centroids is merged while its similarity is at least
    ``merge_threshold``; centroids are member-count-weighted means. If more than
    ``tau_max`` clusters remain, the largest are kept. Returns (n_clusters, d_p).
    """
    mats = [_as_matrix(p) for p in client_profiles]
    mats = [m for m in mats if m.size]
    if not mats:
        raise EmptyInput("no controls were uploaded")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise DimensionMismatch(f"uploaded controls have differing dimensions {sorted(dims)}")
    X = np.concatenate(mats)
    X = X[np.lexsort(X.T[::-1])]
    n = X.shape[0]

    members = [[i] for i in range(n)]
    centroids = X.copy()
    active = np.ones(n, dtype=bool)

    def unit(v):
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        return np.where(norm < 1e-12, 0.0, v / np.maximum(norm, 1e-12))

    U = unit(centroids)
    S = U @ U.T
    S[np.tril_indices(n)] = -np.inf
    while True:
        flat = int(np.argmax(S))
        i, j = divmod(flat, n)
        if not S[i, j] >= merge_threshold:
            break
        members[i] = sorted(members[i] + members[j])
        members[j] = []
        active[j] = False
        pts = X[members[i]]
        centroids[i] = pts[0] + (pts - pts[0]).mean(axis=0)
        S[j, :] = -np.inf
        S[:, j] = -np.inf
        u = unit(centroids[i])
        sims = unit(centroids) @ u
        row = np.where(active, sims, -np.inf)
        S[i, i + 1:] = row[i + 1:]
        S[:i, i] = row[:i]

    clusters = [k for k in range(n) if active[k]]
    if len(clusters) > tau_max:
        clusters = sorted(clusters, key=lambda k: (-len(members[k]), k))[:tau_max]
        clusters.sort()
    return centroids[clusters]


def pad_controls(controls, tau, seed, dtype=torch.float32):
    """Broadcast profile for a client: global controls, topped up with fresh random ones to ``tau``."""
    controls = torch.as_tensor(controls, dtype=dtype)
    if controls.shape[0] >= tau:
        return controls.clone()
    gen = torch.Generator().manual_seed(int(seed))
    fresh = init_controls(tau - controls.shape[0], controls.shape[1], gen, dtype=dtype)
    return torch.cat([controls, fresh])


def neural_params(model) -> OrderedDict:
    return OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items() if k != CONTROLS_KEY)


def load_state(model, state: GlobalState, tau: int, pad_seed: int):
    model.load_state_dict(state.params, strict=False)
    if model.profile is not None:
        dtype = model.head.weight.dtype
        model.profile.set_controls(pad_controls(state.controls, max(tau, model.kappa), pad_seed, dtype))
    return model


@dataclass
class FederatedData:
    """Masked client shards plus the unmasked server test set."""

    clients: list
    test: MultimodalDataset

    @property
    def feature_lens(self):
        return self.test.feature_lens

    @property
    def n_classes(self):
        return self.test.n_classes


def prepare_federated_data(dataset: MultimodalDataset, n_clients: int, train_stats: MissingStats, seed: int,
                           test_fraction=0.2, partition="iid", alpha=0.5) -> FederatedData:
    """Split 80/20 (by default), partition the training part and mask each client once."""
    train, test = train_test_split(dataset.without_mask(), test_fraction, derive_seed(seed, "split"))
    if partition == "iid":
        part = partition_iid(train, n_clients, derive_seed(seed, "partition"))
    elif partition == "dirichlet":
        part = partition_dirichlet(train, n_clients, alpha, derive_seed(seed, "partition"))
    else:
        raise ValueError(f"partition must be 'iid' or 'dirichlet', got {partition!r}")
    clients = []
    for k, idx in enumerate(part.assignments):
        shard = train.subset(idx)
        mask = make_missing_mask(shard.n_samples, shard.n_modalities, train_stats,
                                 derive_seed(seed, "train-mask", k))
        clients.append(apply_mask(shard, mask))
    return FederatedData(clients, test)


def mask_test_set(test: MultimodalDataset, stats: MissingStats, seed: int) -> MultimodalDataset:
    mask = make_missing_mask(test.n_samples, test.n_modalities, stats, seed)
    return apply_mask(test.without_mask(), mask)


def evaluate_model(model, test: MultimodalDataset, test_stats: MissingStats, seed: int) -> float:
    """Top-1 accuracy of ``model`` on ``test`` masked with a fresh mask drawn from ``seed``."""
    if test.n_samples == 0:
        raise EmptyTestSet("test set is empty")
    masked = mask_test_set(test, test_stats, seed)
    logits = predict_dataset(model, ClientData.from_dataset(masked, model.head.weight.dtype))
    pred = logits.argmax(dim=1).numpy()
    return float(np.mean(pred == masked.labels))


class Federation:
    """Holds the global state and drives rounds over a fixed set of clients."""

    def __init__(self, cfg: FederationConfig, data: FederatedData, seed: int, train_stats: MissingStats,
                 test_stats: MissingStats):
        self.cfg = cfg.validate()
        if len(data.clients) != cfg.n_clients:
            raise ValueError(f"config has {cfg.n_clients} clients but data has {len(data.clients)}")
        self.data = data
        self.seed = seed
        self.train_stats = train_stats
        self.test_stats = test_stats
        self.lam = cfg.resolved_lambda(train_stats.p_m)
        self.template = make_model(cfg, data.feature_lens, data.n_classes, derive_seed(seed, "init"))
        self.dtype = self.template.head.weight.dtype
        self.client_data = [ClientData.from_dataset(d, self.dtype) for d in data.clients]
        controls = None
        if self.template.profile is not None:
            controls = self.template.profile.controls.detach().clone()
        self.state = GlobalState(neural_params(self.template), controls, 0)
        self._eval_model = copy.deepcopy(self.template)
        self._workers = [copy.deepcopy(self.template) for _ in range(max(1, cfg.workers))]

    @property
    def uses_profile(self):
        return self.template.profile is not None

    def global_model(self):
        """A model loaded with the current global parameters and profile."""
        return load_state(self._eval_model, self.state, self.cfg.tau, derive_seed(self.seed, "pad-eval"))

    def _train_client(self, model, k, round_index):
        cfg = self.cfg
        load_state(model, self.state, cfg.tau, derive_seed(self.seed, "pad", round_index, k))
        prox = cfg.method == "fedprox"
        result = local_train(
            model, self.client_data[k], epochs=cfg.local_epochs, batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate, lam=self.lam, eta=cfg.eta,
            seed=derive_seed(self.seed, "local", round_index, k),
            fedprox_mu=cfg.fedprox_mu if prox else 0.0,
            global_params=self.state.params if prox else None,
        )
        upload = neural_params(model)
        controls = None
        if model.profile is not None:
            prof = model.profile
            keep = np.arange(prof.tau)
            if cfg.top_p is not None:
                keep = top_p_indices(prof.selection_counts, min(cfg.top_p, prof.tau))
            controls = prof.controls.detach()[torch.as_tensor(keep)].clone()
            prof.reset_counts()
        return k, result, upload, controls

    def run_round(self, log_rows=None) -> RoundRecord:
        cfg = self.cfg
        t = self.state.round + 1
        sampled = sample_clients(cfg.n_clients, cfg.clients_per_round, t, self.seed)
        order = sorted(sampled)
        if cfg.workers > 1 and len(order) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [pool.submit(self._train_client, copy.deepcopy(self.template), k, t) for k in order]
                uploads = [f.result() for f in futures]
        else:
            uploads = [self._train_client(self._workers[0], k, t) for k in order]
        uploads.sort(key=lambda u: u[0])

        weights = [1.0 if cfg.uniform_weights else float(u[1].n_samples) for u in uploads]
        params = fedavg([u[2] for u in uploads], weights)
        controls = self.state.controls
        if self.uses_profile:
            merged = aggregate_profiles([u[3] for u in uploads], cfg.merge_threshold, cfg.resolved_tau_max)
            controls = torch.as_tensor(merged, dtype=self.dtype)
        self.state = GlobalState(params, controls, t)

        if log_rows is not None:
            for k, res, _, _ in uploads:
                for row in res.epoch_rows:
                    log_rows.append({"round": t, "client": k, **row})
        acc = self.evaluate(self.test_stats, derive_seed(self.seed, "eval-mask", 0))
        mean = {c: float(np.mean([u[1].losses[c] for u in uploads])) for c in ("L_task", "L_ds", "L_rc", "R", "L")}
        size = 0 if controls is None else int(controls.shape[0])
        return RoundRecord(t, acc, mean["L_task"], mean["L_ds"], mean["L_rc"], mean["R"], mean["L"], size, sampled)

    def evaluate(self, test_stats: MissingStats, seed: int, test: MultimodalDataset = None) -> float:
        return evaluate_model(self.global_model(), test if test is not None else self.data.test, test_stats, seed)


def evaluate_global(federation: Federation, test_set, test_stats: MissingStats, seed: int) -> float:
    return federation.evaluate(test_stats, seed, test_set)


def run_round(federation: Federation) -> RoundRecord:
    return federation.run_round()


CLIENT_LOG_FIELDS = ("round", "client", "epoch", "L_task", "L_ds", "L_rc", "R", "L")


def save_checkpoint(state: GlobalState, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(dict(state.params), directory / "params.pt")
    if state.controls is not None:
        save_profile(state.controls, None, directory / "profile.txt")
    (directory / "round.txt").write_text(f"{state.round}\n", encoding="utf-8")
    return directory


def load_checkpoint(directory) -> GlobalState:
    from .profile import load_profile

    directory = Path(directory)
    params = OrderedDict(torch.load(directory / "params.pt", weights_only=True))
    controls = None
    if (directory / "profile.txt").is_file():
        controls = torch.as_tensor(load_profile(directory / "profile.txt")[0], dtype=torch.float32)
    rnd = 0
    if (directory / "round.txt").is_file():
        rnd = int((directory / "round.txt").read_text().strip() or 0)
    return GlobalState(params, controls, rnd)


@dataclass
class FederationResult:
    records: list
    federation: Federation
    log_rows: list = field(default_factory=list)

    @property
    def final_accuracy(self):
        return self.records[-1].global_accuracy if self.records else None


def run_federation(cfg: FederationConfig, data: FederatedData, seed: int, train_stats: MissingStats,
                   test_stats: MissingStats, out_dir=None) -> FederationResult:
    """Run ``cfg.rounds`` rounds; when ``out_dir`` is given, rounds.csv grows after every round."""
    fed = Federation(cfg, data, seed, train_stats, test_stats)
    records, log_rows = [], []
    rounds_path = client_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rounds_path = out_dir / "rounds.csv"
        with rounds_path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(RoundRecord.FIELDS)
        client_log = out_dir / "client_log.csv"
        with client_log.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CLIENT_LOG_FIELDS)
    for _ in range(cfg.rounds):
        rows = []
        rec = fed.run_round(rows)
        records.append(rec)
        log_rows.extend(rows)
        log.info("round %d accuracy %.4f profile %d", rec.round, rec.global_accuracy, rec.global_profile_size)
        if rounds_path is not None:
            with rounds_path.open("a", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(rec.csv_row())
            with client_log.open("a", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for r in rows:
                    w.writerow([r["round"], r["client"], r["epoch"]] + [repr(float(r[c])) for c in CLIENT_LOG_FIELDS[3:]])
            if cfg.checkpoint_every and rec.round % cfg.checkpoint_every == 0:
                save_checkpoint(fed.state, out_dir / "checkpoints" / f"round_{rec.round:04d}")
    if out_dir is not None:
        save_checkpoint(fed.state, out_dir / "final")
    return FederationResult(records, fed, log_rows)
