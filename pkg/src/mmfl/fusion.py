"""Client model: representation assembly, reconfiguration loss, fusion, gating, prediction and local training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyClient, InsufficientBatch, ShapeMismatch
from .profile import DataMissingProfile, cosine_matrix, topk_indices
from .representation import ModalityEmbeddingTable, ModalityEncoder, contrastive_loss, impute_batch

log = logging.getLogger(__name__)

VARIANTS = ("pepsy", "pepsy_np", "pepsy_nr", "plain")


def assemble(w_mod, w_ins, w_mis):
    """Concatenate (modality, data-specific, missing-pattern) features along the last axis."""
    if w_mod.shape[:-1] != w_ins.shape[:-1] or w_mod.shape[:-1] != w_mis.shape[:-1]:
        raise ShapeMismatch("assemble inputs must share leading dimensions")
    if w_mod.shape[-1] != w_ins.shape[-1]:
        raise ShapeMismatch(f"w_mod and w_ins dims differ: {w_mod.shape[-1]} vs {w_ins.shape[-1]}")
    return torch.cat([w_mod, w_ins, w_mis], dim=-1)


def reconfiguration_loss(projected, reduction="sum"):
    """Contrastive loss over projected representations of all modalities (imputed ones included)."""
    return contrastive_loss(projected, None, reduction)


def fuse(w_all, w_hat_all, temperature=1.0, return_weights=False):
    """Cross-modal representation: softmax(w_hat_i . w_hat_j / T) weighted sum of w_j over all modalities."""
    if w_all.shape[:-1] != w_hat_all.shape[:-1]:
        raise ShapeMismatch("fuse needs one projected vector per modality representation")
    attn = torch.softmax(w_hat_all @ w_hat_all.transpose(-1, -2) / temperature, dim=-1)
    c_hat = attn @ w_all
    return (c_hat, attn) if return_weights else c_hat


def gate(gate_layer: nn.Linear, w, c_hat):
    """Return (c, alpha) with alpha = sigmoid(s([w, c_hat])) and c = alpha*c_hat + (1-alpha)*w."""
    if w.shape != c_hat.shape:
        raise ShapeMismatch(f"gate inputs differ in shape: {tuple(w.shape)} vs {tuple(c_hat.shape)}")
    if gate_layer.in_features != 2 * w.shape[-1]:
        raise ShapeMismatch(f"gate expects inputs of dim {gate_layer.in_features // 2}, got {w.shape[-1]}")
    alpha = torch.sigmoid(gate_layer(torch.cat([w, c_hat], dim=-1)))
    return alpha * c_hat + (1 - alpha) * w, alpha


def predict(head: nn.Linear, c_all):
    """Logits from the order-fixed concatenation of per-modality representations, c_all: (B, M, D)."""
    flat = c_all.reshape(c_all.shape[0], -1)
    if flat.shape[-1] != head.in_features:
        raise ShapeMismatch(f"head expects {head.in_features} inputs, got {flat.shape[-1]}")
    return head(flat)


def total_loss(task_loss, l_ds, l_rc, relevance_R, lam, eta):
    return task_loss + lam * (l_ds + l_rc) - eta * relevance_R


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    h: torch.Tensor
    avail: torch.Tensor
    w: Optional[torch.Tensor] = None
    w_hat: Optional[torch.Tensor] = None
    c: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None
    selection: Optional[torch.Tensor] = None
    selected_sims: Optional[torch.Tensor] = None


class ClientModel(nn.Module):
    """Every learnable piece a client trains.

    ``variant`` selects the full method ("pepsy"), the no-profile ablation
    ("pepsy_np": zero missing-pattern features, no relevance term) or the
    no-reconfiguration ablation ("pepsy_nr": no projection, fusion or gate).
    """

    def __init__(self, feature_lens, n_classes, embed_dim=16, tau=16, kappa=4, d_p=None,
                 temperature=1.0, vector_gate=False, variant="pepsy", hidden_dim=None, seed=0):
        super().__init__()
        if variant not in VARIANTS[:3]:
            raise ValueError(f"unknown variant {variant!r}")
        gen = torch.Generator().manual_seed(seed)
        prev = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            M = len(feature_lens)
            d_p = d_p or embed_dim
            self.variant = variant
            self.n_modalities = M
            self.embed_dim = embed_dim
            self.kappa = kappa
            self.temperature = temperature
            self.rep_dim = 2 * embed_dim + d_p
            self.encoders = nn.ModuleList(ModalityEncoder(f, embed_dim, hidden_dim) for f in feature_lens)
            self.modality_embeddings = ModalityEmbeddingTable(M, embed_dim)
            self.profile = None
            if variant != "pepsy_np":
                self.profile = DataMissingProfile(tau, d_p, 2 * embed_dim, generator=gen)
            if variant != "pepsy_nr":
                self.reconfig_projector = nn.Linear(self.rep_dim, embed_dim)
                self.gate_layer = nn.Linear(2 * self.rep_dim, self.rep_dim if vector_gate else 1)
            self.head = nn.Linear(M * self.rep_dim, n_classes)
        finally:
            torch.random.set_rng_state(prev)

    def encode_all(self, xs, avail):
        return torch.stack([enc(x, avail[:, j]) for j, (enc, x) in enumerate(zip(self.encoders, xs))], dim=1)

    def representations(self, xs, avail, selection=None, update_counts=False):
        """Encode, impute, select controls and assemble w. Returns (h, w, selection, selected_sims)."""
        B = avail.shape[0]
        h = self.encode_all(xs, avail)
        w_ins = impute_batch(h, avail)
        w_mod = self.modality_embeddings(B)
        sel = sel_sims = None
        if self.profile is not None:
            q = self.profile.query(w_mod, w_ins)
            sims = cosine_matrix(q, self.profile.controls)
            sel = selection if selection is not None else topk_indices(sims.detach(), self.kappa)
            sel_sims = torch.gather(sims, -1, sel)
            if update_counts:
                self.profile.record_selection(sel)
            w_mis = self.profile.controls[sel].mean(dim=-2)
        else:
            w_mis = torch.zeros(B, self.n_modalities, self.rep_dim - 2 * self.embed_dim, dtype=h.dtype)
        return h, assemble(w_mod, w_ins, w_mis), sel, sel_sims

    def post_process(self, w):
        """Fusion, gating and prediction from assembled representations w: (B, M, rep_dim).

        Returns (logits, w_hat, c, alpha); w_hat and alpha are None without reconfiguration.
        """
        if self.variant == "pepsy_nr":
            return predict(self.head, w), None, w, None
        w_hat = F.normalize(self.reconfig_projector(w), dim=-1)
        c_hat = fuse(w, w_hat, self.temperature)
        c, alpha = gate(self.gate_layer, w, c_hat)
        return predict(self.head, c), w_hat, c, alpha

    def forward(self, xs, avail, selection=None, update_counts=False):
        h, w, sel, sel_sims = self.representations(xs, avail, selection, update_counts)
        logits, w_hat, c, alpha = self.post_process(w)
        return ForwardOutput(logits, h, avail, w, w_hat, c, alpha, sel, sel_sims)

    def losses(self, out: ForwardOutput, y, contrastive=True, reduction="mean"):
        """Loss components; R is normalized per (instance, modality) query when reduction='mean'."""
        zero = out.logits.sum() * 0.0
        l_task = F.cross_entropy(out.logits, y)
        l_ds = l_rc = relevance = zero
        if contrastive:
            l_ds = contrastive_loss(out.h, out.avail, reduction)
            if out.w_hat is not None:
                l_rc = contrastive_loss(out.w_hat, None, reduction)
        if out.selected_sims is not None:
            relevance = out.selected_sims.sum()
            if reduction == "mean":
                relevance = relevance / (out.selected_sims.shape[0] * out.selected_sims.shape[1])
        return {"L_task": l_task, "L_ds": l_ds, "L_rc": l_rc, "R": relevance}


class PlainMultimodalClassifier(nn.Module):
    """Baseline that ignores missingness: encoders see zero-filled inputs, head reads the concatenation."""

    variant = "plain"
    profile = None

    def __init__(self, feature_lens, n_classes, embed_dim=16, hidden_dim=None, seed=0, **_):
        super().__init__()
        prev = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.n_modalities = len(feature_lens)
            self.embed_dim = embed_dim
            self.rep_dim = embed_dim
            self.encoders = nn.ModuleList(ModalityEncoder(f, embed_dim, hidden_dim) for f in feature_lens)
            self.head = nn.Linear(len(feature_lens) * embed_dim, n_classes)
        finally:
            torch.random.set_rng_state(prev)

    def encode_all(self, xs, avail=None):
        return torch.stack([enc(x) for enc, x in zip(self.encoders, xs)], dim=1)

    def post_process(self, w):
        return predict(self.head, w), None, w, None

    def forward(self, xs, avail, selection=None, update_counts=False):
        h = self.encode_all(xs)
        return ForwardOutput(predict(self.head, h), h, avail, c=h)

    def losses(self, out, y, contrastive=True, reduction="mean"):
        zero = out.logits.sum() * 0.0
        return {"L_task": F.cross_entropy(out.logits, y), "L_ds": zero, "L_rc": zero, "R": zero}


def build_model(method, feature_lens, n_classes, *, embed_dim=16, tau=16, kappa=4, d_p=None,
                temperature=1.0, vector_gate=False, hidden_dim=None, seed=0):
    if method in ("fedavg_plain", "fedprox", "plain"):
        return PlainMultimodalClassifier(feature_lens, n_classes, embed_dim=embed_dim, hidden_dim=hidden_dim, seed=seed)
    return ClientModel(feature_lens, n_classes, embed_dim=embed_dim, tau=tau, kappa=kappa, d_p=d_p,
                       temperature=temperature, vector_gate=vector_gate, variant=method,
                       hidden_dim=hidden_dim, seed=seed)


@dataclass
class ClientData:
    """Tensors of one client's (masked) dataset, prepared once."""

    xs: list
    avail: torch.Tensor
    y: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset, dtype=torch.float32):
        return cls(
            xs=[torch.tensor(np.asarray(x), dtype=dtype) for x in dataset.features],
            avail=torch.as_tensor(dataset.available()),
            y=torch.tensor(np.asarray(dataset.labels), dtype=torch.long),
        )

    def __len__(self):
        return int(self.y.shape[0])

    def batch(self, idx):
        return [x[idx] for x in self.xs], self.avail[idx], self.y[idx]


COMPONENTS = ("L_task", "L_ds", "L_rc", "R", "L")


@dataclass
class LocalResult:
    n_samples: int
    losses: dict
    epoch_rows: list = field(default_factory=list)


def proximal_penalty(model, global_params):
    total = 0.0
    for name, p in model.named_parameters():
        if name in global_params and global_params[name].shape == p.shape:
            total = total + ((p - global_params[name]) ** 2).sum()
    return total


def local_train(model, data, epochs=3, batch_size=32, learning_rate=0.01, lam=0.1, eta=0.1, seed=0,
                fedprox_mu=0.0, global_params=None):
    """Mini-batch SGD on L = L_task + lam*(L_ds + L_rc) - eta*R for ``epochs`` passes over ``data``.

    ``model`` is updated in place. Batches with fewer than two instances skip the
    contrastive terms. Returns mean loss components over all batches plus one row
    per epoch.
    """
    if not isinstance(data, ClientData):
        data = ClientData.from_dataset(data, model.head.weight.dtype)
    n = len(data)
    if n == 0:
        raise EmptyClient("client has no samples")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if global_params is not None and fedprox_mu > 0:
        global_params = {k: v.detach() for k, v in global_params.items()}
    model.train()
    opt = torch.optim.SGD([p for p in model.parameters()], lr=learning_rate)
    gen = torch.Generator().manual_seed(int(seed))
    totals = dict.fromkeys(COMPONENTS, 0.0)
    n_batches = 0
    rows = []
    for epoch in range(epochs):
        ep = dict.fromkeys(COMPONENTS, 0.0)
        ep_batches = 0
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            xs, avail, y = data.batch(idx)
            contrastive = idx.numel() >= 2
            if not contrastive:
                log.warning("batch of %d instance skips the contrastive terms", idx.numel())
            out = model(xs, avail, update_counts=True)
            parts = model.losses(out, y, contrastive=contrastive)
            loss = total_loss(parts["L_task"], parts["L_ds"], parts["L_rc"], parts["R"], lam, eta)
            if global_params is not None and fedprox_mu > 0:
                loss = loss + 0.5 * fedprox_mu * proximal_penalty(model, global_params)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            parts["L"] = loss
            for k in COMPONENTS:
                ep[k] += float(parts[k].detach())
            ep_batches += 1
        for k in COMPONENTS:
            totals[k] += ep[k]
        n_batches += ep_batches
        rows.append({"epoch": epoch, **{k: ep[k] / ep_batches for k in COMPONENTS}})
    return LocalResult(n, {k: totals[k] / n_batches for k in COMPONENTS}, rows)


@torch.no_grad()
def predict_dataset(model, data, batch_size=512):
    if not isinstance(data, ClientData):
        data = ClientData.from_dataset(data, model.head.weight.dtype)
    model.eval()
    logits = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        xs, avail, _ = data.batch(idx)
        logits.append(model(xs, avail).logits)
    return torch.cat(logits)
