"""Multimodal item encoders, LightGCN aggregation, and training losses.

Items are represented as the element-wise sum of a free ID embedding
and a fused modality encoding. Each modality runs through a small MLP
(linear, tanh, layer norm, dropout per layer); a linear fuser followed
by tanh merges the modality outputs. User and item representations are
then propagated over the normalized interaction graph LightGCN-style
and summed across layers.

The alignment loss pulls graph-adjacent items together: for an anchor
m with in-batch neighbors n it is the negative log of the weighted
share that edges of m take of the anchor's total similarity mass,
with cosine similarities and a temperature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import SparseMatrix, Tensor
from .data import ROLE_TRAIN
from .optim import ParamStore, xavier_uniform

__all__ = [
    "ModelConfig",
    "MultimodalRecommender",
    "build_propagation_matrix",
    "bpr_loss",
    "neighborhood_alignment_loss",
    "joint_loss",
    "predict_scores",
    "eligible_anchor_items",
    "build_na_batch",
    "na_batch_from_items",
]

_MODALITIES = ("visual", "textual")


@dataclass
class ModelConfig:
    num_users: int
    num_items: int
    visual_dim: int = 0
    textual_dim: int = 0
    embed_dim: int = 64
    hidden_dim: int = 512
    depth: int = 2
    gcn_layers: int = 2
    dropout: float = 0.0
    dtype: object = np.float32

    def modality_dims(self):
        dims = {}
        if self.visual_dim > 0:
            dims["visual"] = self.visual_dim
        if self.textual_dim > 0:
            dims["textual"] = self.textual_dim
        return dims


class MultimodalRecommender:
    """MLP modality encoders plus LightGCN over the interaction graph."""

    def __init__(self, cfg, rng):
        dims = cfg.modality_dims()
        if not dims:
            raise ValueError("at least one modality dimension must be positive")
        if cfg.depth < 1:
            raise ValueError(f"encoder depth must be >= 1, got {cfg.depth}")
        if cfg.gcn_layers < 0:
            raise ValueError(f"gcn layer count must be >= 0, got {cfg.gcn_layers}")
        self.cfg = cfg
        self.params = ParamStore()
        dtype = cfg.dtype
        self.params.add(
            "user_embed", xavier_uniform(rng, (cfg.num_users, cfg.embed_dim), dtype)
        )
        self.params.add(
            "item_embed", xavier_uniform(rng, (cfg.num_items, cfg.embed_dim), dtype)
        )
        for tag in _MODALITIES:
            if tag not in dims:
                continue
            widths = [dims[tag]] + [cfg.hidden_dim] * (cfg.depth - 1) + [cfg.embed_dim]
            for layer in range(cfg.depth):
                d_in, d_out = widths[layer], widths[layer + 1]
                self.params.add(f"{tag}_mlp{layer}_w", xavier_uniform(rng, (d_in, d_out), dtype))
                self.params.add(f"{tag}_mlp{layer}_b", np.zeros((1, d_out), dtype=dtype))
                self.params.add(f"{tag}_mlp{layer}_gain", np.ones((1, d_out), dtype=dtype))
                self.params.add(f"{tag}_mlp{layer}_bias", np.zeros((1, d_out), dtype=dtype))
        fuse_in = cfg.embed_dim * len(dims)
        self.params.add("fuser_w", xavier_uniform(rng, (fuse_in, cfg.embed_dim), dtype))
        self.params.add("fuser_b", np.zeros((1, cfg.embed_dim), dtype=dtype))

    def _encode_modality(self, tag, values, train_mode, rng):
        x = Tensor(np.asarray(values, dtype=self.cfg.dtype))
        if x.cols != self.cfg.modality_dims()[tag]:
            raise ValueError(
                f"{tag} features have dim {x.cols}, model expects "
                f"{self.cfg.modality_dims()[tag]}"
            )
        for layer in range(self.cfg.depth):
            x = ag.linear(x, self.params[f"{tag}_mlp{layer}_w"], self.params[f"{tag}_mlp{layer}_b"])
            x = ag.tanh(x)
            x = ag.layer_norm(
                x, self.params[f"{tag}_mlp{layer}_gain"], self.params[f"{tag}_mlp{layer}_bias"]
            )
            x = ag.dropout(x, self.cfg.dropout, rng, train_mode)
        return x

    def encode_items(self, features, train_mode=False, rng=None, return_branches=False):
        """Fused modality encoding for all items, shape (num_items, d).

        features maps modality name to its raw array. Branch outputs are
        also returned when asked (used by per-modality alignment terms).
        """
        dims = self.cfg.modality_dims()
        branches = {}
        for tag in _MODALITIES:
            if tag in dims:
                if tag not in features or features[tag] is None:
                    raise ValueError(f"model expects {tag} features but none were given")
                branches[tag] = self._encode_modality(tag, features[tag], train_mode, rng)
        parts = [branches[tag] for tag in _MODALITIES if tag in branches]
        merged = parts[0] if len(parts) == 1 else ag.concat_cols(parts[0], parts[1])
        fused = ag.tanh(ag.linear(merged, self.params["fuser_w"], self.params["fuser_b"]))
        if return_branches:
            return fused, branches
        return fused

    def aggregate(self, h_items, s_ui, s_iu):
        """LightGCN propagation; returns layer-summed (z_users, z_items)."""
        h_u = self.params["user_embed"]
        h_i = ag.add(self.params["item_embed"], h_items)
        z_u, z_i = h_u, h_i
        for _ in range(self.cfg.gcn_layers):
            h_u, h_i = ag.spmm(s_ui, h_i), ag.spmm(s_iu, h_u)
            z_u = ag.add(z_u, h_u)
            z_i = ag.add(z_i, h_i)
        return z_u, z_i

    def forward(self, features, s_ui, s_iu, train_mode=False, rng=None):
        h_items = self.encode_items(features, train_mode=train_mode, rng=rng)
        z_u, z_i = self.aggregate(h_items, s_ui, s_iu)
        return z_u, z_i, h_items

    def embeddings(self, features, s_ui, s_iu):
        """Evaluation-mode user/item representation arrays."""
        z_u, z_i, _ = self.forward(features, s_ui, s_iu, train_mode=False)
        return z_u.values, z_i.values


def build_propagation_matrix(table, dtype=np.float32):
    """Symmetrically normalized user-item matrix over train edges.

    Entry (u, i) is 1/sqrt(deg_u * deg_i); zero-degree rows and columns
    stay zero, so isolated nodes propagate nothing.
    """
    edges = table.role_edges(ROLE_TRAIN)
    u = edges[:, 0]
    i = edges[:, 1]
    deg_u = np.bincount(u, minlength=table.num_users).astype(np.float64)
    deg_i = np.bincount(i, minlength=table.num_items).astype(np.float64)
    vals = 1.0 / np.sqrt(deg_u[u] * deg_i[i])
    mat = sp.csr_matrix(
        (vals.astype(dtype), (u, i)), shape=(table.num_users, table.num_items)
    )
    s_ui = SparseMatrix(mat)
    return s_ui, s_ui.transposed()


def bpr_loss(z_users, z_items, batch):
    """Mean of -log sigmoid(pos score - neg score) over the triples."""
    if len(batch) == 0:
        raise ValueError("empty BPR batch")
    z_u = ag.gather_rows(z_users, batch.users)
    z_p = ag.gather_rows(z_items, batch.pos_items)
    z_n = ag.gather_rows(z_items, batch.neg_items)
    gap = ag.sub(ag.row_dot(z_u, z_p), ag.row_dot(z_u, z_n))
    return ag.tmean(ag.softplus(ag.neg(gap)))


def neighborhood_alignment_loss(reps, anchor_rows, anchor_weights, temperature=1.0):
    """Contrast anchors against the batch under graph-edge weighting.

    reps holds the batch representations (one row per batch item);
    anchor_rows indexes the anchors within the batch; anchor_weights is
    the (anchors, batch) slice of the supervision graph. For each anchor
    the loss is -log of (weighted similarity mass of its edges) over
    (total similarity mass), self excluded on both sides. Anchors with
    no positive in-batch weight are dropped from the mean; if every
    anchor drops, the loss is 0 (with a warning).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    batch_size = reps.rows
    if batch_size < 2:
        raise ValueError(f"alignment loss needs at least 2 batch items, got {batch_size}")
    anchor_rows = np.asarray(anchor_rows, dtype=np.int64)
    weights = np.asarray(anchor_weights, dtype=reps.values.dtype)
    if weights.shape != (len(anchor_rows), batch_size):
        raise ValueError(
            f"anchor weights shape {weights.shape} does not match "
            f"({len(anchor_rows)}, {batch_size})"
        )
    if (weights < 0).any():
        raise ValueError("alignment weights must be non-negative")

    normed = ag.normalize_rows(reps)
    sims = ag.matmul(ag.gather_rows(normed, anchor_rows), ag.transpose(normed))
    logits = ag.scale(sims, 1.0 / temperature)
    shift = logits.values.max(axis=1, keepdims=True)
    expd = ag.exp(ag.add_const(logits, -shift))

    self_mask = np.ones_like(weights)
    self_mask[np.arange(len(anchor_rows)), anchor_rows] = 0.0
    weights = weights * self_mask
    numer = ag.tsum(ag.mul_const(expd, weights), axis=1)
    denom = ag.tsum(ag.mul_const(expd, self_mask), axis=1)

    included = np.flatnonzero(numer.values[:, 0] > 0)
    if included.size == 0:
        warnings.warn("no anchor has an in-batch neighbor; alignment loss is 0")
        return Tensor(np.zeros((1, 1), dtype=reps.values.dtype))
    if included.size < len(anchor_rows):
        numer = ag.gather_rows(numer, included)
        denom = ag.gather_rows(denom, included)
    return ag.neg(ag.tmean(ag.sub(ag.log(numer), ag.log(denom))))


def joint_loss(bpr, na, na_weight, l2_weight=0.0, store=None):
    """BPR plus the weighted alignment term plus the L2 penalty value.

    With na_weight 0 the alignment term is dropped entirely, so no
    gradient flows through it. The L2 term enters the reported value
    here; its gradient is realized as decoupled weight decay in the
    optimizer step.
    """
    if na_weight != 0.0 and na is not None:
        total = ag.add(bpr, ag.scale(na, na_weight))
    else:
        total = bpr
    if l2_weight > 0.0 and store is not None:
        total = ag.add_const(total, l2_weight * store.l2_norm_sq())
    return total


def predict_scores(z_users, z_items, user_rows=None, block_size=1024):
    """Dense user-by-item inner products, computed in user blocks."""
    z_users = np.asarray(z_users)
    z_items = np.asarray(z_items)
    if user_rows is None:
        user_rows = np.arange(z_users.shape[0])
    user_rows = np.asarray(user_rows, dtype=np.int64)
    out = np.empty((len(user_rows), z_items.shape[0]), dtype=z_users.dtype)
    for start in range(0, len(user_rows), block_size):
        stop = min(start + block_size, len(user_rows))
        out[start:stop] = z_users[user_rows[start:stop]] @ z_items.T
    return out


def eligible_anchor_items(graph):
    """Items with at least one positive-weight out-edge."""
    keep = np.zeros(graph.num_nodes, dtype=bool)
    for m in range(graph.num_nodes):
        _, w = graph.row(m)
        if len(w) and (w > 0).any():
            keep[m] = True
    return np.flatnonzero(keep)


def _weights_slice(graph, anchors, batch_ids, dtype):
    weights = np.zeros((len(anchors), len(batch_ids)), dtype=dtype)
    for row, a in enumerate(anchors):
        cols, w = graph.row(int(a))
        if not len(cols):
            continue
        pos = np.searchsorted(batch_ids, cols)
        ok = (pos < len(batch_ids)) & (batch_ids[np.minimum(pos, len(batch_ids) - 1)] == cols)
        weights[row, pos[ok]] = w[ok]
    return weights


def build_na_batch(graph, rng, num_anchors, eligible=None, dtype=np.float32):
    """Sample alignment anchors and force one neighbor each into the batch.

    Anchors are drawn uniformly without replacement from items with a
    positive-weight out-edge; each contributes one uniformly chosen such
    neighbor. Returns (batch item ids sorted unique, anchor positions
    within the batch, (anchors, batch) weight slice), or None when the
    graph has no eligible anchor.
    """
    if eligible is None:
        eligible = eligible_anchor_items(graph)
    if len(eligible) == 0:
        return None
    take = min(num_anchors, len(eligible))
    anchors = np.sort(rng.choice(eligible, size=take, replace=False))
    partners = np.empty(take, dtype=np.int64)
    for row, a in enumerate(anchors):
        cols, w = graph.row(int(a))
        pos = cols[w > 0]
        partners[row] = pos[rng.integers(0, len(pos))]
    batch_ids = np.unique(np.concatenate([anchors, partners]))
    anchor_rows = np.searchsorted(batch_ids, anchors)
    weights = _weights_slice(graph, anchors, batch_ids, dtype)
    return batch_ids, anchor_rows, weights


def na_batch_from_items(graph, item_ids, dtype=np.float32):
    """Alignment batch over given items, every item serving as anchor."""
    batch_ids = np.unique(np.asarray(item_ids, dtype=np.int64))
    anchor_rows = np.arange(len(batch_ids))
    weights = _weights_slice(graph, batch_ids, batch_ids, dtype)
    return batch_ids, anchor_rows, weights
