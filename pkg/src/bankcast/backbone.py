"""Inductive contextual graph backbone.

Nodes are regions; edges come from context similarity only, so the same
parameters evaluate any region set (observable subset during training, all
regions at inference). Histories enter through a linear temporal encoder after
zero-masking, message passing mixes temporal and contextual signals with a
residual, and a small MLP head maps node states to the forecast horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


@dataclass
class BackboneParams:
    context_proj: Var  # (d_g, d_c), no bias
    temporal_proj: Var  # (d_z, W), no bias
    gcn: list[Var]  # square (d_z+d_g, d_z+d_g) per layer
    head_in_w: Var  # (hidden, d_z+d_g)
    head_in_b: Var
    blocks: list[tuple[Var, Var]]  # residual (hidden, hidden) + bias
    head_out_w: Var  # (H, hidden)
    head_out_b: Var

    @classmethod
    def init(cls, cfg, rng: np.random.Generator, store: ParamStore) -> "BackboneParams":
        node_dim = cfg.d_z + cfg.d_g
        gcn = [
            store.register(f"backbone.gcn.{l}", glorot(rng, node_dim, node_dim))
            for l in range(cfg.gcn_layers)
        ]
        blocks = [
            (
                store.register(f"backbone.head.block{i}.w", glorot(rng, cfg.hidden, cfg.hidden)),
                store.register(f"backbone.head.block{i}.b", np.zeros((1, cfg.hidden))),
            )
            for i in range(cfg.head_blocks)
        ]
        return cls(
            context_proj=store.register("backbone.context_proj", glorot(rng, cfg.d_g, cfg.d_c)),
            temporal_proj=store.register(
                "backbone.temporal_proj", glorot(rng, cfg.d_z, cfg.window)
            ),
            gcn=gcn,
            head_in_w=store.register("backbone.head.in.w", glorot(rng, cfg.hidden, node_dim)),
            head_in_b=store.register("backbone.head.in.b", np.zeros((1, cfg.hidden))),
            blocks=blocks,
            head_out_w=store.register("backbone.head.out.w", glorot(rng, cfg.horizon, cfg.hidden)),
            head_out_b=store.register("backbone.head.out.b", np.zeros((1, cfg.horizon))),
        )


def project_context(contexts: Var, proj: Var) -> Var:
    """(n, d_c) -> (n, d_g), pure linear map."""
    return ad.matmul(contexts, ad.transpose(proj))


def build_adjacency(node_embed: Var) -> Var:
    """Row-stochastic similarity adjacency: row_softmax(gelu(G G^T)).

    Depends on contexts only, so it is identical for active and inactive regions.
    """
    sim = ad.matmul(node_embed, ad.transpose(node_embed))
    return ad.row_softmax(ad.gelu(sim), temperature=1.0)


def encode_history(history_rows: Var, proj: Var) -> Var:
    """(n, W) zero-masked normalized histories -> (n, d_z); all-zero rows stay zero."""
    return ad.matmul(history_rows, ad.transpose(proj))


def message_pass(h0: Var, adjacency: Var, layer_weights: list[Var]) -> Var:
    """Residual graph convolutions: h <- relu(A h W) + h."""
    h = h0
    for w in layer_weights:
        if w.value.shape[0] != w.value.shape[1] or w.value.shape[0] != h.value.shape[1]:
            raise ValueError(f"message-passing weight must be square {h.value.shape[1]}, got {w.value.shape}")
        h = ad.add(ad.relu(ad.matmul(ad.matmul(adjacency, h), w)), h)
    return h


def forecast_head(h: Var, p: BackboneParams) -> Var:
    """Node states -> (n, H): linear-in, residual ReLU blocks, linear-out."""
    x = ad.add(ad.matmul(h, ad.transpose(p.head_in_w)), p.head_in_b)
    for w, b in p.blocks:
        x = ad.add(ad.relu(ad.add(ad.matmul(x, ad.transpose(w)), b)), x)
    return ad.add(ad.matmul(x, ad.transpose(p.head_out_w)), p.head_out_b)
