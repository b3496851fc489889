"""Gated fusion of the backbone forecast with the retrieved future prior.

The prior is projected into prediction space, gated elementwise by a sigmoid
of both signals, and added through a learnable scalar that starts at exactly
zero, so an untrained model reproduces the backbone forecast bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var


@dataclass
class FusionParams:
    prior_proj: Var  # (H, H), identity init, no bias
    gate: Var  # (H, 2H), zero init so the gate starts at 0.5 everywhere
    scale: Var  # (1, 1) learnable scalar, zero init

    @classmethod
    def init(cls, cfg, store: ParamStore) -> "FusionParams":
        return cls(
            prior_proj=store.register("fusion.prior_proj", np.eye(cfg.horizon)),
            gate=store.register("fusion.gate", np.zeros((cfg.horizon, 2 * cfg.horizon))),
            scale=store.register("fusion.scale", np.zeros((1, 1))),
        )


def fuse(backbone_pred: Var, prior: Var, params: FusionParams, valid: np.ndarray) -> Var:
    """backbone + scale * (gate ⊙ projected prior), rows with valid=0 pass through exactly.

    `valid` is an (n, 1) 0/1 array flagging regions whose retrieval produced
    candidates; invalid rows skip the correction path entirely.
    """
    projected = ad.matmul(prior, ad.transpose(params.prior_proj))
    gate = ad.sigmoid(ad.matmul(ad.concat([backbone_pred, projected], axis=1), ad.transpose(params.gate)))
    correction = ad.mul(ad.mul(params.scale, ad.constant(valid)), ad.mul(gate, projected))
    return ad.add(backbone_pred, correction)
