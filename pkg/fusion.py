# fusion.py
# Pose-guided semantic query, gated pose/visual fusion and single-query
# cross-attention over the gated penultimate tokens.
#
# Every function accepts optional leading batch axes: tokens are (..., N, D),
# per-clip vectors are (..., D).

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

import numeric as nm
from config import GATE_MODES
from errors import ConfigError, ContractError, DimensionError
from pose_io import PoseWindows, patch_relevance


@dataclass
class FusionFlags:
    pose_branch: bool = True
    pose_guidance: bool = True
    alpha_gate: bool = True
    gating: bool = True
    cross_attention: bool = True
    concat_query: bool = False
    gate_mode: str = "literal"
    motion_weighting: bool = False
    learned_qkv: bool = False


class FusionParams:
    """Square D x D projections W_alpha, W_g, W_u (plus optional Q/K/V and
    the concatenation projection used when gates are removed).

    Only the projections the flags switch on are allocated.
    """

    def __init__(self, rng, dim, flags: FusionFlags, sigma_rel):
        if flags.gate_mode not in GATE_MODES:
            raise ConfigError(f"Unknown gate mode '{flags.gate_mode}' (expected one of {GATE_MODES})")
        if sigma_rel <= 0:
            raise ConfigError(f"sigma_rel must be positive, got {sigma_rel}")
        self.dim = dim
        self.flags = flags
        self.sigma_rel = sigma_rel
        std = 1.0 / math.sqrt(dim)
        self.params = {}
        names = []
        if flags.pose_branch and flags.alpha_gate:
            names.append("w_alpha")
        if flags.pose_branch and flags.gating:
            names += ["w_g", "w_u"]
        for name in names:
            self.params[name] = nm.parameter(rng.normal(0.0, std, size=(dim, dim)), name=f"fusion.{name}")
        if flags.learned_qkv:
            for name in ("w_q", "w_k", "w_v"):
                self.params[name] = nm.parameter(rng.normal(0.0, std, size=(dim, dim)), name=f"fusion.{name}")
        if flags.concat_query:
            self.params["w_cat"] = nm.parameter(
                rng.normal(0.0, 1.0 / math.sqrt(2 * dim), size=(dim, 2 * dim)), name="fusion.w_cat")

    def __getitem__(self, name):
        return self.params[name]

    def named_parameters(self):
        return dict(self.params)


@dataclass
class FusionState:
    """Intermediates of one fusion pass (batched along leading axes)."""
    weights: np.ndarray
    alpha: np.ndarray
    gated_tokens: nm.Tensor
    query: nm.Tensor
    fused_query: nm.Tensor
    gated_values: nm.Tensor | None = None
    g: np.ndarray | None = None
    u: np.ndarray | None = None
    attention: nm.Tensor | None = None
    output: nm.Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def num_tokens(self):
        return self.gated_tokens.shape[-2]


def _as_row(vec):
    """(..., D) -> (..., 1, D)."""
    return nm.reshape(vec, vec.shape[:-1] + (1, vec.shape[-1]))


def token_gate_alpha(tokens, pose_proj, w_alpha):
    """alpha = sigmoid(<W_alpha h, z>) per token; returns (z * alpha, alpha)."""
    tokens, pose_proj = nm.as_tensor(tokens), nm.as_tensor(pose_proj)
    key = nm.linear(pose_proj, w_alpha)
    logits = nm.tsum(nm.mul(tokens, _as_row(key)), axis=-1)
    alpha = nm.sigmoid(logits)
    gated = nm.mul(tokens, nm.reshape(alpha, alpha.shape + (1,)))
    return gated, alpha


def semantic_query(tokens, weights):
    """Weighted mean pooling q = sum_i w_i z_i / sum_i w_i over the token axis."""
    tokens = nm.as_tensor(tokens)
    w = np.asarray(weights, dtype=tokens.dtype)
    if w.shape != tokens.shape[:-1]:
        w = w.reshape(tokens.shape[:-1])
    total = w.sum(axis=-1)
    if np.any(total <= 0):
        raise ContractError("semantic_query weights must have a positive sum")
    num = nm.tsum(nm.mul(tokens, w[..., None]), axis=-2)
    return nm.div(num, total[..., None])


def fuse_query(query, pose_proj, w_g, mode="literal"):
    """Gate the semantic query with g = sigmoid(W_g h).

    literal: q * g + q * (1 - g), which equals q exactly, so q is returned
    unchanged. convex: g * q + (1 - g) * h.
    Returns (q_f, g).
    """
    if mode not in GATE_MODES:
        raise ConfigError(f"Unknown gate mode '{mode}' (expected one of {GATE_MODES})")
    query, pose_proj = nm.as_tensor(query), nm.as_tensor(pose_proj)
    g = nm.sigmoid(nm.linear(pose_proj, w_g))
    if mode == "literal":
        return query, g
    fused = nm.add(nm.mul(g, query), nm.mul(nm.sub(1.0, g), pose_proj))
    return fused, g


def gate_tokens(tokens, pose_proj, w_u):
    """f_i * u with one channel gate u = sigmoid(W_u h) shared by all tokens."""
    tokens, pose_proj = nm.as_tensor(tokens), nm.as_tensor(pose_proj)
    u = nm.sigmoid(nm.linear(pose_proj, w_u))
    return nm.mul(tokens, _as_row(u)), u


def cross_attention(query, values, w_q=None, w_k=None, w_v=None):
    """softmax(Q K^T / sqrt(D)) V with Q = q_f as a single row, K = V = values.

    Returns (q_out (..., D), attn (..., N)).
    """
    query, values = nm.as_tensor(query), nm.as_tensor(values)
    if values.shape[-2] == 0:
        raise ContractError("cross_attention needs at least one key/value token")
    if query.shape[-1] != values.shape[-1]:
        raise DimensionError(f"query width {query.shape} does not match values {values.shape}")
    q, k, v = query, values, values
    if w_q is not None:
        q, k, v = nm.linear(q, w_q), nm.linear(k, w_k), nm.linear(v, w_v)
    dim = q.shape[-1]
    scores = nm.scale(nm.matmul(_as_row(q), nm.transpose(k)), 1.0 / math.sqrt(dim))
    attn = nm.softmax(scores, axis=-1)                        # (..., 1, N)
    out = nm.matmul(attn, v)                                  # (..., 1, D)
    return nm.reshape(out, out.shape[:-2] + (dim,)), nm.reshape(attn, attn.shape[:-2] + (attn.shape[-1],))


def relevance_weights(windows, patch_centers, lead_shape, frames, sigma_rel, motion_weighting):
    """Stack patch_relevance over a batch: returns (..., T * P)."""
    if isinstance(windows, PoseWindows):
        windows = [windows]
    per_clip = [patch_relevance(win, patch_centers, sigma_rel, motion_weighting) for win in windows]
    stacked = np.stack(per_clip).reshape(len(per_clip), frames * len(patch_centers))
    return stacked.reshape(lead_shape + (frames * len(patch_centers),))


def fusion_forward(tokens, pose_proj, windows, params: FusionParams):
    """Run the fusion pipeline on projected tokens.

    tokens: projected TokenSet with final/penultimate (..., T, P + 1, D).
    pose_proj: (..., D) projected pose descriptor, or None without a pose branch.
    windows: PoseWindows (or one per batch element) for relevance weights.

    Order: patch_relevance -> token_gate_alpha -> semantic_query ->
    fuse_query -> gate_tokens -> cross_attention, skipping disabled stages.
    """
    flags = params.flags
    final = tokens.final
    lead = final.shape[:-3]
    t, p1, dim = final.shape[-3:]
    n = t * (p1 - 1)
    z = nm.reshape(final[..., 1:, :], lead + (n, dim))
    f = nm.reshape(tokens.penultimate[..., 1:, :], lead + (n, dim))

    use_pose = flags.pose_branch and pose_proj is not None
    if use_pose and flags.pose_guidance and windows is not None:
        weights = relevance_weights(windows, tokens.patch_centers, lead, t,
                                    params.sigma_rel, flags.motion_weighting)
    else:
        weights = np.ones(lead + (n,))

    if use_pose and flags.alpha_gate:
        z_gated, alpha = token_gate_alpha(z, pose_proj, params["w_alpha"])
        alpha = alpha.data
    else:
        z_gated, alpha = z, np.ones(lead + (n,))

    query = semantic_query(z_gated, weights)

    g = u = None
    if use_pose and flags.concat_query:
        fused = nm.linear(nm.concat([query, nm.as_tensor(pose_proj)], axis=-1), params["w_cat"])
    elif use_pose and flags.gating:
        fused, g_t = fuse_query(query, pose_proj, params["w_g"], flags.gate_mode)
        g = g_t.data
    else:
        fused = query

    if use_pose and flags.gating:
        values, u_t = gate_tokens(f, pose_proj, params["w_u"])
        u = u_t.data
    else:
        values = f

    state = FusionState(weights=weights, alpha=alpha, gated_tokens=z_gated, query=query,
                        fused_query=fused, gated_values=values, g=g, u=u)
    if flags.cross_attention:
        qkv = (params["w_q"], params["w_k"], params["w_v"]) if flags.learned_qkv else (None, None, None)
        state.output, state.attention = cross_attention(fused, values, *qkv)
    return state
