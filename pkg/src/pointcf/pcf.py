"""The reweighted point-convolution operator family.

A point convolution aggregates neighbor features with weights that are a
learned function of relative position; the reweighted form additionally
scales each neighbor's contribution by a score computed from feature
content, either from feature differences (subtractive) or from query-key
dot products. Setting the score activation to ``constant_one`` recovers the
plain convolution. A softmax-attention layer is included as the baseline it
is contrasted against, and every factorized forward has a naive double-loop
twin that serves as its equivalence oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Neighborhood
from .tensor import (
    Tensor,
    bmm,
    gather_rows,
    matmul,
    neighborhood_reduce,
    pointwise,
    reshape,
    sum_over_last,
    transpose_last,
)

Array = np.ndarray

VARIANTS = ("pointconv", "pcf_subtractive", "pcf_qkv", "attention_baseline")
ACTIVATIONS = ("sigmoid", "softmax", "relu", "constant_one")


class ConfigurationError(ValueError):
    """Layer parameters violate a structural constraint."""


@dataclass
class Linear:
    """Affine map on the last axis; ``bias=None`` makes it purely linear."""

    weight: Tensor
    bias: Tensor | None = None

    @staticmethod
    def create(rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True) -> "Linear":
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        b = None
        if bias:
            # nonzero bias keeps relu pre-activations off the exact kink
            bb = 1.0 / np.sqrt(n_in)
            b = Tensor(rng.uniform(-bb, bb, n_out), requires_grad=True)
        return Linear(w, b)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
        out = matmul(flat, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return reshape(out, (*lead, self.n_out))

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


@dataclass
class Mlp:
    """Stack of affine layers with relu between them, linear at the end."""

    layers: list[Linear]

    @staticmethod
    def create(rng: np.random.Generator, widths: list[int]) -> "Mlp":
        return Mlp([Linear.create(rng, a, b) for a, b in zip(widths[:-1], widths[1:])])

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = pointwise(x, "relu")
        return x

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.parameters(f"{prefix}.{i}"))
        return out


@dataclass
class PcfParams:
    """All trainable state of one layer of the operator family.

    ``heads`` score functions each scale one contiguous channel group of
    size ``c_in // heads``. ``disable_conv`` replaces the positional
    embedding by a constant vector and ``disable_reweight`` forces the score
    to one; together they expose the component-removal experiment.
    """

    variant: str
    c_in: int
    c_mid: int
    c_out: int
    heads: int
    activation: str
    pos_mlp: Mlp
    w_l: Linear
    psi_mlp: Mlp | None = None
    q_map: Linear | None = None
    k_map: Linear | None = None
    d_qk: int = 0
    v_map: Linear | None = None
    pos_scalar: Linear | None = None
    disable_conv: bool = False
    disable_reweight: bool = False

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.heads < 1:
            raise ConfigurationError(f"heads must be positive, got {self.heads}")
        if self.c_in % self.heads != 0:
            raise ConfigurationError(
                f"heads={self.heads} does not divide c_in={self.c_in}")
        if self.variant == "attention_baseline" and self.c_out % self.heads != 0:
            raise ConfigurationError(
                f"heads={self.heads} does not divide c_out={self.c_out}")

    @staticmethod
    def create(rng: np.random.Generator, c_in: int, c_out: int, *,
               variant: str = "pcf_subtractive", heads: int = 8, c_mid: int = 16,
               activation: str = "sigmoid", psi_hidden_layers: int = 2,
               d_qk: int | None = None, disable_conv: bool = False,
               disable_reweight: bool = False) -> "PcfParams":
        """Build a randomly initialized layer with the ablation defaults."""
        pos_mlp = Mlp.create(rng, [3, c_mid, c_mid, c_mid])
        w_l = Linear.create(rng, c_mid * c_in, c_out, bias=False)
        psi_mlp = None
        q_map = k_map = v_map = pos_scalar = None
        dq = 0
        if variant == "pcf_subtractive":
            psi_mlp = Mlp.create(rng, [c_in] + [c_in] * psi_hidden_layers + [heads])
        elif variant in ("pcf_qkv", "attention_baseline"):
            dq = d_qk if d_qk is not None else max(1, c_in // heads)
            q_map = Linear.create(rng, c_in, heads * dq)
            k_map = Linear.create(rng, c_in, heads * dq)
            if variant == "attention_baseline":
                v_map = Linear.create(rng, c_in, c_out)
                pos_scalar = Linear.create(rng, c_mid, heads)
        return PcfParams(
            variant=variant, c_in=c_in, c_mid=c_mid, c_out=c_out, heads=heads,
            activation=activation, pos_mlp=pos_mlp, w_l=w_l, psi_mlp=psi_mlp,
            q_map=q_map, k_map=k_map, d_qk=dq, v_map=v_map, pos_scalar=pos_scalar,
            disable_conv=disable_conv, disable_reweight=disable_reweight)

    def parameters(self, prefix: str = "pcf") -> list[tuple[str, Tensor]]:
        out = self.pos_mlp.parameters(f"{prefix}.pos_mlp")
        out.extend(self.w_l.parameters(f"{prefix}.w_l"))
        if self.psi_mlp is not None:
            out.extend(self.psi_mlp.parameters(f"{prefix}.psi_mlp"))
        for name, lin in (("q", self.q_map), ("k", self.k_map), ("v", self.v_map),
                          ("pos_scalar", self.pos_scalar)):
            if lin is not None:
                out.extend(lin.parameters(f"{prefix}.{name}"))
        return out


@dataclass
class ScoreBlock:
    """Per-neighbor, per-head reweighting scores of one layer application."""

    values: Tensor  # N x K x heads

    def data(self) -> Array:
        return self.values.data


def positional_embed(rel_pos: Tensor, params: PcfParams) -> Tensor:
    """Apply the positional MLP to an [N,K,3] relative-position block."""
    if params.disable_conv:
        n, k, _ = rel_pos.shape
        return Tensor(np.ones((n, k, params.c_mid)))
    return params.pos_mlp(rel_pos)


def _activate_scores(raw: Tensor, params: PcfParams) -> ScoreBlock:
    if params.activation == "softmax":
        # normalize over the K axis: [N,K,H] -> [N,H,K] -> softmax -> back
        swapped = pointwise(transpose_last(raw), "softmax_over_last")
        return ScoreBlock(transpose_last(swapped))
    if params.activation == "constant_one":
        return ScoreBlock(Tensor(np.ones(raw.shape)))
    return ScoreBlock(pointwise(raw, params.activation))


def psi_subtractive(center_feats: Tensor, nbr_feats: Tensor, params: PcfParams) -> ScoreBlock:
    """Scores from the feature difference between each neighbor and its center."""
    if params.activation == "constant_one" or params.disable_reweight:
        n, k, _ = nbr_feats.shape
        return ScoreBlock(Tensor(np.ones((n, k, params.heads))))
    if params.psi_mlp is None:
        raise ConfigurationError(f"variant {params.variant!r} carries no difference MLP")
    n, c = center_feats.shape
    diff = nbr_feats - reshape(center_feats, (n, 1, c))
    return _activate_scores(params.psi_mlp(diff), params)


def psi_qkv(center_feats: Tensor, nbr_feats: Tensor, params: PcfParams) -> ScoreBlock:
    """Scores from scaled query-key dot products, one per head."""
    if params.activation == "constant_one" or params.disable_reweight:
        n, k, _ = nbr_feats.shape
        return ScoreBlock(Tensor(np.ones((n, k, params.heads))))
    if params.q_map is None or params.k_map is None:
        raise ConfigurationError(f"variant {params.variant!r} carries no query/key maps")
    n, k, _ = nbr_feats.shape
    h, d = params.heads, params.d_qk
    q = reshape(params.q_map(nbr_feats), (n, k, h, d))
    key = reshape(params.k_map(center_feats), (n, 1, h, d))
    raw = sum_over_last(q * key) * Tensor(1.0 / np.sqrt(d))
    return _activate_scores(raw, params)


def compute_scores(center_feats: Tensor, nbr_feats: Tensor, params: PcfParams) -> ScoreBlock:
    """Dispatch to the variant's score function."""
    if params.variant == "pcf_qkv":
        return psi_qkv(center_feats, nbr_feats, params)
    return psi_subtractive(center_feats, nbr_feats, params)


def _reweight(nbr_feats: Tensor, scores: ScoreBlock, heads: int) -> Tensor:
    """Scale channel group i of each neighbor by head i's score."""
    n, k, c = nbr_feats.shape
    grouped = reshape(nbr_feats, (n, k, heads, c // heads))
    scaled = grouped * reshape(scores.values, (n, k, heads, 1))
    return reshape(scaled, (n, k, c))


def _conv_core(h: Tensor, x: Tensor, params: PcfParams) -> Tensor:
    """W_l applied to the flattened positional/feature outer product sum."""
    n, _, _ = x.shape
    outer = bmm(transpose_last(h), x)  # [N, c_mid, c_in]
    return params.w_l(reshape(outer, (n, params.c_mid * params.c_in)))


def pointconv_forward(cloud_feats: Tensor, nbr: Neighborhood, params: PcfParams) -> Tensor:
    """Plain point convolution: positional weights only, no reweighting."""
    x = gather_rows(cloud_feats, nbr.indices)
    h = positional_embed(Tensor(nbr.rel_pos), params)
    return _conv_core(h, x, params)


def pcf_forward(cloud_feats: Tensor, nbr: Neighborhood, params: PcfParams, *,
                center_feats: Tensor | None = None,
                scores: ScoreBlock | None = None,
                nbr_feats: Tensor | None = None) -> Tensor:
    """Factorized reweighted convolution.

    ``center_feats`` defaults to the source features themselves, which is
    the self-neighborhood case; pass explicit centers when queries and
    sources are different clouds. Precomputed ``scores`` short-circuit the
    score functions (used for capture and for frozen-score tests), and a
    precomputed ``nbr_feats`` gather block avoids re-gathering.
    """
    if params.variant not in ("pcf_subtractive", "pcf_qkv"):
        raise ConfigurationError(
            f"pcf_forward needs a reweighted variant, got {params.variant!r}")
    centers = cloud_feats if center_feats is None else center_feats
    if center_feats is None and nbr.n_query != cloud_feats.shape[0]:
        raise ConfigurationError(
            "cross-cloud neighborhood requires explicit center features")
    x = gather_rows(cloud_feats, nbr.indices) if nbr_feats is None else nbr_feats
    if scores is None:
        scores = compute_scores(centers, x, params)
    h = positional_embed(Tensor(nbr.rel_pos), params)
    return _conv_core(h, _reweight(x, scores, params.heads), params)


def attention_baseline_forward(cloud_feats: Tensor, nbr: Neighborhood, params: PcfParams, *,
                               center_feats: Tensor | None = None) -> Tensor:
    """Softmax attention over the neighborhood, weighting value features.

    Per head, the attention logit is the scaled query-key dot product plus a
    positional scalar derived from the positional embedding; the resulting
    non-negative weights sum to one over the neighborhood, so each output
    channel stays inside its neighbors' value-feature range.
    """
    if params.variant != "attention_baseline":
        raise ConfigurationError(
            f"attention_baseline_forward got variant {params.variant!r}")
    centers = cloud_feats if center_feats is None else center_feats
    x = gather_rows(cloud_feats, nbr.indices)
    n, k, _ = x.shape
    h, d = params.heads, params.d_qk
    q = reshape(params.q_map(x), (n, k, h, d))
    key = reshape(params.k_map(centers), (n, 1, h, d))
    qk = sum_over_last(q * key) * Tensor(1.0 / np.sqrt(d))
    pos = params.pos_scalar(params.pos_mlp(Tensor(nbr.rel_pos)))
    logits = qk + pos  # [N, K, H]
    att = transpose_last(pointwise(transpose_last(logits), "softmax_over_last"))
    v = reshape(params.v_map(x), (n, k, h, params.c_out // h))
    weighted = reshape(v * reshape(att, (n, k, h, 1)), (n, k, params.c_out))
    return neighborhood_reduce(weighted)


def score_diff(scores: ScoreBlock) -> Tensor:
    """Per-point spread of the scores: max minus min over the neighborhood.

    The spread is taken over the K neighbors within each head and then
    maximized across heads, so a layer whose scores are constant within
    every neighborhood reports exactly zero even when heads disagree about
    the constant.
    """
    vals = scores.values.data
    spread = vals.max(axis=1) - vals.min(axis=1)  # [N, heads]
    return Tensor(spread.max(axis=1))


# -- naive oracles -------------------------------------------------------------

def _mlp_numpy(mlp: Mlp, x: Array) -> Array:
    for i, layer in enumerate(mlp.layers):
        x = x @ layer.weight.data
        if layer.bias is not None:
            x = x + layer.bias.data
        if i < len(mlp.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def _linear_numpy(lin: Linear, x: Array) -> Array:
    y = x @ lin.weight.data
    if lin.bias is not None:
        y = y + lin.bias.data
    return y


def _scores_naive(centers: Array, nbr_feats: Array, params: PcfParams) -> Array:
    n, k, _ = nbr_feats.shape
    if params.activation == "constant_one" or params.disable_reweight:
        return np.ones((n, k, params.heads))
    raw = np.empty((n, k, params.heads))
    for i in range(n):
        for j in range(k):
            if params.variant == "pcf_qkv":
                qv = _linear_numpy(params.q_map, nbr_feats[i, j]).reshape(params.heads, params.d_qk)
                kv = _linear_numpy(params.k_map, centers[i]).reshape(params.heads, params.d_qk)
                raw[i, j] = (qv * kv).sum(axis=1) / np.sqrt(params.d_qk)
            else:
                raw[i, j] = _mlp_numpy(params.psi_mlp, nbr_feats[i, j] - centers[i])
    if params.activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-raw))
    if params.activation == "relu":
        return np.maximum(raw, 0.0)
    # softmax over the K axis, one neighborhood and head at a time
    out = np.empty_like(raw)
    for i in range(n):
        for hh in range(params.heads):
            col = raw[i, :, hh]
            ex = np.exp(col - col.max())
            out[i, :, hh] = ex / ex.sum()
    return out


def _slot_embed_naive(rel: Array, params: PcfParams) -> Array:
    if params.disable_conv:
        return np.ones(params.c_mid)
    return _mlp_numpy(params.pos_mlp, rel)


def pcf_forward_naive(cloud_feats: Tensor, nbr: Neighborhood, params: PcfParams, *,
                      center_feats: Tensor | None = None) -> Tensor:
    """Direct double loop over points and neighbors; the equivalence oracle.

    Materializes per-slot weight matrices from the positional embedding and
    the final linear map, scales each neighbor channel by its head's score,
    and accumulates one neighbor at a time.
    """
    if params.variant not in ("pcf_subtractive", "pcf_qkv"):
        raise ConfigurationError(
            f"pcf_forward_naive needs a reweighted variant, got {params.variant!r}")
    feats = cloud_feats.data
    centers = feats if center_feats is None else center_feats.data
    idx = nbr.indices
    n, k = idx.shape
    nbr_feats = feats[idx]
    scores = _scores_naive(centers, nbr_feats, params)
    # w_l rows are the flattened [c_mid, c_in] outer block, C-order
    w3 = params.w_l.weight.data.reshape(params.c_mid, params.c_in, params.c_out)
    group = params.c_in // params.heads
    out = np.zeros((n, params.c_out))
    for i in range(n):
        for j in range(k):
            hvec = _slot_embed_naive(nbr.rel_pos[i, j], params)
            w_slot = np.tensordot(hvec, w3, axes=(0, 0))  # [c_in, c_out]
            per_channel = np.repeat(scores[i, j], group)
            out[i] += (per_channel * nbr_feats[i, j]) @ w_slot
    return Tensor(out)


def pointconv_forward_naive(cloud_feats: Tensor, nbr: Neighborhood, params: PcfParams) -> Tensor:
    """Plain-convolution double loop with per-slot weights w = W_l h(dp)."""
    feats = cloud_feats.data
    idx = nbr.indices
    n, k = idx.shape
    w3 = params.w_l.weight.data.reshape(params.c_mid, params.c_in, params.c_out)
    out = np.zeros((n, params.c_out))
    for i in range(n):
        for j in range(k):
            hvec = _slot_embed_naive(nbr.rel_pos[i, j], params)
            w_slot = np.tensordot(hvec, w3, axes=(0, 0))
            out[i] += feats[idx[i, j]] @ w_slot
    return Tensor(out)
