"""Bipartite relation-aware attention over the augmented line digraph.

A Factormer layer updates target-node features (e.g. rows of ``H``) from
source-node features (rows of ``W``) and the dense edge values ``V``. Every
source is a neighbour of every target, so attention runs over all ``m``
sources for each of the ``n`` targets. Pair quantities are laid out as
``(m*n) x k`` matrices with row ``i*n + j`` holding edge ``(i, j)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tape as tp
from .tape import Tensor


@dataclass(frozen=True)
class ModelConfig:
    rank: int = 10
    hidden: int = 100
    n_heads: int = 4
    n_layers: int = 4
    outer_iters: int = 5
    inner_iters: int = 5
    gamma: float = 0.2
    rho: float = 1.0
    d_ff: int | None = None
    full_dim_scale: bool = False
    detach_solver: bool = False

    def __post_init__(self):
        for name in ("rank", "hidden", "n_heads", "outer_iters", "inner_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.d_ff is not None and self.d_ff < 1:
            raise ValueError("d_ff must be >= 1")

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.hidden

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


_LAYER_FIELDS = (
    "q_w", "q_b", "kn_w", "vn_w", "vn_b",
    "ke_w", "ve_w", "ve_b",
    "ff1_w", "ff1_b", "ff2_w", "ff2_b",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
)


@dataclass
class FactormerParams:
    """Weights of one Factormer layer.

    Projection weights hold all heads side by side: columns
    ``h*d_h:(h+1)*d_h`` of ``q_w`` are head ``h``'s query map. Edge maps take
    the ``d + 1`` implicit edge features. Key maps carry no bias: a shared
    shift of every source's key moves all of a target's scores equally and
    cancels in the softmax.
    """

    q_w: Tensor
    q_b: Tensor
    kn_w: Tensor
    vn_w: Tensor
    vn_b: Tensor
    ke_w: Tensor
    ve_w: Tensor
    ve_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @staticmethod
    def shapes(d, d_ff):
        sq, edge, row = (d, d), (d + 1, d), (1, d)
        return {
            "q_w": sq, "q_b": row, "kn_w": sq, "vn_w": sq, "vn_b": row,
            "ke_w": edge, "ve_w": edge, "ve_b": row,
            "ff1_w": (d, d_ff), "ff1_b": (1, d_ff), "ff2_w": (d_ff, d), "ff2_b": row,
            "ln1_g": row, "ln1_b": row, "ln2_g": row, "ln2_b": row,
        }

    @classmethod
    def init(cls, d, d_ff, rng):
        values = {}
        for name, shape in cls.shapes(d, d_ff).items():
            if name.endswith("_w"):
                values[name] = _glorot(rng, shape)
            elif name.endswith("_g"):
                values[name] = np.ones(shape)
            else:
                values[name] = np.zeros(shape)
        return cls(**{k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()})

    def named(self):
        return [(name, getattr(self, name)) for name in _LAYER_FIELDS]


@dataclass
class NFactormerParams:
    embed_w: Tensor
    embed_b: Tensor
    layers: list
    extract_w: Tensor
    extract_b: Tensor
    n_heads: int = 4
    full_dim_scale: bool = False

    @property
    def r_in(self) -> int:
        return self.embed_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.embed_w.shape[1]

    def named_parameters(self):
        out = [("embed.weight", self.embed_w), ("embed.bias", self.embed_b)]
        for k, layer in enumerate(self.layers):
            out.extend((f"layers.{k}.{name}", t) for name, t in layer.named())
        out += [("extract.weight", self.extract_w), ("extract.bias", self.extract_b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def expected_shapes(cfg: ModelConfig, kind: str):
    """Parameter name -> shape for a model of ``kind`` ("init" or "accel")."""
    d, r = cfg.hidden, cfg.rank
    r_in = r if kind == "init" else 2 * r
    if kind not in ("init", "accel"):
        raise ValueError(f"unknown model kind {kind!r}")
    shapes = {"embed.weight": (r_in, d), "embed.bias": (1, d)}
    layer = FactormerParams.shapes(d, cfg.ffn_width)
    for k in range(2 * cfg.n_layers):
        shapes.update({f"layers.{k}.{name}": layer[name] for name in _LAYER_FIELDS})
    shapes.update({"extract.weight": (d, r), "extract.bias": (1, r)})
    return shapes


EXTRACT_GAIN = 0.3


def init_params(cfg: ModelConfig, kind: str = "init", seed: int = 0) -> NFactormerParams:
    rng = np.random.default_rng(seed)
    d, r = cfg.hidden, cfg.rank
    r_in = r if kind == "init" else 2 * r
    if kind not in ("init", "accel"):
        raise ValueError(f"unknown model kind {kind!r}")
    embed_w = Tensor(_glorot(rng, (r_in, d)), True, "embed.weight")
    layers = [FactormerParams.init(d, cfg.ffn_width, rng) for _ in range(2 * cfg.n_layers)]
    # Outputs start near the flat factorization of a mean-one matrix so no
    # column is clipped to zero on every row (dead under the final relu).
    extract_w = Tensor(EXTRACT_GAIN * _glorot(rng, (d, r)), True, "extract.weight")
    extract_b = Tensor(np.full((1, r), 1.0 / np.sqrt(r)), True, "extract.bias")
    return NFactormerParams(
        embed_w, Tensor(np.zeros((1, d)), True, "embed.bias"), layers,
        extract_w, extract_b,
        n_heads=cfg.n_heads, full_dim_scale=cfg.full_dim_scale,
    )


def params_from_arrays(arrays, cfg: ModelConfig, kind: str) -> NFactormerParams:
    """Assemble parameters from a name -> array mapping, validating every shape."""
    shapes = expected_shapes(cfg, kind)
    unknown = set(arrays) - set(shapes)
    if unknown:
        raise KeyError(f"unknown parameter names: {sorted(unknown)}")
    missing = set(shapes) - set(arrays)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)}")
    for name, shape in shapes.items():
        if tuple(np.shape(arrays[name])) != shape:
            raise ValueError(f"{name}: shape {np.shape(arrays[name])} does not match config {shape}")
    t = {k: Tensor(v, True, k) for k, v in arrays.items()}
    layers = [
        FactormerParams(**{name: t[f"layers.{k}.{name}"] for name in _LAYER_FIELDS})
        for k in range(2 * cfg.n_layers)
    ]
    return NFactormerParams(
        t["embed.weight"], t["embed.bias"], layers, t["extract.weight"], t["extract.bias"],
        n_heads=cfg.n_heads, full_dim_scale=cfg.full_dim_scale,
    )


def _glorot(rng, shape):
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def implicit_edge(x_src, x_tgt, e):
    """Edge features ``[x_src * x_tgt, e]``.

    Accepts single feature vectors (length d, scalar ``e``) or batches of
    pairs (k x d with ``e`` k x 1).
    """
    x_src, x_tgt, e = (v if isinstance(v, Tensor) else Tensor(v) for v in (x_src, x_tgt, e))
    if x_src.shape != x_tgt.shape:
        raise tp.ShapeError(f"feature shapes {x_src.shape} and {x_tgt.shape} differ")
    if x_src.value.ndim == 1:
        d = x_src.shape[0]
        row = implicit_edge(tp.reshape(x_src, (1, d)), tp.reshape(x_tgt, (1, d)), tp.reshape(e, (1, 1)))
        return tp.reshape(row, (d + 1,))
    return tp.concat_columns([tp.multiply(x_src, x_tgt), e])


def _head_indicator(d, n_heads):
    dh = d // n_heads
    ind = np.zeros((d, n_heads))
    for h in range(n_heads):
        ind[h * dh:(h + 1) * dh, h] = 1.0
    return Tensor(ind)


def _attend(src, tgt, E, p: FactormerParams, n_heads, full_dim_scale):
    m, d = src.shape
    n = tgt.shape[0]
    if tgt.shape[1] != d or E.shape != (m, n):
        raise tp.ShapeError(f"src {src.shape}, tgt {tgt.shape}, edges {E.shape}")
    if d % n_heads:
        raise tp.ShapeError(f"hidden size {d} not divisible by {n_heads} heads")
    heads = _head_indicator(d, n_heads)
    q = tp.linear(tgt, p.q_w, p.q_b)
    k_node = tp.matmul(src, p.kn_w)
    v_node = tp.linear(src, p.vn_w, p.vn_b)
    e_tilde = implicit_edge(tp.repeat_rows(src, n), tp.tile_rows(tgt, m), tp.reshape(E, (m * n, 1)))
    keys = tp.add(tp.repeat_rows(k_node, n), tp.matmul(e_tilde, p.ke_w))
    values = tp.add(tp.repeat_rows(v_node, n), tp.linear(e_tilde, p.ve_w, p.ve_b))
    scale_dim = d if full_dim_scale else d // n_heads
    scores = tp.scale(tp.matmul(tp.multiply(tp.tile_rows(q, m), keys), heads), 1.0 / math.sqrt(scale_dim))
    alpha = tp.softmax_over_sources(tp.reshape(scores, (m, n * n_heads)))
    weights = tp.matmul(tp.reshape(alpha, (m * n, n_heads)), tp.transpose(heads))
    weighted = tp.reshape(tp.multiply(weights, values), (m, n * d))
    message = tp.reshape(tp.tsum(weighted, axis=0), (n, d))
    return alpha, message


def attention_weights(src, tgt, E, params: FactormerParams, n_heads, full_dim_scale=False):
    """Attention coefficients as an array of shape (n_heads, m, n)."""
    alpha, _ = _attend(src, tgt, _as_tensor(E), params, n_heads, full_dim_scale)
    m, n = E.shape
    return alpha.value.reshape(m, n, n_heads).transpose(2, 0, 1)


def factormer(src, tgt, E, params: FactormerParams, n_heads, last_layer=False, full_dim_scale=False):
    """One Factormer update of the target features (n x d)."""
    E = _as_tensor(E)
    _, message = _attend(src, tgt, E, params, n_heads, full_dim_scale)
    x = tp.layer_norm(tp.add(tgt, message), params.ln1_g, params.ln1_b)
    hidden = tp.relu(tp.linear(x, params.ff1_w, params.ff1_b))
    x = tp.add(x, tp.linear(hidden, params.ff2_w, params.ff2_b))
    if not last_layer:
        x = tp.layer_norm(x, params.ln2_g, params.ln2_b)
    return x


def n_factormer(W_in, H_in, V, params: NFactormerParams):
    """Embed both factors, run the alternating H/W Factormer stack, extract.

    Returns ``(W_out, H_out)`` with ``params.extract_w.shape[1]`` columns.
    """
    W_in, H_in, V = _as_tensor(W_in), _as_tensor(H_in), _as_tensor(V)
    if W_in.shape[1] != params.r_in or H_in.shape[1] != params.r_in:
        raise tp.ShapeError(f"inputs have {W_in.shape[1]}/{H_in.shape[1]} columns, embedding expects {params.r_in}")
    if V.shape != (W_in.shape[0], H_in.shape[0]):
        raise tp.ShapeError(f"V is {V.shape}, factors have {W_in.shape[0]} and {H_in.shape[0]} rows")
    if len(params.layers) % 2:
        raise ValueError("an N-Factormer needs an even number of layers")
    Vt = tp.transpose(V)
    W = tp.linear(W_in, params.embed_w, params.embed_b)
    H = tp.linear(H_in, params.embed_w, params.embed_b)
    n_rounds = len(params.layers) // 2
    for k in range(n_rounds):
        last = k == n_rounds - 1
        H = factormer(W, H, V, params.layers[2 * k], params.n_heads, False, params.full_dim_scale)
        W = factormer(H, W, Vt, params.layers[2 * k + 1], params.n_heads, last, params.full_dim_scale)
    return (tp.linear(W, params.extract_w, params.extract_b),
            tp.linear(H, params.extract_w, params.extract_b))


def project_nonneg(M):
    """Euclidean projection onto the nonnegative orthant."""
    return tp.relu(_as_tensor(M))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
