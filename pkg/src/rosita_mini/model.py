"""Configurable BERT-shaped encoder with a first-token classifier head.

The four compressible dimensions (attention heads H, layers L, FFN width
d_I, embedding rank r) live in ModelConfig; pruning shrinks them while the
hidden size d_X stays fixed. The forward pass records every hidden state
so distillation can read them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

# desk-scale init: full-size encoders use 0.02 at hidden width 768; the
# small widths here need a slightly larger scale to train reliably
INIT_STD = 0.05


@dataclass
class ModelConfig:
    H: int
    L: int
    d_X: int
    d_I: int
    r: int  # embedding rank; 0 = unfactorized
    vocab_size: int
    max_len: int
    n_classes: int
    head_dim: int = 0  # 0 = derive as d_X // H
    eps: float = 1e-12

    def __post_init__(self):
        if self.head_dim == 0:
            self.head_dim = self.d_X // self.H
        self.validate()

    def validate(self) -> None:
        if self.H < 1 or self.L < 1 or self.d_I < 1:
            raise ValueError(f"config needs H, L, d_I >= 1, got {self}")
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")
        if self.H * self.head_dim > self.d_X:
            raise ValueError(
                f"attention width H*head_dim = {self.H * self.head_dim} "
                f"exceeds d_X = {self.d_X}"
            )
        if self.r < 0 or self.r > min(self.vocab_size, self.d_X):
            raise ValueError(
                f"rank r = {self.r} outside [0, min(|V|, d_X) = "
                f"{min(self.vocab_size, self.d_X)}]"
            )
        if self.vocab_size < 1 or self.max_len < 1 or self.n_classes < 2:
            raise ValueError("vocab_size, max_len >= 1 and n_classes >= 2 required")

    @property
    def factorized(self) -> bool:
        return self.r > 0

    def to_dict(self) -> dict:
        return {
            "H": self.H, "L": self.L, "d_X": self.d_X, "d_I": self.d_I,
            "r": self.r, "vocab_size": self.vocab_size, "max_len": self.max_len,
            "n_classes": self.n_classes, "head_dim": self.head_dim, "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardTrace:
    """Classifier logits plus the L+1 hidden states (index 0 = embedding)."""

    logits: Tensor
    hidden: list[Tensor]
    mask: np.ndarray


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter name -> shape map; fixes checkpoint ordering too."""
    c = config
    width = c.H * c.head_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if c.factorized:
        shapes["emb.E_U"] = (c.vocab_size, c.r)
        shapes["emb.E_V"] = (c.r, c.d_X)
    else:
        shapes["emb.W"] = (c.vocab_size, c.d_X)
    shapes["emb.P"] = (c.max_len, c.d_X)
    shapes["emb.ln_g"] = (c.d_X,)
    shapes["emb.ln_b"] = (c.d_X,)
    for i in range(c.L):
        p = f"layer{i}."
        shapes[p + "W_Q"] = (c.d_X, width)
        shapes[p + "W_K"] = (c.d_X, width)
        shapes[p + "W_V"] = (c.d_X, width)
        shapes[p + "W_AO"] = (width, c.d_X)
        shapes[p + "b_AO"] = (c.d_X,)
        shapes[p + "ln1_g"] = (c.d_X,)
        shapes[p + "ln1_b"] = (c.d_X,)
        shapes[p + "W_FI"] = (c.d_X, c.d_I)
        shapes[p + "b_FI"] = (c.d_I,)
        shapes[p + "W_FO"] = (c.d_I, c.d_X)
        shapes[p + "b_FO"] = (c.d_X,)
        shapes[p + "ln2_g"] = (c.d_X,)
        shapes[p + "ln2_b"] = (c.d_X,)
    shapes["cls.W"] = (c.d_X, c.n_classes)
    shapes["cls.b"] = (c.n_classes,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        base = name.split(".")[-1]
        if base.endswith("_g"):  # layer-norm gains
            data = np.ones(shape)
        elif base.endswith("_b") or base.startswith("b_") or base == "b":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


class Model:
    """Encoder parameters plus forward logic; mutated only via surgery."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.sigma: np.ndarray | None = None  # singular values at factorization
        self.assert_shapes()

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "Model":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(config, init_params(config, rng))

    def assert_shapes(self) -> None:
        expected = param_shapes(self.config)
        got = {name: p.shape for name, p in self.params.items()}
        if got != expected:
            missing = expected.keys() - got.keys()
            extra = got.keys() - expected.keys()
            bad = {n: (got[n], expected[n]) for n in expected.keys() & got.keys()
                   if got[n] != expected[n]}
            raise ShapeError(
                f"parameter store inconsistent with config: missing={sorted(missing)} "
                f"extra={sorted(extra)} mismatched={bad}"
            )
        if self.sigma is not None and self.config.factorized:
            assert len(self.sigma) == self.config.r

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def clone(self) -> "Model":
        cloned = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        m = Model(replace(self.config), cloned)
        m.sigma = None if self.sigma is None else self.sigma.copy()
        return m

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, token_ids, mask, dropout_rate: float = 0.0,
                dropout_key: int = 0) -> ForwardTrace:
        return forward(self, token_ids, mask, dropout_rate, dropout_key)


# ---------------------------------------------------------------------------
# building blocks


def self_attention_head(x: Tensor, W_Qi: Tensor, W_Ki: Tensor, W_Vi: Tensor) -> Tensor:
    """Single attention head on a (seq, d_X) input, scaled by sqrt(head_dim)."""
    if x.data.ndim != 2 or W_Qi.shape[0] != x.shape[-1]:
        raise ShapeError(f"self_attention_head: got x {x.shape}, W_Q {W_Qi.shape}")
    head_dim = W_Qi.shape[1]
    q = T.matmul(x, W_Qi)
    k = T.matmul(x, W_Ki)
    v = T.matmul(x, W_Vi)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(head_dim))
    return T.matmul(T.softmax_rows(scores), v)


def _split_heads(t: Tensor, H: int, head_dim: int) -> Tensor:
    b, s, _ = t.shape
    return T.swapaxes(T.reshape(t, (b, s, H, head_dim)), 1, 2)


def multi_head(x: Tensor, layer: dict[str, Tensor], config: ModelConfig,
               mask_bias: np.ndarray | None = None) -> Tensor:
    """Multi-head attention + output projection + residual + layer norm.

    Heads run through one batched projection per Q/K/V; the concat order is
    head index, feeding W_AO of shape (H*head_dim, d_X).
    """
    if config.H < 1:
        raise ValueError("a layer must retain at least one attention head")
    H, hd = config.H, config.head_dim
    b, s, _ = x.shape
    q = _split_heads(T.matmul(x, layer["W_Q"]), H, hd)
    k = _split_heads(T.matmul(x, layer["W_K"]), H, hd)
    v = _split_heads(T.matmul(x, layer["W_V"]), H, hd)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
    if mask_bias is not None:
        scores = T.add_const(scores, mask_bias)
    ctx = T.matmul(T.softmax_rows(scores), v)  # (B, H, S, hd)
    ctx = T.reshape(T.swapaxes(ctx, 1, 2), (b, s, H * hd))
    proj = T.add(T.matmul(ctx, layer["W_AO"]), layer["b_AO"])
    return T.layer_norm(T.add(x, proj), layer["ln1_g"], layer["ln1_b"], config.eps)


def ffn(x: Tensor, layer: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Position-wise FFN (ReLU between two linears) + residual + layer norm."""
    h = T.relu(T.add(T.matmul(x, layer["W_FI"]), layer["b_FI"]))
    out = T.add(T.matmul(h, layer["W_FO"]), layer["b_FO"])
    return T.layer_norm(T.add(x, out), layer["ln2_g"], layer["ln2_b"], config.eps)


def embed(model: Model, token_ids: np.ndarray, positions: np.ndarray) -> Tensor:
    """Token lookup (+ factor product when r > 0) + position add + layer norm."""
    ids = np.asarray(token_ids)
    pos = np.asarray(positions)
    c = model.config
    if ids.size and ids.max() >= c.vocab_size:
        raise IndexError(f"token id {int(ids.max())} >= vocab size {c.vocab_size}")
    if pos.size and pos.max() >= c.max_len:
        raise IndexError(f"position {int(pos.max())} >= max_len {c.max_len}")
    if c.factorized:
        tok = T.matmul(T.gather_rows(model.params["emb.E_U"], ids), model.params["emb.E_V"])
    else:
        tok = T.gather_rows(model.params["emb.W"], ids)
    posv = T.gather_rows(model.params["emb.P"], pos)
    return T.layer_norm(T.add(tok, posv), model.params["emb.ln_g"],
                        model.params["emb.ln_b"], c.eps)


def _layer_slice(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    p = f"layer{i}."
    return {name[len(p):]: t for name, t in params.items() if name.startswith(p)}


def forward(model: Model, token_ids, mask, dropout_rate: float = 0.0,
            dropout_key: int = 0) -> ForwardTrace:
    """Run embed -> L transformer layers -> classifier on the first token.

    mask is (B, S) with 1 for real tokens; masked key positions get -inf
    attention scores. All L+1 hidden states are recorded.
    """
    ids = np.asarray(token_ids)
    if ids.ndim != 2 or ids.shape[0] == 0:
        raise ValueError(f"forward: batch of token ids must be 2-D and nonempty, got {ids.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != ids.shape:
        raise ShapeError(f"forward: mask shape {mask.shape} != ids shape {ids.shape}")
    b, s = ids.shape
    c = model.config

    x = embed(model, ids, np.arange(s))
    if dropout_rate:
        x = T.dropout(x, dropout_rate, dropout_key, 0)
    hidden = [x]
    # (B, 1, 1, S) additive bias over key positions
    mask_bias = np.where(mask[:, None, None, :] > 0, 0.0, -np.inf)
    for i in range(c.L):
        layer = _layer_slice(model.params, i)
        x = multi_head(x, layer, c, mask_bias)
        if dropout_rate:
            x = T.dropout(x, dropout_rate, dropout_key, 2 * i + 1)
        x = ffn(x, layer, c)
        if dropout_rate:
            x = T.dropout(x, dropout_rate, dropout_key, 2 * i + 2)
        hidden.append(x)
    logits = T.add(T.matmul(T.first_token(x), model.params["cls.W"]), model.params["cls.b"])
    return ForwardTrace(logits=logits, hidden=hidden, mask=mask)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(z)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (batch, classes), got {logits.shape}")
    b, n_classes = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"cross_entropy: label outside [0, {n_classes})")

    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    rows = np.arange(b)
    data = np.asarray((lse[:, 0] - z[rows, labels]).mean())

    def bwd(g):
        p = np.exp(z - lse)
        p[rows, labels] -= 1.0
        logits.accumulate_grad(g * p / b)

    return T._node(data, (logits,), bwd)


def count_params(config: ModelConfig) -> int:
    """Exact parameter count for a config.

    Convention: token embedding (factors when r > 0), learned position
    embeddings, embedding layer norm, all per-layer weights/biases/layer
    norms, and the classifier. Position embeddings are never factorized.
    """
    c = config
    width = c.H * c.head_dim
    emb = c.vocab_size * c.r + c.r * c.d_X if c.factorized else c.vocab_size * c.d_X
    emb += c.max_len * c.d_X + 2 * c.d_X
    per_layer = (
        3 * c.d_X * width          # W_Q, W_K, W_V
        + width * c.d_X + c.d_X    # W_AO, b_AO
        + c.d_X * c.d_I + c.d_I    # W_FI, b_FI
        + c.d_I * c.d_X + c.d_X    # W_FO, b_FO
        + 4 * c.d_X                # two layer-norm pairs
    )
    cls = c.d_X * c.n_classes + c.n_classes
    return emb + c.L * per_layer + cls
