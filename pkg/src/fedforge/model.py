"""A tiny decoder-only causal language model used for per-client training.

Pre-norm transformer blocks, optional ALiBi attention bias in place of learned
positions, byte-level vocabulary. Parameters move in and out as flat float32
vectors (see params.LayoutManifest), which is the only currency the federated
layers understand. Forward/backward runs through torch on CPU; with a single
torch thread the results are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .params import LayoutEntry, LayoutManifest, ParamError, ParamVector


class TokenRangeError(ValueError):
    """A batch contains a token id outside the model vocabulary."""


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int = 256
    context_len: int = 64
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    use_alibi: bool = True
    seed: int = 1234

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ParamError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.context_len < 2:
            raise ParamError(f"context_len must be >= 2, got {self.context_len}")


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Per-head slope 2^(-8*(h+1)/n_heads) for h = 0..n_heads-1."""
    if n_heads < 1:
        raise ParamError(f"n_heads must be >= 1, got {n_heads}")
    return np.array([2.0 ** (-8.0 * (h + 1) / n_heads) for h in range(n_heads)])


def alibi_bias(n_heads: int, t: int) -> np.ndarray:
    """ALiBi attention bias, shape (n_heads, t, t).

    bias[h, i, j] = -slope_h * (i - j) for j <= i, -inf above the diagonal,
    so the bias doubles as the causal mask.
    """
    slopes = alibi_slopes(n_heads)
    rows = np.arange(t)[:, None]
    cols = np.arange(t)[None, :]
    dist = (rows - cols).astype(np.float64)
    bias = -slopes[:, None, None] * dist[None, :, :]
    bias[:, cols > rows] = -np.inf
    return bias.astype(np.float32)


def causal_mask_bias(t: int) -> np.ndarray:
    """Plain causal mask as an additive bias: 0 on/below the diagonal, -inf above."""
    bias = np.zeros((t, t), dtype=np.float32)
    bias[np.triu_indices(t, k=1)] = -np.inf
    return bias


class Block(nn.Module):
    def __init__(self, cfg: TinyLMConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.attn_proj = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.mlp_fc = nn.Linear(d, 4 * d, bias=False)
        self.mlp_proj = nn.Linear(4 * d, d, bias=False)

    def forward(self, x: torch.Tensor, attn_bias: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        q = q.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        scores = scores + attn_bias[:, :t, :t]
        att = F.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(b, t, d)
        x = x + self.attn_proj(y)
        h = self.ln2(x)
        x = x + self.mlp_proj(F.gelu(self.mlp_fc(h)))
        return x


class TinyLM(nn.Module):
    def __init__(self, cfg: TinyLMConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        if not cfg.use_alibi:
            self.pos_embed = nn.Embedding(cfg.context_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        if cfg.use_alibi:
            bias = alibi_bias(cfg.n_heads, cfg.context_len)
        else:
            bias = np.broadcast_to(
                causal_mask_bias(cfg.context_len), (cfg.n_heads, cfg.context_len, cfg.context_len)
            ).copy()
        self.register_buffer("attn_bias", torch.from_numpy(bias), persistent=False)

    def init_weights(self, seed: int) -> None:
        """Seeded init: N(0, 0.02) embeddings and weights, residual projections
        scaled down by sqrt(2*n_layers), zero head so an untrained model emits
        uniform logits."""
        gen = torch.Generator().manual_seed(seed)
        resid_std = 0.02 / math.sqrt(2 * self.cfg.n_layers)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "head.weight":
                    p.zero_()
                elif name.endswith(("attn_proj.weight", "mlp_proj.weight")):
                    p.normal_(0.0, resid_std, generator=gen)
                elif "ln" in name:
                    if name.endswith("weight"):
                        p.fill_(1.0)
                    else:
                        p.zero_()
                else:
                    p.normal_(0.0, 0.02, generator=gen)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, t = tokens.shape
        x = self.embed(tokens)
        if not self.cfg.use_alibi:
            x = x + self.pos_embed(torch.arange(t, device=tokens.device))
        for block in self.blocks:
            x = block(x, self.attn_bias)
        return self.head(self.ln_f(x))


def _validate_batch(batch: np.ndarray, cfg: TinyLMConfig) -> np.ndarray:
    arr = np.ascontiguousarray(batch)
    if arr.ndim != 2:
        raise ParamError(f"batch must be 2-D (B, T), got shape {arr.shape}")
    if arr.shape[1] > cfg.context_len:
        raise ParamError(
            f"sequence length {arr.shape[1]} exceeds context_len {cfg.context_len}"
        )
    if arr.shape[1] < 2:
        raise ParamError("need at least 2 tokens per row for a next-token target")
    bad = (arr < 0) | (arr >= cfg.vocab_size)
    if bad.any():
        i, t = np.argwhere(bad)[0]
        raise TokenRangeError(
            f"token id {arr[i, t]} out of range [0, {cfg.vocab_size}) at row {i}, position {t}"
        )
    return arr.astype(np.int64, copy=False)


class LossEvaluator:
    """Owns one TinyLM instance and evaluates mean next-token cross-entropy.

    Parameters are loaded from / extracted to flat float32 vectors in the order
    fixed by `manifest`. A float64 evaluator (dtype=torch.float64) exists for
    finite-difference gradient checks. Not thread-safe: one evaluator per worker.
    """

    def __init__(self, cfg: TinyLMConfig, dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.module = TinyLM(cfg).to(dtype)
        entries = []
        offset = 0
        for name, p in self.module.named_parameters():
            entries.append(LayoutEntry(name, tuple(p.shape), offset))
            offset += p.numel()
        self.manifest = LayoutManifest(tuple(entries))
        self.n_params = offset

    def init_params(self) -> ParamVector:
        """Freshly initialized weights for this architecture (uses cfg.seed)."""
        self.module.init_weights(self.cfg.seed)
        return self._extract()

    def _extract(self) -> ParamVector:
        flat = torch.cat([p.detach().reshape(-1) for p in self.module.parameters()])
        return ParamVector(flat.to(torch.float32).numpy())

    def load(self, params: ParamVector) -> None:
        if len(params) != self.n_params:
            raise ParamError(
                f"parameter vector length {len(params)} != model size {self.n_params}"
            )
        self._load_array(params.data)

    def load_f64(self, params: np.ndarray) -> None:
        """Load a raw float64 vector (finite-difference probes on the float64 twin)."""
        if self.dtype != torch.float64:
            raise ParamError("load_f64 requires a float64 evaluator")
        if params.shape != (self.n_params,):
            raise ParamError(f"expected shape ({self.n_params},), got {params.shape}")
        self._load_array(params)

    def _load_array(self, arr: np.ndarray) -> None:
        src = torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype)
        with torch.no_grad():
            for entry, p in zip(self.manifest.entries, self.module.parameters()):
                p.copy_(src[entry.offset : entry.offset + entry.size].view(entry.shape))

    def _forward_loss(self, batch: np.ndarray) -> torch.Tensor:
        arr = _validate_batch(batch, self.cfg)
        tokens = torch.from_numpy(arr)
        logits = self.module(tokens)
        return F.cross_entropy(
            logits[:, :-1, :].reshape(-1, self.cfg.vocab_size),
            tokens[:, 1:].reshape(-1),
        )

    def loss(self, params: ParamVector, batch: np.ndarray) -> float:
        """Mean next-token cross-entropy over B*(T-1) positions."""
        self.load(params)
        with torch.no_grad():
            return float(self._forward_loss(batch))

    def loss_and_grad(self, params: ParamVector, batch: np.ndarray) -> tuple[float, np.ndarray]:
        """Loss plus the flat gradient (dtype matches the evaluator)."""
        self.load(params)
        self.module.zero_grad(set_to_none=True)
        loss = self._forward_loss(batch)
        loss.backward()
        grads = []
        for p in self.module.parameters():
            grads.append(torch.zeros_like(p).reshape(-1) if p.grad is None else p.grad.reshape(-1))
        flat = torch.cat(grads).numpy()
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise ParamError(f"non-finite loss {loss_val}")
        return loss_val, flat
