"""Transformer encoder for CTC recognition whose QKV and output projections are artisan layers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numcore as nc
from .artisan import ArtisanLayer, Dense, MaskVariant, UnknownLanguageError, single_mask_mode
from .numcore import Tensor

GROUPS = ("backbone-W", "specialist-M", "mapping-T", "biases", "heads")
LAYER_KINDS = ("artisan", "dense", "single_mask")


class UnknownHeadError(KeyError):
    pass


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_blocks: int = 8
    n_heads: int = 4
    d_ff: int = 128
    input_feature_dim: int = 16
    K: int = 4
    t: float = 0.3
    variant: str = "TopK"
    dropout: float = 0.1
    layer_kind: str = "artisan"
    activation: str = "gelu"
    mapping_init_scale: float = 0.5

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError("activation must be gelu or relu")
        MaskVariant(self.variant)


@dataclass
class Head:
    vocab: tuple[int, ...]
    weight: Tensor
    bias: Tensor

    @property
    def n_out(self) -> int:
        return len(self.vocab) + 1


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.lang_bias: dict[int, Tensor] = {}
        self.eps = eps

    def bias_for(self, lang):
        return self.lang_bias.get(lang, self.bias)

    def __call__(self, x: Tensor, lang=None) -> Tensor:
        return nc.layernorm(x, self.gain, self.bias_for(lang), self.eps)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return out


class Block:
    def __init__(self, cfg: EncoderConfig, n_languages: int, rng: np.random.Generator):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        if cfg.layer_kind == "dense":
            self.qkv = Dense(d, 3 * d, rng)
            self.proj = Dense(d, d, rng)
        else:
            k = 1 if cfg.layer_kind == "single_mask" else cfg.K
            self.qkv = ArtisanLayer(d, 3 * d, n_languages, k, cfg.t, rng, cfg.variant, cfg.mapping_init_scale)
            self.proj = ArtisanLayer(d, d, n_languages, k, cfg.t, rng, cfg.variant, cfg.mapping_init_scale)
            if cfg.layer_kind == "single_mask":
                single_mask_mode(self.qkv)
                single_mask_mode(self.proj)
        self.ln2 = LayerNorm(d)
        self.ff1 = Dense(d, cfg.d_ff, rng)
        self.ff2 = Dense(cfg.d_ff, d, rng)
        self.n_heads = cfg.n_heads
        self.activation = nc.gelu if cfg.activation == "gelu" else nc.relu

    def modules(self):
        return (("ln1", self.ln1), ("qkv", self.qkv), ("proj", self.proj), ("ln2", self.ln2), ("ff1", self.ff1), ("ff2", self.ff2))

    def attention(self, x: Tensor, lang: int, key_mask: np.ndarray | None, rng, p: float) -> Tensor:
        B, T, D = x.shape
        H = self.n_heads
        dh = D // H
        q, k, v = nc.split(self.qkv(x, lang), [D, D, D], axis=-1)
        q = nc.transpose(nc.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        k = nc.transpose(nc.reshape(k, (B, T, H, dh)), (0, 2, 3, 1))
        v = nc.transpose(nc.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        scores = nc.scale(nc.matmul(q, k), 1.0 / math.sqrt(dh))
        if key_mask is not None:
            scores = nc.add(scores, key_mask)
        attn = nc.dropout(nc.softmax(scores, axis=-1), p, rng)
        ctx = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
        return self.proj(ctx, lang)

    def __call__(self, x: Tensor, lang: int, key_mask, rng, p: float) -> Tensor:
        h = nc.dropout(self.attention(self.ln1(x, lang), lang, key_mask, rng, p), p, rng)
        x = nc.add(x, h)
        h = self.ff2(nc.dropout(self.activation(self.ff1(self.ln2(x, lang), lang)), p, rng), lang)
        return nc.add(x, nc.dropout(h, p, rng))


class EncoderModel:
    """Input projector, transformer blocks and CTC classification heads.

    Languages are registered by tag; each one owns a row of every mapping
    matrix and routes to a head (the shared head 0 unless adapted).
    """

    def __init__(self, cfg: EncoderConfig, languages: Sequence[str], vocab: Sequence[int], seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.languages: list[str] = list(languages)
        if len(set(self.languages)) != len(self.languages):
            raise ValueError("language tags must be unique")
        self.proj_in = Dense(cfg.input_feature_dim, cfg.d_model, rng)
        self.blocks = [Block(cfg, len(self.languages), rng) for _ in range(cfg.n_blocks)]
        self.ln_out = LayerNorm(cfg.d_model)
        self.heads: list[Head] = []
        self.lang_head: dict[int, int] = {}
        self.frozen: set[str] = set()  # parameter names no later stage may touch
        self._head_rng = rng
        self.attach_head(vocab)
        for i in range(len(self.languages)):
            self.lang_head[i] = 0

    # registry -------------------------------------------------------------
    def language_index(self, lang: int | str) -> int:
        if isinstance(lang, str):
            try:
                return self.languages.index(lang)
            except ValueError:
                raise UnknownLanguageError(f"language {lang!r} is not registered") from None
        if not 0 <= lang < len(self.languages):
            raise UnknownLanguageError(f"language index {lang} is not registered")
        return int(lang)

    def attach_head(self, vocab: Sequence[int], rng: np.random.Generator | None = None) -> int:
        rng = self._head_rng if rng is None else rng
        d = self.config.d_model
        vocab = tuple(int(v) for v in vocab)
        w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, len(vocab) + 1)), requires_grad=True)
        b = Tensor(np.zeros(len(vocab) + 1), requires_grad=True)
        self.heads.append(Head(vocab, w, b))
        return len(self.heads) - 1

    def artisan_layers(self) -> list[tuple[str, ArtisanLayer]]:
        out = []
        for i, blk in enumerate(self.blocks):
            for name in ("qkv", "proj"):
                layer = getattr(blk, name)
                if isinstance(layer, ArtisanLayer):
                    out.append((f"blocks.{i}.{name}", layer))
        return out

    def bias_modules(self) -> list[tuple[str, object]]:
        out = [("proj_in", self.proj_in)]
        for i, blk in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", m) for n, m in blk.modules())
        out.append(("ln_out", self.ln_out))
        return out

    # parameters -----------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor, str]]:
        """Every parameter once, as (name, tensor, group), in a fixed order."""
        for prefix, mod in self.bias_modules():
            if isinstance(mod, LayerNorm):
                yield f"{prefix}.gain", mod.gain, "backbone-W"
            else:
                yield f"{prefix}.weight", mod.weight, "backbone-W"
            if isinstance(mod, ArtisanLayer):
                for k, m in enumerate(mod.scores):
                    yield f"{prefix}.scores.{k}", m, "specialist-M"
                if mod.theta is not None:
                    yield f"{prefix}.theta", mod.theta, "specialist-M"
                yield f"{prefix}.mapping", mod.mapping, "mapping-T"
            yield f"{prefix}.bias", mod.bias, "biases"
        for h, head in enumerate(self.heads):
            yield f"heads.{h}.weight", head.weight, "heads"
            yield f"heads.{h}.bias", head.bias, "heads"
        for l in sorted(self._lang_overrides()):
            tag = self.languages[l]
            for prefix, mod in self.bias_modules():
                if l in mod.lang_bias:
                    yield f"lang.{tag}.{prefix}.bias", mod.lang_bias[l], "biases"
            for prefix, layer in self.artisan_layers():
                if l in layer.dedicated:
                    yield f"lang.{tag}.{prefix}.dedicated", layer.dedicated[l], "specialist-M"

    def _lang_overrides(self) -> set[int]:
        langs: set[int] = set()
        for _, mod in self.bias_modules():
            langs.update(mod.lang_bias)
        for _, layer in self.artisan_layers():
            langs.update(layer.dedicated)
        return langs

    def params(self, selector: str | Sequence[str] = "all") -> list[Tensor]:
        """Parameters of the named group(s); ``"all"`` selects everything."""
        if isinstance(selector, str):
            selector = GROUPS if selector == "all" else (selector,)
        unknown = set(selector) - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter group(s): {sorted(unknown)}")
        return [p for _, p, g in self.named_parameters() if g in selector]

    def param_count(self, selector: str | Sequence[str] = "all") -> int:
        return sum(p.size for p in self.params(selector))

    # forward --------------------------------------------------------------
    def forward(
        self,
        x: np.ndarray,
        lang: int | str,
        head: int | None = None,
        lengths: Sequence[int] | None = None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Per-frame log-probabilities [batch, frames, |vocab| + 1]; blank is last.

        Dropout is active only when ``rng`` is given.
        """
        l = self.language_index(lang)
        if head is None:
            head = self.lang_head[l]
        if not 0 <= head < len(self.heads):
            raise UnknownHeadError(f"head {head} does not exist")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.config.input_feature_dim:
            raise ValueError(f"expected [batch, frames, {self.config.input_feature_dim}] features, got {x.shape}")
        B, T, _ = x.shape
        key_mask = None
        if lengths is not None and min(lengths) < T:
            pad = np.arange(T)[None, :] >= np.asarray(lengths)[:, None]
            key_mask = np.where(pad, -1e9, 0.0)[:, None, None, :]
        p = self.config.dropout if rng is not None else 0.0
        h = nc.add(self.proj_in(Tensor(x), l), sinusoidal_positions(T, self.config.d_model))
        h = nc.dropout(h, p, rng)
        for blk in self.blocks:
            h = blk(h, l, key_mask, rng, p)
        h = self.ln_out(h, l)
        hd = self.heads[head]
        return nc.log_softmax(nc.linear(h, hd.weight, hd.bias), axis=-1)

    __call__ = forward

    # adaptation hooks -----------------------------------------------------
    def add_language(self, tag: str, vocab: Sequence[int], rng: np.random.Generator, row_init: str = "zeros") -> int:
        """Register a new language: one mapping row per artisan layer, its own head and biases."""
        if tag in self.languages:
            raise ValueError(f"language {tag!r} already registered")
        layers = self.artisan_layers()
        if not layers:
            raise ValueError("only models with artisan layers can add languages")
        new = None
        for _, layer in layers:
            idx = layer.add_language_row(row_init, self.config.mapping_init_scale, rng)
            new = idx if new is None else new
            if idx != new:
                raise RuntimeError("mapping matrices disagree on language count")
        self.languages.append(tag)
        for _, mod in self.bias_modules():
            mod.lang_bias[new] = Tensor(mod.bias.data.copy(), requires_grad=True)
        self.lang_head[new] = self.attach_head(vocab, rng)
        return new

    def enable_inference_cache(self, enabled: bool = True) -> None:
        for _, layer in self.artisan_layers():
            layer.enable_inference_cache(enabled)
