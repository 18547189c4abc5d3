"""Artisan layers: per-language binary masks assembled from shared score tensors.

For language ``l`` a layer sums the specialist scores whose mapping entry is
positive, keeps the top ``ceil((1 - t) * c_in * c_out)`` entries of that sum as
a binary mask, and multiplies the shared weight by it.  The indicator and the
top-k threshold are not differentiable; backward uses a straight-through
estimator (sigmoid gate for the selection, identity for the threshold).
"""

from __future__ import annotations

import math
import warnings
from enum import Enum
from fractions import Fraction

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class MaskVariant(str, Enum):
    TOPK = "TopK"
    THRES = "Thres"
    LEARNED = "Learned"


class EmptySelectionWarning(RuntimeWarning):
    """A language selects none of the specialist scores in some layer."""


class UnknownLanguageError(KeyError):
    pass


# mapping value used when a single score must always be selected
ALWAYS_SELECTED = 10.0


def keep_count(t: float, n: int) -> int:
    """Number of mask entries kept at sparsity ``t``: ceil((1 - t) * n).

    ``t`` is read as the decimal it was written as, so 0.3 means exactly 3/10.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"sparsity ratio must lie in [0, 1), got {t}")
    k = math.ceil((1 - Fraction(repr(float(t)))) * n)
    if k == 0:
        raise ValueError(f"sparsity {t} keeps no entries of a {n}-element weight")
    return k


def topk_mask(s: np.ndarray, k: int) -> np.ndarray:
    """Binary mask with ones at the ``k`` largest entries; ties go to the lowest flat index."""
    flat = s.reshape(-1)
    n = flat.size
    if not 0 < k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    if k == n:
        return np.ones_like(s)
    r = np.partition(flat, n - k)[n - k]
    keep = flat > r
    need = k - int(keep.sum())
    if need:
        keep[np.flatnonzero(flat == r)[:need]] = True
    return keep.astype(np.float64).reshape(s.shape)


def _dsigmoid(x: np.ndarray) -> np.ndarray:
    s = nc._sigmoid(x)
    return s * (1.0 - s)


class Dense:
    """Plain affine layer; the bias can be overridden per language."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(c_in) if std is None else std
        self.weight = Tensor(rng.normal(0.0, std, (c_in, c_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.lang_bias: dict[int, Tensor] = {}

    def bias_for(self, lang: int | None) -> Tensor:
        return self.lang_bias.get(lang, self.bias)

    def __call__(self, x: Tensor, lang: int | None = None) -> Tensor:
        return nc.linear(x, self.weight, self.bias_for(lang))


class ArtisanLayer:
    """Shared weight ``W``, ``K`` specialist scores and an ``L x K`` mapping matrix."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        n_languages: int,
        K: int,
        t: float,
        rng: np.random.Generator,
        variant: MaskVariant | str = MaskVariant.TOPK,
        mapping_scale: float = 0.5,
    ):
        if K < 1:
            raise ValueError("an artisan layer needs K >= 1 specialist scores")
        self.c_in, self.c_out = c_in, c_out
        self.t = t
        self.variant = MaskVariant(variant)
        keep_count(t, c_in * c_out)
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, c_out)), requires_grad=True)
        self.scores = [Tensor(rng.random((c_in, c_out)), requires_grad=True) for _ in range(K)]
        self.mapping = Tensor(rng.normal(0.0, mapping_scale, (n_languages, K)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.lang_bias: dict[int, Tensor] = {}
        self.dedicated: dict[int, Tensor] = {}
        self.frozen_rows = 0
        self.gate_mode = "hard"
        self.theta: Tensor | None = None
        if self.variant is MaskVariant.LEARNED:
            self.theta = Tensor(self._median_score(), requires_grad=True)
        self._cache: dict[int, np.ndarray] | None = None

    @property
    def K(self) -> int:
        return len(self.scores)

    @property
    def n_languages(self) -> int:
        return self.mapping.shape[0]

    def _median_score(self) -> float:
        t = self.mapping.data
        stacked = [sum(m.data for m, on in zip(self.scores, t[l] > 0) if on) for l in range(t.shape[0])]
        vals = [np.asarray(s, dtype=np.float64).reshape(-1) for s in stacked]
        vals = [v if v.size > 1 else np.zeros(self.c_in * self.c_out) for v in vals]
        return float(np.median(np.concatenate(vals)))

    def _check_lang(self, lang: int) -> None:
        if not 0 <= lang < self.n_languages:
            raise UnknownLanguageError(f"language index {lang} not registered (L={self.n_languages})")

    def selection(self, lang: int) -> np.ndarray:
        """Hard selection indicator for ``lang``; 1[sigmoid(T) > 0.5] is 1[T > 0]."""
        self._check_lang(lang)
        return self.mapping.data[lang] > 0

    def select_scores(self, lang: int) -> Tensor:
        """Mask score S_l (or the dedicated score tensor if ``lang`` has one)."""
        self._check_lang(lang)
        if lang in self.dedicated:
            return self.dedicated[lang]
        T = self.mapping
        row = T.data[lang]
        scores = self.scores
        if self.gate_mode == "soft":
            gate = nc._sigmoid(row)
        else:
            gate = (row > 0).astype(np.float64)
            if not gate.any():
                warnings.warn(
                    "a language selects no specialist score; its mask falls back to index order",
                    EmptySelectionWarning,
                    stacklevel=2,
                )
        out = np.zeros((self.c_in, self.c_out))
        for m, gk in zip(scores, gate):
            if gk != 0.0:
                out = out + m.data * gk
        n_lang = T.shape[0]

        def backward(g):
            grads = [g * gk if (m.requires_grad and gk != 0.0) else None for m, gk in zip(scores, gate)]
            gT = None
            if T.requires_grad:
                gT = np.zeros((n_lang, len(scores)))
                gT[lang] = _dsigmoid(row) * np.array([np.vdot(g, m.data) for m in scores])
            return (*grads, gT)

        return nc.custom_op(out, (*scores, T), backward, "select_scores")

    def binarize(self, s: Tensor) -> Tensor:
        if s.shape != (self.c_in, self.c_out):
            raise ValueError(f"score shape {s.shape} does not match weight {(self.c_in, self.c_out)}")
        return binarize(s, self.t, self.variant, self.theta)

    def mask(self, lang: int) -> Tensor:
        return self.binarize(self.select_scores(lang))

    def masked_weight(self, lang: int) -> Tensor:
        if self._cache is not None and not nc._state.grad_enabled:
            if lang not in self._cache:
                self._cache[lang] = self.weight.data * self.mask(lang).data
            return Tensor(self._cache[lang])
        return nc.mul(self.weight, self.mask(lang))

    def bias_for(self, lang: int | None) -> Tensor:
        return self.lang_bias.get(lang, self.bias)

    def __call__(self, x: Tensor, lang: int) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ValueError(f"input dim {x.shape[-1]} != c_in {self.c_in}")
        return nc.linear(x, self.masked_weight(lang), self.bias_for(lang))

    forward = __call__

    def add_language_row(self, init: str = "zeros", scale: float = 0.5, rng: np.random.Generator | None = None) -> int:
        """Append a mapping row for a new language and return its index."""
        if init == "zeros":
            row = np.zeros((1, self.K))
        elif init == "gaussian":
            if rng is None:
                raise ValueError("gaussian row init needs an rng")
            row = rng.normal(0.0, scale, (1, self.K))
        else:
            raise ValueError(f"unknown row init {init!r}")
        self.mapping.data = np.concatenate([self.mapping.data, row], axis=0)
        self.mapping.grad = None
        return self.n_languages - 1

    def enable_inference_cache(self, enabled: bool = True) -> None:
        """Opt-in reuse of masked weights across no-grad forwards; call again after any update."""
        self._cache = {} if enabled else None


def single_mask_mode(layer: ArtisanLayer) -> ArtisanLayer:
    """Reduce ``layer`` to one specialist score that every language always selects."""
    layer.scores = layer.scores[:1]
    layer.mapping = Tensor(np.full((layer.n_languages, 1), ALWAYS_SELECTED), requires_grad=False)
    if layer.theta is not None:
        layer.theta.data = np.array(layer._median_score())
    return layer


def binarize(s: Tensor, t: float, variant: MaskVariant | str, theta: Tensor | None = None) -> Tensor:
    """Binary mask from a score tensor; gradients pass straight through to ``s``."""
    variant = MaskVariant(variant)
    sd = s.data
    if variant is MaskVariant.TOPK:
        b = topk_mask(sd, keep_count(t, sd.size))
    elif variant is MaskVariant.THRES:
        b = (sd > 0).astype(np.float64)
    else:
        if theta is None:
            raise ValueError("Learned mask variant needs a threshold tensor")
        b = (sd < theta.data).astype(np.float64)

    if variant is MaskVariant.LEARNED:
        return nc.custom_op(b, (s, theta), lambda g: (g, np.array(-g.sum())), "binarize")
    return nc.custom_op(b, (s,), lambda g: (g,), "binarize")
