"""Mapping-matrix similarity, mapping collapse metrics and ablation sweeps."""

from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .model import EncoderModel


@dataclass
class SimilarityReport:
    languages: list[str]
    matrices: list[np.ndarray]  # one L x L matrix per model part
    undefined: list[np.ndarray]  # True where a zero-norm row makes cosine undefined
    part_blocks: list[tuple[int, int]]  # [start, stop) block range of each part

    def to_csv(self, part: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["language", *self.languages])
        m, u = self.matrices[part], self.undefined[part]
        for i, tag in enumerate(self.languages):
            w.writerow([tag, *("undefined" if u[i, j] else repr(float(m[i, j])) for j in range(len(self.languages)))])
        return buf.getvalue()


def mapping_features(model: EncoderModel, n_parts: int = 4, binary: bool = False) -> list[np.ndarray]:
    """Per part, an [L, 2 * blocks_per_part * K] array of concatenated mapping rows.

    Rows are concatenated block by block, QKV before projection.  ``binary``
    swaps raw mapping values for the selection indicators.
    """
    n_blocks = len(model.blocks)
    if n_parts < 1 or n_blocks % n_parts:
        raise ValueError(f"{n_blocks} blocks cannot be split evenly into {n_parts} parts")
    per = n_blocks // n_parts
    parts = []
    for p in range(n_parts):
        cols = []
        for blk in model.blocks[p * per : (p + 1) * per]:
            for layer in (blk.qkv, blk.proj):
                if not hasattr(layer, "mapping"):
                    raise ValueError("model has no mapping matrices")
                t = layer.mapping.data
                cols.append((t > 0).astype(np.float64) if binary else t.copy())
        parts.append(np.concatenate(cols, axis=1))
    return parts


def cosine_similarity_matrix(features: np.ndarray, standardize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarity; returns (matrix, undefined-mask).

    Zero-norm rows have undefined similarity; their entries are NaN and flagged.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValueError("need at least two languages")
    if standardize:
        sd = f.std(axis=0)
        f = (f - f.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    norms = np.linalg.norm(f, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = f / safe[:, None]
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, np.where(zero, np.nan, 1.0))
    undefined = zero[:, None] | zero[None, :]
    sim[undefined] = np.nan
    return sim, undefined


def similarity_report(model: EncoderModel, n_parts: int = 4, binary: bool = False, standardize: bool = False) -> SimilarityReport:
    per = len(model.blocks) // n_parts if n_parts and len(model.blocks) % n_parts == 0 else 0
    mats, undef = [], []
    for feats in mapping_features(model, n_parts, binary):
        m, u = cosine_similarity_matrix(feats, standardize)
        mats.append(m)
        undef.append(u)
    bounds = [(p * per, (p + 1) * per) for p in range(n_parts)]
    return SimilarityReport(list(model.languages), mats, undef, bounds)


def family_gap(sim: np.ndarray, families: Sequence) -> float:
    """Mean within-family minus mean cross-family similarity over off-diagonal pairs."""
    fam = np.asarray(families)
    if len(set(fam.tolist())) < 2:
        raise ValueError("need at least two families")
    iu = np.triu_indices(len(fam), 1)
    vals = sim[iu]
    same = (fam[:, None] == fam[None, :])[iu]
    ok = ~np.isnan(vals)
    within, cross = vals[same & ok], vals[~same & ok]
    if not len(within) or not len(cross):
        return float("nan")
    return float(within.mean() - cross.mean())


@dataclass
class ContrastResult:
    gap: float
    p_value: float
    n_permutations: int


def family_contrast(sim: np.ndarray, families: Sequence, n_permutations: int = 1000, seed: int = 0) -> ContrastResult:
    """Family gap with a one-sided permutation p-value (labels shuffled)."""
    observed = family_gap(sim, families)
    rng = np.random.default_rng(seed)
    fam = np.asarray(families)
    hits = 0
    for _ in range(n_permutations):
        if family_gap(sim, rng.permutation(fam)) >= observed - 1e-12:
            hits += 1
    return ContrastResult(observed, (hits + 1) / (n_permutations + 1), n_permutations)


def family_contrast_report(report: SimilarityReport, families: Sequence, n_permutations: int = 1000, seed: int = 0) -> list[ContrastResult]:
    """Per-part contrasts followed by one for the mean matrix over parts."""
    out = [family_contrast(m, families, n_permutations, seed) for m in report.matrices]
    overall = np.nanmean(np.stack(report.matrices), axis=0)
    out.append(family_contrast(overall, families, n_permutations, seed))
    return out


@dataclass
class CollapseReport:
    iters: list[int]
    std: list[float]
    switch_rate: list[float]  # len(iters) - 1 entries

    @property
    def mean_switch_rate(self) -> float:
        return float(np.mean(self.switch_rate)) if self.switch_rate else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snapshot", "iter", "std", "switch_rate"])
        for i, (it, sd) in enumerate(zip(self.iters, self.std)):
            w.writerow([i, it, repr(sd), "" if i == 0 else repr(self.switch_rate[i - 1])])
        return buf.getvalue()


def collapse_metrics(history: Sequence[np.ndarray], iters: Sequence[int] | None = None) -> CollapseReport:
    """Std of mapping entries per snapshot and the fraction of signs flipped between snapshots."""
    if len(history) < 2:
        raise ValueError("need at least two mapping snapshots")
    iters = list(range(len(history))) if iters is None else list(iters)
    std = [float(np.std(h)) for h in history]
    rates = []
    for a, b in zip(history, history[1:]):
        if a.shape != b.shape:
            raise ValueError("snapshots must share a shape")
        rates.append(float(np.mean((a > 0) != (b > 0))))
    return CollapseReport(iters, std, rates)


# ablation sweeps ---------------------------------------------------------------

SWEEP_AXES = ("t", "K", "alpha_beta", "gamma", "mask_variant", "weight_update")


def _apply_grid_point(axis: str, value, enc, cfg):
    if axis == "t":
        return replace(enc, t=float(value)), cfg
    if axis == "K":
        return replace(enc, K=int(value)), cfg
    if axis == "alpha_beta":
        a, b = value
        return enc, replace(cfg, alpha=float(a), beta=int(b))
    if axis == "gamma":
        if value in ("M_only", "M-only", None):
            return enc, replace(cfg, weight_update="Freeze")
        return enc, replace(cfg, gamma=int(value))
    if axis == "mask_variant":
        return replace(enc, variant=str(value)), cfg
    if axis == "weight_update":
        return enc, replace(cfg, weight_update=str(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _label(value) -> str:
    if isinstance(value, (tuple, list)):
        return "/".join(str(v) for v in value)
    return str(value)


def run_point(args) -> dict:
    """Train one (grid point, seed) and return its mean final eval CER."""
    from .datagen import build_world, train_eval_split
    from .trainer import build_model, train_multilingual

    axis, value, enc, cfg, data_cfg, world_shape, seed = args
    enc, cfg = _apply_grid_point(axis, value, enc, cfg)
    cfg = replace(cfg, seed=seed)
    world = build_world(*world_shape, seed=seed, config=data_cfg)
    corpora = {s.tag: train_eval_split(world, s.tag) for s in world.languages}
    model = build_model(enc, cfg, list(corpora), world.vocab)
    res = train_multilingual(model, corpora, cfg)
    return {"axis": axis, "value": _label(value), "seed": seed, "cer": res.mean_final_cer(), "initial_cer": res.mean_initial_cer()}


def ablation_sweep(axis: str, grid: Sequence, enc, cfg, data_cfg=None, world_shape=(2, 4), seeds=(0, 1, 2), workers: int = 1) -> list[dict]:
    """Mean eval CER per grid point over ``seeds``; one row per grid point, in grid order."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not len(grid):
        raise ValueError("grid must not be empty")
    for value in grid:
        _apply_grid_point(axis, value, enc, cfg)
    jobs = [(axis, v, enc, cfg, data_cfg, tuple(world_shape), s) for v, s in itertools.product(grid, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_point, jobs))
    else:
        results = [run_point(j) for j in jobs]
    rows = []
    for value in grid:
        label = _label(value)
        cers = [r["cer"] for r in results if r["value"] == label]
        rows.append({axis: label, "mean_cer": float(np.mean(cers)), **{f"seed{r['seed']}": r["cer"] for r in results if r["value"] == label}})
    return rows


def sweep_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()
