"""Deterministic synthetic multilingual corpora with language families.

Every symbol of a family pool has a prototype feature vector.  A language
draws most of its vocabulary from its family pool, adds a few symbols of its
own, and perturbs each prototype slightly.  By default every family pool
reuses one bank of sounds under its own symbol ids, so the same sound means
different symbols in different families.  An utterance emits 2-4 noisy
frames per transcript symbol.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# stream ids keep every random draw on its own seed stream
_WORLD, _LANG, _TRAIN, _EVAL, _PACK, _SOUNDS = 0, 1, 2, 3, 4, 5


@dataclass
class DataConfig:
    feature_dim: int = 16
    family_pool: int = 12
    symbols_per_language: int = 8
    shared_fraction: float = 0.75
    frames_min: int = 2
    frames_max: int = 4
    utt_min: int = 4
    utt_max: int = 10
    noise: float = 1.0
    perturbation: float = 0.25
    train_utts: int = 512
    eval_utts: int = 128
    low_resource_train: int = 86
    low_resource_eval: int = 32
    allow_repeats: bool = False
    prototype_scale: float = 1.0
    family_offset: float = 0.0
    unique_source: str = "fresh"
    # every family pool reuses one bank of sounds, each family with its own symbols
    shared_sounds: bool = True

    def __post_init__(self):
        if self.unique_source not in ("fresh", "pool"):
            raise ValueError("unique_source must be 'fresh' or 'pool'")
        if not 0.0 <= self.perturbation < 0.5:
            raise ValueError("perturbation must be in [0, 0.5) of the minimum prototype distance")
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise ValueError("bad frames-per-symbol range")
        if self.utt_min < 1 or self.utt_max < self.utt_min:
            raise ValueError("bad utterance length range")

    @property
    def n_shared(self) -> int:
        return min(self.family_pool, int(np.ceil(self.shared_fraction * self.symbols_per_language)))


@dataclass
class FamilySpec:
    family: int
    symbols: tuple[int, ...]
    prototypes: np.ndarray  # [len(symbols), feature_dim]


@dataclass
class LanguageSpec:
    tag: str
    family: int
    vocab: tuple[int, ...]
    prototypes: np.ndarray  # [len(vocab), feature_dim], perturbation included
    shared: tuple[int, ...] = ()
    frames: tuple[int, int] = (2, 4)
    length: tuple[int, int] = (4, 10)

    def prototype(self, symbol: int) -> np.ndarray:
        return self.prototypes[self.vocab.index(symbol)]


@dataclass
class World:
    config: DataConfig
    seed: int
    families: list[FamilySpec]
    languages: list[LanguageSpec]
    next_symbol: int = 0

    def language(self, tag: str) -> LanguageSpec:
        for spec in self.languages:
            if spec.tag == tag:
                return spec
        raise KeyError(f"language {tag!r} not in world")

    @property
    def vocab(self) -> tuple[int, ...]:
        return tuple(sorted({s for spec in self.languages for s in spec.vocab}))


@dataclass
class Utterance:
    features: np.ndarray  # [frames, feature_dim]
    transcript: tuple[int, ...]
    language: str

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _min_distance(p: np.ndarray) -> float:
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    return float(d[np.triu_indices(len(p), 1)].min()) if len(p) > 1 else np.inf


def _sound_bank(seed: int, cfg: DataConfig) -> np.ndarray:
    return _rng(seed, _SOUNDS).normal(0.0, cfg.prototype_scale, (cfg.family_pool, cfg.feature_dim))


def _fresh_family(fid: int, first_symbol: int, cfg: DataConfig, rng, bank: np.ndarray | None = None) -> FamilySpec:
    if bank is None:
        protos = rng.normal(0.0, cfg.prototype_scale, (cfg.family_pool, cfg.feature_dim))
    else:
        protos = bank.copy()
    protos += rng.normal(0.0, cfg.family_offset, (1, cfg.feature_dim)) if cfg.family_offset > 0 else 0.0
    return FamilySpec(fid, tuple(range(first_symbol, first_symbol + cfg.family_pool)), protos)


def _make_language(tag: str, fam: FamilySpec, first_unique: int, cfg: DataConfig, rng) -> LanguageSpec:
    n_shared = cfg.n_shared
    n_unique = cfg.symbols_per_language - n_shared
    picks = np.sort(rng.choice(len(fam.symbols), size=n_shared, replace=False))
    shared = [fam.symbols[i] for i in picks]
    base = [fam.prototypes[i] for i in picks]
    unique = list(range(first_unique, first_unique + n_unique))
    if cfg.unique_source == "pool":
        # own symbol ids, but sounding like pool symbols this language does not use
        unused = np.setdiff1d(np.arange(len(fam.symbols)), picks)
        base += [fam.prototypes[i] for i in np.sort(rng.choice(unused, size=n_unique, replace=False))]
    else:
        base += list(rng.normal(0.0, cfg.prototype_scale, (n_unique, cfg.feature_dim)))
    base = np.array(base)
    # scale perturbations against the closest pair of prototypes
    limit = _min_distance(base) * cfg.perturbation
    direction = rng.normal(0.0, 1.0, base.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    protos = base + direction * limit
    return LanguageSpec(
        tag=tag,
        family=fam.family,
        vocab=tuple(shared + unique),
        prototypes=protos,
        shared=tuple(shared),
        frames=(cfg.frames_min, cfg.frames_max),
        length=(cfg.utt_min, cfg.utt_max),
    )


def build_world(n_families: int = 2, langs_per_family: int = 4, seed: int = 0, config: DataConfig | None = None) -> World:
    """Families of related languages, fully determined by ``seed``."""
    if n_families < 1 or langs_per_family < 1:
        raise ValueError("need at least one family and one language per family")
    cfg = config or DataConfig()
    bank = _sound_bank(seed, cfg) if cfg.shared_sounds else None
    families = [_fresh_family(f, f * cfg.family_pool, cfg, _rng(seed, _WORLD, f), bank) for f in range(n_families)]
    next_symbol = n_families * cfg.family_pool
    languages = []
    for f, fam in enumerate(families):
        for j in range(langs_per_family):
            idx = f * langs_per_family + j
            spec = _make_language(f"f{f}l{j}", fam, next_symbol, cfg, _rng(seed, _LANG, idx))
            next_symbol += len(spec.vocab) - len(spec.shared)
            languages.append(spec)
    return World(cfg, seed, families, languages, next_symbol)


def _transcript(spec: LanguageSpec, rng, allow_repeats: bool) -> tuple[int, ...]:
    n = int(rng.integers(spec.length[0], spec.length[1] + 1))
    V = len(spec.vocab)
    ids = [int(rng.integers(V))]
    for _ in range(n - 1):
        if allow_repeats or V == 1:
            ids.append(int(rng.integers(V)))
        else:
            # uniform over the symbols that differ from the previous one
            nxt = int(rng.integers(V - 1))
            ids.append(nxt + (nxt >= ids[-1]))
    return tuple(spec.vocab[i] for i in ids)


def sample_corpus(spec: LanguageSpec, n_utts: int, seed: int, noise: float = 0.1, allow_repeats: bool = False) -> list[Utterance]:
    """Utterances for one language; deterministic per (spec, seed)."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_utts):
        y = _transcript(spec, rng, allow_repeats)
        counts = rng.integers(spec.frames[0], spec.frames[1] + 1, size=len(y))
        frames = np.concatenate([np.repeat(spec.prototype(s)[None, :], c, axis=0) for s, c in zip(y, counts)])
        frames = frames + rng.normal(0.0, noise, frames.shape) if noise > 0 else frames.copy()
        out.append(Utterance(frames, y, spec.tag))
    return out


def _lang_seed(world: World, tag: str, stream: int) -> list[int]:
    idx = [s.tag for s in world.languages].index(tag)
    return [world.seed, stream, idx]


def train_eval_split(world: World, tag: str, n_train: int | None = None, n_eval: int | None = None):
    """Train and held-out corpora for ``tag`` drawn from separate seed streams."""
    cfg = world.config
    spec = world.language(tag)
    n_train = cfg.train_utts if n_train is None else n_train
    n_eval = cfg.eval_utts if n_eval is None else n_eval
    seed_train = int(np.random.SeedSequence(_lang_seed(world, tag, _TRAIN)).generate_state(1)[0])
    seed_eval = int(np.random.SeedSequence(_lang_seed(world, tag, _EVAL)).generate_state(1)[0])
    train = sample_corpus(spec, n_train, seed_train, cfg.noise, cfg.allow_repeats)
    held = sample_corpus(spec, n_eval, seed_eval, cfg.noise, cfg.allow_repeats)
    return train, held


def low_resource_pack(world: World, n_new_langs: int = 2, minutes_scale: float = 1 / 6, seed: int = 0, fresh_family: Sequence[bool] | None = None):
    """New languages for adaptation, each with a small train and eval corpus.

    Languages alternate between an existing family (reusing its prototypes)
    and a brand-new family unless ``fresh_family`` says otherwise.  The train
    corpus holds ``minutes_scale`` of a stage-A corpus.
    """
    cfg = world.config
    if fresh_family is None:
        fresh_family = [i % 2 == 1 for i in range(n_new_langs)]
    next_symbol = world.next_symbol
    new_specs, corpora = [], {}
    n_train = max(1, int(round(cfg.train_utts * minutes_scale)))
    n_eval = cfg.low_resource_eval
    for i in range(n_new_langs):
        rng = _rng(seed, _PACK, i)
        if fresh_family[i]:
            bank = _sound_bank(world.seed, cfg) if cfg.shared_sounds else None
            fam = _fresh_family(len(world.families) + i, next_symbol, cfg, rng, bank)
            next_symbol += cfg.family_pool
            tag = f"new{i}_fresh"
        else:
            fam = world.families[i % len(world.families)]
            tag = f"new{i}_f{fam.family}"
        spec = _make_language(tag, fam, next_symbol, cfg, rng)
        next_symbol += len(spec.vocab) - len(spec.shared)
        train = sample_corpus(spec, n_train, int(rng.integers(2**31)), cfg.noise, cfg.allow_repeats)
        held = sample_corpus(spec, n_eval, int(rng.integers(2**31)), cfg.noise, cfg.allow_repeats)
        new_specs.append(spec)
        corpora[tag] = (train, held)
    return new_specs, corpora


def near_duplicate_world(seed: int = 0, train_sizes: Sequence[int] = (512, 256, 64, 16), perturbation: float = 0.05, config: DataConfig | None = None):
    """One family of near-duplicate dialects with imbalanced training data.

    Every dialect uses the same vocabulary and differs from the others only by
    a small prototype perturbation.  Returns the world and ``{tag: (train, eval)}``.
    """
    if not train_sizes or min(train_sizes) < 1:
        raise ValueError("train_sizes must be non-empty and positive")
    base = config or DataConfig()
    cfg = DataConfig(**{**base.__dict__, "shared_fraction": 1.0, "perturbation": perturbation, "family_pool": base.symbols_per_language})
    world = build_world(1, len(train_sizes), seed=seed, config=cfg)
    corpora = {spec.tag: train_eval_split(world, spec.tag, n) for spec, n in zip(world.languages, train_sizes)}
    return world, corpora


def vocabulary_overlap(a: LanguageSpec, b: LanguageSpec) -> float:
    """Jaccard overlap of two vocabularies."""
    sa, sb = set(a.vocab), set(b.vocab)
    return len(sa & sb) / len(sa | sb)


def family_overlap_means(specs: Sequence[LanguageSpec]) -> tuple[float, float]:
    within, cross = [], []
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            (within if specs[i].family == specs[j].family else cross).append(vocabulary_overlap(specs[i], specs[j]))
    return float(np.mean(within)) if within else float("nan"), float(np.mean(cross)) if cross else float("nan")


# corpus files ---------------------------------------------------------------

_REC_HEAD = struct.Struct("<II")


def write_corpus(path: Path, utts: Sequence[Utterance], spec: LanguageSpec, seed: int, split: str) -> tuple[Path, Path]:
    """Write ``<path>.manifest`` (text) and ``<path>.bin`` (binary records).

    Record layout: uint32 frames, uint32 feature_dim, frames*feature_dim
    little-endian float64, uint32 transcript length, int32 symbol ids.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = path.with_suffix(".manifest")
    binary = path.with_suffix(".bin")
    feat = utts[0].features.shape[1]
    lines = [
        "format = modasr-corpus 1",
        f"language = {spec.tag}",
        f"family = {spec.family}",
        f"split = {split}",
        f"seed = {seed}",
        f"utterances = {len(utts)}",
        f"frames = {sum(u.n_frames for u in utts)}",
        f"feature_dim = {feat}",
        f"vocab = {' '.join(map(str, spec.vocab))}",
    ]
    manifest.write_text("\n".join(lines) + "\n")
    with open(binary, "wb") as fh:
        for u in utts:
            fh.write(_REC_HEAD.pack(u.n_frames, u.features.shape[1]))
            fh.write(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", len(u.transcript)))
            fh.write(np.asarray(u.transcript, dtype="<i4").tobytes())
    return manifest, binary


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def read_corpus(path: Path) -> tuple[dict[str, str], list[Utterance]]:
    path = Path(path)
    manifest = read_manifest(path.with_suffix(".manifest"))
    raw = path.with_suffix(".bin").read_bytes()
    utts, off = [], 0
    tag = manifest["language"]
    while off < len(raw):
        n, d = _REC_HEAD.unpack_from(raw, off)
        off += _REC_HEAD.size
        feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
        off += 8 * n * d
        (m,) = struct.unpack_from("<I", raw, off)
        off += 4
        ids = tuple(int(v) for v in np.frombuffer(raw, dtype="<i4", count=m, offset=off))
        off += 4 * m
        utts.append(Utterance(feats, ids, tag))
    if len(utts) != int(manifest["utterances"]):
        raise ValueError(f"{path}: manifest lists {manifest['utterances']} utterances, found {len(utts)}")
    return manifest, utts
