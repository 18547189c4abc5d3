"""Multilingual training, low-resource adaptation and the mask-tuning baselines."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc
from .artisan import ArtisanLayer
from .ctc import corpus_cer, ctc_loss_batch, greedy_decode
from .datagen import Utterance
from .model import EncoderConfig, EncoderModel
from .numcore import Tensor

log = logging.getLogger(__name__)

STAGES = ("multilingual", "low_resource", "further_mask_ft")
WEIGHT_UPDATES = ("Iter", "Freeze", "Random")
BASELINES = ("none", "shared_weight", "separate_weight", "single_mask")
LOG_COLUMNS = ("iter", "phase", "language", "loss", "lr_other", "lr_T", "eval_cer")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: str = "multilingual"
    iterations: int = 6000
    batch_size: int = 8
    lr: float = 2e-3
    warmup: float = 0.1
    hold: float = 0.4
    decay: float = 0.5
    final_ratio: float = 0.05
    alpha: float = 10.0
    beta: int = 5
    # sum mapping gradients over the iterations between two mapping updates
    accumulate_T: bool = True
    gamma: int = 500
    weight_update: str = "Iter"
    start_phase: str = "M"
    baseline: str = "none"
    random_resample: bool = False
    clip_norm: float = 5.0
    eval_interval: int = 1000
    eval_batch: int = 64
    t_snapshot_interval: int = 50
    adapt_head_fraction: float = 0.1
    adapt_row_init: str = "gaussian"
    check_finite: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 1 or self.gamma < 1:
            raise ValueError("beta and gamma must be >= 1")
        if not math.isclose(self.warmup + self.hold + self.decay, 1.0, abs_tol=1e-9):
            raise ValueError("tri-stage fractions must sum to 1")
        if self.weight_update not in WEIGHT_UPDATES:
            raise ValueError(f"weight_update must be one of {WEIGHT_UPDATES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.start_phase not in ("M", "W"):
            raise ValueError("start_phase must be M or W")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")


# schedule --------------------------------------------------------------------


def lr_at(cfg: TrainConfig, it: int, group: str = "other", alpha: float | None = None) -> float:
    """Tri-stage learning rate; the mapping group gets ``alpha`` times the same curve."""
    n = cfg.iterations
    warm = cfg.warmup * n
    decay_start = (cfg.warmup + cfg.hold) * n
    if it < warm:
        value = cfg.lr * it / warm
    elif it < decay_start:
        value = cfg.lr
    else:
        span = max(1.0, (n - 1) - decay_start)
        value = cfg.lr * cfg.final_ratio ** min(1.0, (it - decay_start) / span)
    if group == "T":
        value *= cfg.alpha if alpha is None else alpha
    return value


def weight_phase(cfg: TrainConfig, it: int) -> str:
    """'M' or 'W' for the alternating strategy, 'all' otherwise."""
    if cfg.weight_update != "Iter" or cfg.baseline in ("shared_weight", "separate_weight"):
        return "all"
    even = (it // cfg.gamma) % 2 == 0
    return cfg.start_phase if even else ("W" if cfg.start_phase == "M" else "M")


def update_gate(cfg: TrainConfig, it: int, group: str) -> bool:
    """Whether parameter ``group`` takes an optimizer step at iteration ``it``."""
    if group == "T":
        return it % cfg.beta == 0
    if group in ("biases", "heads"):
        return True
    dense = cfg.baseline in ("shared_weight", "separate_weight")
    if group == "M":
        if dense:
            return False
        return weight_phase(cfg, it) in ("M", "all")
    if group == "W":
        if dense:
            return True
        if cfg.weight_update == "Freeze":
            return False
        return weight_phase(cfg, it) in ("W", "all")
    raise ValueError(f"unknown group {group!r}")


# optimizer -------------------------------------------------------------------


class Adam:
    """Adam with per-parameter step counters (parameters may skip iterations)."""

    def __init__(self, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, name: str, p: Tensor, grad: np.ndarray, lr: float, row_mask: np.ndarray | None = None) -> None:
        m, v, n = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
        n += 1
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        update = lr * (m / (1 - self.b1**n)) / (np.sqrt(v / (1 - self.b2**n)) + self.eps)
        if row_mask is not None:
            update = update * row_mask
        p.data = p.data - update
        self.state[name] = (m, v, n)


# batching / evaluation -------------------------------------------------------


def collate(utts: Sequence[Utterance], vocab: Sequence[int]):
    """Pad features to [B, T, F]; map global symbol ids to head-local ids."""
    local = {s: i for i, s in enumerate(vocab)}
    lengths = [u.n_frames for u in utts]
    T = max(lengths)
    F = utts[0].features.shape[1]
    x = np.zeros((len(utts), T, F))
    for i, u in enumerate(utts):
        x[i, : u.n_frames] = u.features
    try:
        targets = [[local[s] for s in u.transcript] for u in utts]
    except KeyError as exc:
        raise ValueError(f"symbol {exc.args[0]} is not in the head vocabulary") from None
    return x, lengths, targets


def evaluate(model: EncoderModel, utts: Sequence[Utterance], lang, batch: int = 64, head: int | None = None):
    """Corpus CER of greedy decodes; transcripts compared in global symbol ids."""
    l = model.language_index(lang)
    h = model.lang_head[l] if head is None else head
    vocab = model.heads[h].vocab
    pairs = []
    with nc.no_grad():
        for start in range(0, len(utts), batch):
            chunk = utts[start : start + batch]
            lengths = [u.n_frames for u in chunk]
            T = max(lengths)
            x = np.zeros((len(chunk), T, chunk[0].features.shape[1]))
            for i, u in enumerate(chunk):
                x[i, : u.n_frames] = u.features
            lp = model.forward(x, l, head=h, lengths=lengths).data
            for i, u in enumerate(chunk):
                hyp = [vocab[s] for s in greedy_decode(lp[i], lengths[i])]
                pairs.append((hyp, list(u.transcript)))
    return corpus_cer(pairs)


class _Sampler:
    """Per-language shuffled epochs drawn from one generator."""

    def __init__(self, corpus: Sequence[Utterance], rng: np.random.Generator):
        self.corpus = corpus
        self.rng = rng
        self.order: list[int] = []

    def next(self, n: int) -> list[Utterance]:
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.corpus)))
            out.append(self.corpus[self.order.pop()])
        return out


# training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: EncoderModel | None
    models: dict[str, EncoderModel] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    t_history: list[np.ndarray] = field(default_factory=list)
    t_history_iters: list[int] = field(default_factory=list)
    initial_cer: dict[str, float] = field(default_factory=dict)
    final_cer: dict[str, float] = field(default_factory=dict)

    def mean_final_cer(self) -> float:
        return float(np.mean(list(self.final_cer.values())))

    def mean_initial_cer(self) -> float:
        return float(np.mean(list(self.initial_cer.values())))

    def log_csv(self) -> str:
        return log_to_csv(self.log)


def log_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


def _group_key(group: str) -> str:
    return {"backbone-W": "W", "specialist-M": "M", "mapping-T": "T", "biases": "biases", "heads": "heads"}[group]


def build_model(enc: EncoderConfig, cfg: TrainConfig, languages: Sequence[str], vocab: Sequence[int], seed: int | None = None) -> EncoderModel:
    """Model matching ``cfg.baseline``: artisan, plain dense, or single-mask layers."""
    kind = {"none": enc.layer_kind, "shared_weight": "dense", "separate_weight": "dense", "single_mask": "single_mask"}[cfg.baseline]
    return EncoderModel(replace(enc, layer_kind=kind), languages, vocab, seed=cfg.seed if seed is None else seed)


def _random_update_masks(model: EncoderModel, t: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fixed binary masks of density (1 - t) selecting which backbone entries may update."""
    from .artisan import keep_count

    masks = {}
    for name, p, group in model.named_parameters():
        if group == "backbone-W":
            k = keep_count(t, p.size)
            flat = np.zeros(p.size)
            flat[rng.choice(p.size, size=k, replace=False)] = 1.0
            masks[name] = flat.reshape(p.shape)
    return masks


class _Stepper:
    """Applies gated, clipped Adam updates to one model."""

    def __init__(self, model: EncoderModel, cfg: TrainConfig, trainable=None, rng=None):
        self.model = model
        self.cfg = cfg
        self.adam = Adam()
        self.trainable = trainable  # optional predicate (name, group) -> bool
        self.rng = rng
        self.random_masks = None
        if cfg.weight_update == "Random" and cfg.baseline not in ("shared_weight", "separate_weight"):
            self.random_masks = _random_update_masks(model, model.config.t, rng)
        self.row_masks: dict[str, np.ndarray] = {}

    def step(self, it: int, gates: dict[str, bool], lr_other: float, lr_T: float) -> None:
        updates = []
        if self.random_masks is not None and self.cfg.random_resample and gates.get("W", False):
            self.random_masks = _random_update_masks(self.model, self.model.config.t, self.rng)
        for name, p, group in self.model.named_parameters():
            if not p.requires_grad or p.grad is None:
                continue
            key = _group_key(group)
            if not gates.get(key, False):
                continue
            if self.trainable is not None and not self.trainable(name, group):
                continue
            g = p.grad
            if self.random_masks is not None and name in self.random_masks:
                g = g * self.random_masks[name]
            if name in self.row_masks:
                g = g * self.row_masks[name]
            updates.append((name, p, g, lr_T if key == "T" else lr_other))
        if self.cfg.clip_norm and updates:
            total = math.sqrt(sum(float(np.vdot(g, g)) for _, _, g, _ in updates))
            if total > self.cfg.clip_norm:
                factor = self.cfg.clip_norm / total
                updates = [(n, p, g * factor, lr) for n, p, g, lr in updates]
        for name, p, g, lr in updates:
            self.adam.step(name, p, g, lr, self.row_masks.get(name))

    def zero_grad(self, keep_T: bool = False) -> None:
        for _, p, group in self.model.named_parameters():
            if keep_T and _group_key(group) == "T":
                continue
            p.grad = None


def _snapshot_T(model: EncoderModel) -> np.ndarray | None:
    layers = model.artisan_layers()
    if not layers or not layers[0][1].mapping.requires_grad:
        return None
    return np.stack([layer.mapping.data.copy() for _, layer in layers])


def _eval_all(models: dict[str, EncoderModel], corpora, cfg: TrainConfig) -> dict[str, float]:
    return {tag: evaluate(models[tag], corpora[tag][1], tag, cfg.eval_batch).cer for tag in corpora}


def train_multilingual(
    model: EncoderModel | dict[str, EncoderModel],
    corpora: dict[str, tuple[Sequence[Utterance], Sequence[Utterance]]],
    cfg: TrainConfig,
) -> TrainResult:
    """Round-robin multilingual CTC training with the T/W/M update schedule.

    ``corpora`` maps language tag to (train, eval) utterances.  With
    ``baseline="separate_weight"`` pass a dict of independent models, one per
    language (see :func:`separate_models`).
    """
    if isinstance(model, dict):
        models = model
    else:
        models = {tag: model for tag in corpora}
    for tag, m in models.items():
        m.language_index(tag)
    tags = list(corpora)
    unique_models = {id(m): m for m in models.values()}
    rng = np.random.default_rng([cfg.seed, 101])
    dropout_rng = np.random.default_rng([cfg.seed, 102])
    samplers = {tag: _Sampler(corpora[tag][0], np.random.default_rng([cfg.seed, 103, i])) for i, tag in enumerate(tags)}
    steppers = {k: _Stepper(m, cfg, rng=rng) for k, m in unique_models.items()}
    first = next(iter(unique_models.values()))
    result = TrainResult(model=None if isinstance(model, dict) else model, models=dict(models))

    def record_eval(it):
        cers = _eval_all(models, corpora, cfg)
        for tag in tags:
            result.log.append({"iter": it, "phase": "eval", "language": tag, "eval_cer": cers[tag]})
        return cers

    def snapshot(it):
        snap = _snapshot_T(first)
        if snap is not None:
            result.t_history.append(snap)
            result.t_history_iters.append(it)

    with nc.finite_checks(cfg.check_finite):
        result.initial_cer = record_eval(0)
        snapshot(0)
        for it in range(cfg.iterations):
            tag = tags[it % len(tags)]
            m = models[tag]
            stepper = steppers[id(m)]
            l = m.language_index(tag)
            batch = samplers[tag].next(cfg.batch_size)
            x, lengths, targets = collate(batch, m.heads[m.lang_head[l]].vocab)
            lp = m.forward(x, l, lengths=lengths, rng=dropout_rng)
            loss = ctc_loss_batch(lp, targets, lengths)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at iteration {it} (language {tag})")
            loss.backward()
            gates = {g: update_gate(cfg, it, g) for g in ("T", "M", "W", "biases", "heads")}
            lr_o, lr_t = lr_at(cfg, it, "other"), lr_at(cfg, it, "T")
            stepper.step(it, gates, lr_o, lr_t)
            stepper.zero_grad(keep_T=cfg.accumulate_T and not gates["T"])
            result.log.append(
                {"iter": it, "phase": weight_phase(cfg, it), "language": tag, "loss": value, "lr_other": lr_o, "lr_T": lr_t}
            )
            if (it + 1) % cfg.t_snapshot_interval == 0:
                snapshot(it + 1)
            if (it + 1) % cfg.eval_interval == 0 and it + 1 < cfg.iterations:
                record_eval(it + 1)
        if cfg.iterations % cfg.t_snapshot_interval:
            snapshot(cfg.iterations)
        result.final_cer = record_eval(cfg.iterations)
    return result


def separate_models(enc: EncoderConfig, cfg: TrainConfig, corpora, vocab: Sequence[int]) -> dict[str, EncoderModel]:
    """One independent dense model per language (no shared parameters)."""
    return {tag: build_model(enc, cfg, [tag], vocab, seed=cfg.seed * 1000 + i) for i, tag in enumerate(corpora)}


# low-resource adaptation -------------------------------------------------------


def _finetune(model: EncoderModel, tag: str, train, held, cfg: TrainConfig, trainable_phase) -> TrainResult:
    """Single-language loop where ``trainable_phase(it)`` returns a (name, group) predicate."""
    l = model.language_index(tag)
    vocab = model.heads[model.lang_head[l]].vocab
    sampler = _Sampler(train, np.random.default_rng([cfg.seed, 203]))
    dropout_rng = np.random.default_rng([cfg.seed, 204])
    stepper = _Stepper(model, replace(cfg, weight_update="Freeze"), rng=np.random.default_rng([cfg.seed, 205]))
    for _, layer in model.artisan_layers():
        if layer.frozen_rows:
            mask = np.zeros(layer.mapping.shape)
            mask[layer.frozen_rows :] = 1.0
            stepper.row_masks[_mapping_name(model, layer)] = mask
    result = TrainResult(model=model)
    gates = {"T": True, "M": True, "W": True, "biases": True, "heads": True}
    with nc.finite_checks(cfg.check_finite):
        result.initial_cer = {tag: evaluate(model, held, l, cfg.eval_batch).cer}
        for it in range(cfg.iterations):
            stepper.trainable = trainable_phase(it)
            x, lengths, targets = collate(sampler.next(cfg.batch_size), vocab)
            loss = ctc_loss_batch(model.forward(x, l, lengths=lengths, rng=dropout_rng), targets, lengths)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at iteration {it} (language {tag})")
            loss.backward()
            lr = lr_at(cfg, it, "other")
            stepper.step(it, gates, lr, lr)
            stepper.zero_grad()
            result.log.append({"iter": it, "phase": cfg.stage, "language": tag, "loss": value, "lr_other": lr, "lr_T": lr})
        result.final_cer = {tag: evaluate(model, held, l, cfg.eval_batch).cer}
    result.log.append({"iter": cfg.iterations, "phase": "eval", "language": tag, "eval_cer": result.final_cer[tag]})
    return result


def _mapping_name(model: EncoderModel, layer: ArtisanLayer) -> str:
    for prefix, other in model.artisan_layers():
        if other is layer:
            return f"{prefix}.mapping"
    raise KeyError("layer not in model")


def freeze_all(model: EncoderModel) -> None:
    for _, layer in model.artisan_layers():
        layer.frozen_rows = layer.n_languages
    model.frozen.update(name for name, _, _ in model.named_parameters())


def adapt_low_resource(model: EncoderModel, tag: str, vocab: Sequence[int], train, held, cfg: TrainConfig) -> TrainResult:
    """Add ``tag`` to a copy of ``model`` and tune only its mapping rows, head and biases.

    The first ``adapt_head_fraction`` of iterations train the new head alone.
    Everything existing languages read stays frozen, so their outputs cannot change.
    """
    if tag in model.languages:
        raise ValueError(f"language {tag!r} is already registered")
    model = copy.deepcopy(model)
    freeze_all(model)
    rng = np.random.default_rng([cfg.seed, 201])
    l = model.add_language(tag, vocab, rng, row_init=cfg.adapt_row_init)
    head_iters = int(round(cfg.adapt_head_fraction * cfg.iterations))
    head_prefix = f"heads.{model.lang_head[l]}."
    lang_prefix = f"lang.{tag}."

    def phase(it):
        if it < head_iters:
            return lambda name, group: name.startswith(head_prefix)
        return lambda name, group: (
            name.startswith(head_prefix) or (name.startswith(lang_prefix) and group == "biases") or group == "mapping-T"
        )

    return _finetune(model, tag, train, held, replace(cfg, stage="low_resource"), phase)


def adaptation_trainable_count(model: EncoderModel, tag: str) -> int:
    """Parameters adapt_low_resource may change for ``tag``: its head, mapping rows and biases."""
    l = model.language_index(tag)
    head = model.heads[model.lang_head[l]]
    count = head.weight.size + head.bias.size
    count += sum(layer.K for _, layer in model.artisan_layers())
    count += sum(mod.lang_bias[l].size for _, mod in model.bias_modules() if l in mod.lang_bias)
    return count


def further_mask_ft(model: EncoderModel, tag: str, train, held, cfg: TrainConfig) -> TrainResult:
    """Give an adapted language its own score tensor per layer and tune it directly.

    Each dedicated score starts as the language's assembled score, so the
    masks are unchanged before the first step.
    """
    l = model.language_index(tag)
    if model.lang_head[l] == 0 or not any(l in mod.lang_bias for _, mod in model.bias_modules()):
        raise ValueError(f"language {tag!r} has not been adapted")
    model = copy.deepcopy(model)
    for _, layer in model.artisan_layers():
        with nc.no_grad():
            s = layer.select_scores(l).data.copy()
        layer.dedicated[l] = Tensor(s, requires_grad=True)
        layer.frozen_rows = layer.n_languages
    head_prefix = f"heads.{model.lang_head[l]}."
    lang_prefix = f"lang.{tag}."

    def phase(it):
        return lambda name, group: name.startswith(head_prefix) or name.startswith(lang_prefix)

    return _finetune(model, tag, train, held, replace(cfg, stage="further_mask_ft"), phase)


# backbone reuse ----------------------------------------------------------------


def transplant_backbone(source: EncoderModel, target: EncoderModel) -> None:
    """Copy dense weights and shared biases of ``source`` into ``target`` (same shapes)."""
    src = {n: p for n, p, g in source.named_parameters() if g in ("backbone-W", "biases") and not n.startswith("lang.")}
    for name, p, group in target.named_parameters():
        if name in src and group in ("backbone-W", "biases"):
            if src[name].shape != p.shape:
                raise ValueError(f"{name}: shape {src[name].shape} != {p.shape}")
            p.data = src[name].data.copy()


def single_mask_tune(backbone: EncoderModel, tag: str, vocab, train, held, cfg: TrainConfig, seed: int) -> float:
    """Tune one mask per layer (plus head and biases) on a frozen copy of ``backbone``'s weights."""
    enc = replace(backbone.config, layer_kind="single_mask")
    model = EncoderModel(enc, [tag], vocab, seed=seed)
    transplant_backbone(backbone, model)

    def phase(it):
        return lambda name, group: group in ("specialist-M", "heads", "biases")

    res = _finetune(model, tag, train, held, replace(cfg, stage="further_mask_ft", seed=seed), phase)
    return res.final_cer[tag]


def backbone_reuse_experiment(trained: EncoderModel, targets: dict, cfg: TrainConfig, seed: int = 0) -> list[dict]:
    """Single-mask tuning per target language on a trained and a random backbone.

    ``targets`` maps tag -> (vocab, train, eval).  Returns one row per backbone.
    """
    random_backbone = EncoderModel(replace(trained.config, layer_kind="dense"), ["rand"], trained.heads[0].vocab, seed=seed + 7919)
    rows = []
    for name, backbone in (("trained", trained), ("random", random_backbone)):
        row = {"backbone": name}
        for i, (tag, (vocab, train, held)) in enumerate(targets.items()):
            row[tag] = single_mask_tune(backbone, tag, vocab, train, held, cfg, seed=seed * 100 + i)
        rows.append(row)
    return rows
