import math
from dataclasses import replace

import numpy as np
import pytest

from modasr import numcore as nc
from modasr.artisan import keep_count
from modasr.datagen import DataConfig, build_world, low_resource_pack, train_eval_split
from modasr.model import EncoderConfig
from modasr.numcore import Tensor
from modasr.trainer import (
    Adam,
    DivergenceError,
    TrainConfig,
    adapt_low_resource,
    adaptation_trainable_count,
    backbone_reuse_experiment,
    build_model,
    collate,
    further_mask_ft,
    lr_at,
    separate_models,
    train_multilingual,
    update_gate,
    weight_phase,
)

ENC = EncoderConfig(d_model=16, n_blocks=2, n_heads=2, d_ff=32, dropout=0.0)
DATA = DataConfig(train_utts=48, eval_utts=16)


@pytest.fixture(scope="module")
def world():
    return build_world(2, 2, seed=0, config=DATA)


@pytest.fixture(scope="module")
def corpora(world):
    return {s.tag: train_eval_split(world, s.tag) for s in world.languages}


@pytest.fixture(scope="module")
def trained(world, corpora):
    cfg = TrainConfig(iterations=300, eval_interval=300, gamma=50, lr=5e-3)
    return train_multilingual(build_model(ENC, cfg, list(corpora), world.vocab), corpora, cfg)


# schedule -----------------------------------------------------------------------


def test_lr_examples():
    cfg = TrainConfig(iterations=1000, lr=5e-5, alpha=10)
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 300) == 5e-5
    assert lr_at(cfg, 300, "T") == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(cfg, 999) == pytest.approx(5e-5 * 0.05, rel=1e-12)
    assert lr_at(cfg, 50) == pytest.approx(2.5e-5)
    values = [lr_at(cfg, i) for i in range(500, 1000)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_update_gates():
    cfg = TrainConfig(beta=5, gamma=5000, iterations=20000)
    assert [i for i in range(16) if update_gate(cfg, i, "T")] == [0, 5, 10, 15]
    assert weight_phase(cfg, 4999) == "M" and weight_phase(cfg, 5000) == "W"
    assert update_gate(cfg, 4999, "M") and not update_gate(cfg, 4999, "W")
    assert update_gate(cfg, 5000, "W") and not update_gate(cfg, 5000, "M")
    frozen = replace(cfg, weight_update="Freeze")
    assert not any(update_gate(frozen, i, "W") for i in range(0, 20000, 997))
    shared = replace(cfg, baseline="shared_weight")
    assert all(update_gate(shared, i, "W") and not update_gate(shared, i, "M") for i in range(0, 20000, 997))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup=0.5, hold=0.5, decay=0.5)
    with pytest.raises(ValueError):
        TrainConfig(weight_update="Sometimes")
    with pytest.raises(ValueError):
        TrainConfig(beta=0)


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam = Adam()
    adam.step("p", p, np.array([0.3, -40.0]), 0.1)
    assert np.allclose(p.data, [0.9, -1.9])
    first = p.data[0]
    adam.step("p", p, np.array([0.0, 0.0]), 0.1, row_mask=np.array([0.0, 1.0]))
    assert p.data[0] == first


def test_collate_maps_to_head_ids(world, corpora):
    utts = corpora["f0l0"][0][:3]
    x, lengths, targets = collate(utts, world.vocab)
    assert x.shape == (3, max(lengths), 16)
    assert targets[0] == [world.vocab.index(s) for s in utts[0].transcript]
    with pytest.raises(ValueError):
        collate(utts, [999])


# training ---------------------------------------------------------------------


def test_training_reduces_loss(trained):
    losses = [r["loss"] for r in trained.log if r["phase"] != "eval"]
    assert np.mean(losses[-50:]) < losses[0]
    assert trained.mean_final_cer() < trained.mean_initial_cer()
    assert len(trained.t_history) == len(trained.t_history_iters) == 300 // 50 + 1


def test_freeze_keeps_backbone_bit_identical(world, corpora):
    cfg = TrainConfig(iterations=30, eval_interval=30, weight_update="Freeze", gamma=5)
    model = build_model(ENC, cfg, list(corpora), world.vocab)
    before = {n: p.data.copy() for n, p, g in model.named_parameters() if g == "backbone-W"}
    train_multilingual(model, corpora, cfg)
    after = {n: p.data for n, p, g in model.named_parameters() if g == "backbone-W"}
    assert all(np.array_equal(before[n], after[n]) for n in before)


def test_random_updates_touch_a_fixed_subset(world, corpora):
    cfg = TrainConfig(iterations=20, eval_interval=20, weight_update="Random", gamma=1, start_phase="W")
    model = build_model(ENC, cfg, list(corpora), world.vocab)
    w0 = model.blocks[0].ff1.weight.data.copy()
    train_multilingual(model, corpora, cfg)
    changed = np.mean(model.blocks[0].ff1.weight.data != w0)
    assert 0.5 < changed <= keep_count(0.3, w0.size) / w0.size


def test_shared_and_separate_baselines(world, corpora):
    cfg = TrainConfig(iterations=8, eval_interval=8, baseline="shared_weight")
    shared = build_model(ENC, cfg, list(corpora), world.vocab)
    assert not shared.artisan_layers()
    assert shared.param_count("specialist-M") == 0
    sep_cfg = replace(cfg, baseline="separate_weight")
    models = separate_models(ENC, sep_cfg, corpora, world.vocab)
    res = train_multilingual(models, corpora, sep_cfg)
    ids = {id(p) for m in res.models.values() for _, p, _ in m.named_parameters()}
    assert len(ids) == sum(len(list(m.named_parameters())) for m in res.models.values())


def test_divergence_guard(world, corpora):
    cfg = TrainConfig(iterations=4, eval_interval=4)
    model = build_model(ENC, cfg, list(corpora), world.vocab)
    model.heads[0].bias.data[:] = np.nan
    with pytest.raises(DivergenceError, match="iteration 0"):
        with nc.finite_checks(False), np.errstate(invalid="ignore"):
            train_multilingual(model, corpora, cfg)


def test_training_is_deterministic(world, corpora):
    cfg = TrainConfig(iterations=12, eval_interval=6)
    runs = [train_multilingual(build_model(replace(ENC, dropout=0.1), cfg, list(corpora), world.vocab), corpora, cfg) for _ in range(2)]
    assert runs[0].log_csv() == runs[1].log_csv()


# adaptation --------------------------------------------------------------------


@pytest.fixture(scope="module")
def pack(world):
    return low_resource_pack(world, seed=0)


def test_adaptation_keeps_old_outputs_and_counts(trained, pack, corpora, world):
    model = trained.model
    specs, packs = pack
    spec = specs[0]
    train, held = packs[spec.tag]
    x = collate(corpora["f0l0"][1][:4], world.vocab)[0]
    before = {tag: model(x, tag).data.copy() for tag in corpora}
    cfg = TrainConfig(stage="low_resource", iterations=40, eval_interval=40, lr=5e-3)
    res = adapt_low_resource(model, spec.tag, spec.vocab, train, held, cfg)
    for tag in corpora:
        assert np.array_equal(res.model(x, tag).data, before[tag])
    d, K, nb = ENC.d_model, ENC.K, ENC.n_blocks
    n_bias = sum(p.size for n, p, g in model.named_parameters() if g == "biases")
    assert adaptation_trainable_count(res.model, spec.tag) == d * (len(spec.vocab) + 1) + (len(spec.vocab) + 1) + 2 * nb * K + n_bias
    original = {n: p.data for n, p, _ in model.named_parameters()}
    for name, p, _ in res.model.named_parameters():
        if name in original:
            old = original[name]
            # mapping matrices gained a row; every pre-existing row is untouched
            assert np.array_equal(p.data[: old.shape[0]] if name.endswith(".mapping") else p.data, old), name
    with pytest.raises(ValueError):
        adapt_low_resource(res.model, spec.tag, spec.vocab, train, held, cfg)

    ft = further_mask_ft(res.model, spec.tag, train, held, replace(cfg, iterations=5))
    for tag in corpora:
        assert np.array_equal(ft.model(x, tag).data, before[tag])
    with pytest.raises(ValueError):
        further_mask_ft(model, "f0l0", train, held, cfg)


def test_dedicated_scores_start_as_assembled_masks(trained, pack):
    specs, packs = pack
    spec = specs[1]
    train, held = packs[spec.tag]
    cfg = TrainConfig(stage="low_resource", iterations=5, eval_interval=5)
    adapted = adapt_low_resource(trained.model, spec.tag, spec.vocab, train, held, cfg).model
    l = adapted.language_index(spec.tag)
    masks = [layer.mask(l).data.copy() for _, layer in adapted.artisan_layers()]
    ft = further_mask_ft(adapted, spec.tag, train, held, replace(cfg, iterations=1, lr=0.0))
    for (_, layer), m in zip(ft.model.artisan_layers(), masks):
        assert l in layer.dedicated
        assert np.array_equal(layer.mask(l).data, m)


def test_backbone_reuse_table_shape(trained, pack):
    specs, packs = pack
    targets = {s.tag: (s.vocab, *packs[s.tag]) for s in specs}
    cfg = TrainConfig(stage="further_mask_ft", iterations=3, eval_interval=3)
    rows = backbone_reuse_experiment(trained.model, targets, cfg, seed=0)
    assert [r["backbone"] for r in rows] == ["trained", "random"]
    assert all(set(r) == {"backbone", *targets} for r in rows)
    assert rows == backbone_reuse_experiment(trained.model, targets, cfg, seed=0)
    assert all(math.isfinite(v) for r in rows for k, v in r.items() if k != "backbone")


# directional checks at reduced scale, 3 seeds each -------------------------------------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def trained_seeds(world, corpora):
    out = {}
    for seed in SEEDS:
        cfg = TrainConfig(iterations=300, eval_interval=300, gamma=50, lr=5e-3, seed=seed)
        out[seed] = train_multilingual(build_model(ENC, cfg, list(corpora), world.vocab), corpora, cfg)
    return out


def test_loss_falls_for_every_seed(trained_seeds):
    for res in trained_seeds.values():
        losses = [r["loss"] for r in res.log if r["phase"] != "eval"]
        assert np.mean(losses[-50:]) < losses[0]


@pytest.fixture(scope="module")
def adapted_seeds(trained_seeds, pack):
    specs, packs = pack
    spec = specs[0]
    train, held = packs[spec.tag]
    out = {}
    for seed, res in trained_seeds.items():
        cfg = TrainConfig(stage="low_resource", iterations=150, eval_interval=150, lr=5e-3, alpha=1, beta=1, seed=seed)
        adapted = adapt_low_resource(res.model, spec.tag, spec.vocab, train, held, cfg)
        ft = further_mask_ft(adapted.model, spec.tag, train, held, replace(cfg, stage="further_mask_ft", iterations=60))
        out[seed] = (adapted, ft)
    return spec.tag, out


def test_adaptation_beats_random_head(adapted_seeds):
    tag, runs = adapted_seeds
    before = np.mean([a.initial_cer[tag] for a, _ in runs.values()])
    after = np.mean([a.final_cer[tag] for a, _ in runs.values()])
    assert after < before


def test_further_ft_does_not_regress(adapted_seeds):
    tag, runs = adapted_seeds
    before = np.mean([a.final_cer[tag] for a, _ in runs.values()])
    after = np.mean([f.final_cer[tag] for _, f in runs.values()])
    assert after <= before + 0.02


def test_trained_backbone_beats_random(trained_seeds, pack):
    specs, packs = pack
    related = [s for s in specs if not s.tag.endswith("fresh")]
    targets = {s.tag: (s.vocab, *packs[s.tag]) for s in related}
    cfg = TrainConfig(stage="further_mask_ft", iterations=150, eval_interval=150, lr=5e-3)
    rows = [backbone_reuse_experiment(res.model, targets, replace(cfg, seed=seed), seed=seed) for seed, res in trained_seeds.items()]
    for s in related:
        trained = np.mean([r[0][s.tag] for r in rows])
        random = np.mean([r[1][s.tag] for r in rows])
        assert trained < random, (s.tag, trained, random)


@pytest.fixture(scope="module")
def collapse_by_alpha_beta(world, corpora):
    from modasr.analysis import collapse_metrics

    out = {}
    for ab in ((10.0, 5), (1.0, 1)):
        reports = []
        for seed in SEEDS:
            cfg = TrainConfig(iterations=300, eval_interval=300, gamma=50, lr=5e-3, alpha=ab[0], beta=ab[1], seed=seed, t_snapshot_interval=25)
            res = train_multilingual(build_model(ENC, cfg, list(corpora), world.vocab), corpora, cfg)
            reports.append(collapse_metrics(res.t_history, res.t_history_iters))
        out[ab] = reports
    return out


def test_fast_sparse_t_updates_spread_T(collapse_by_alpha_beta):
    final_std = {ab: np.mean([r.std[-1] for r in reps]) for ab, reps in collapse_by_alpha_beta.items()}
    assert final_std[(10.0, 5)] > final_std[(1.0, 1)], final_std


@pytest.mark.xfail(
    strict=True,
    reason="not reproduced: a 10x mapping learning rate updated every 5 iterations flips more selection signs per window than 1x every iteration",
)
def test_slow_frequent_t_updates_switch_less(collapse_by_alpha_beta):
    rates = {ab: np.mean([r.mean_switch_rate for r in reps]) for ab, reps in collapse_by_alpha_beta.items()}
    assert rates[(10.0, 5)] < rates[(1.0, 1)], rates
