import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modasr.ctc import min_frames
from modasr.datagen import (
    DataConfig,
    build_world,
    family_overlap_means,
    low_resource_pack,
    read_corpus,
    read_manifest,
    sample_corpus,
    train_eval_split,
    vocabulary_overlap,
    write_corpus,
)


def test_world_counts():
    w = build_world(2, 4, seed=7)
    assert len(w.languages) == 8
    assert len({s.family for s in w.languages}) == 2


def test_world_is_deterministic():
    a, b = build_world(2, 4, seed=7), build_world(2, 4, seed=7)
    for x, y in zip(a.languages, b.languages):
        assert x.vocab == y.vocab and np.array_equal(x.prototypes, y.prototypes)


def test_seeds_change_perturbations():
    protos = [build_world(2, 4, seed=s).languages[0].prototypes for s in range(10)]
    for i in range(10):
        for j in range(i + 1, 10):
            assert not np.array_equal(protos[i], protos[j])


def test_family_structure():
    w = build_world(2, 4, seed=1)
    within, cross = family_overlap_means(w.languages)
    assert within > cross == 0.0
    a, b = w.languages[0], w.languages[1]
    assert len(set(a.shared) & set(b.shared)) >= 1
    assert vocabulary_overlap(a, a) == 1.0


def test_utterances_are_feasible():
    w = build_world(2, 4, seed=2)
    for spec in w.languages:
        for u in sample_corpus(spec, 30, seed=5):
            assert u.n_frames >= len(u.transcript)
            assert u.n_frames >= min_frames(u.transcript)
            assert all(a != b for a, b in zip(u.transcript, u.transcript[1:]))


def test_noise_free_frames_repeat_exactly():
    spec = build_world(1, 1, seed=0).languages[0]
    frames = {tuple(f) for u in sample_corpus(spec, 20, seed=3, noise=0.0) for f in u.features}
    # every distinct frame is exactly one of the prototypes
    assert frames <= {tuple(p) for p in spec.prototypes}


def test_nearest_prototype_is_perfect_without_noise():
    w = build_world(2, 4, seed=4)
    for spec in w.languages:
        utts = sample_corpus(spec, 10, seed=1, noise=0.0)
        for u in utts:
            d = ((u.features[:, None, :] - spec.prototypes[None]) ** 2).sum(-1)
            decoded = [spec.vocab[i] for i in d.argmin(1)]
            collapsed = [s for k, s in enumerate(decoded) if k == 0 or s != decoded[k - 1]]
            assert tuple(collapsed) == u.transcript


def test_train_and_eval_differ():
    w = build_world(2, 2, seed=0)
    train, held = train_eval_split(w, "f0l0", 20, 20)
    train_frames = {u.features.tobytes() for u in train}
    assert not any(u.features.tobytes() in train_frames for u in held)


def test_low_resource_pack():
    w = build_world(2, 4, seed=0)
    specs, corpora = low_resource_pack(w, seed=0)
    related, fresh = specs
    fam = w.families[related.family]
    assert len(set(related.shared) & set(fam.symbols)) / len(related.vocab) >= 0.6
    assert not set(fresh.vocab) & set(w.vocab)
    assert len(corpora[related.tag][0]) == round(w.config.train_utts / 6)
    assert not set(related.vocab[len(related.shared):]) & set(w.vocab)


def test_config_validation():
    with pytest.raises(ValueError):
        DataConfig(perturbation=0.5)
    with pytest.raises(ValueError):
        DataConfig(frames_min=3, frames_max=2)
    with pytest.raises(ValueError):
        DataConfig(unique_source="other")


def test_corpus_round_trip(tmp_path):
    w = build_world(1, 2, seed=3)
    spec = w.languages[1]
    utts = sample_corpus(spec, 7, seed=9)
    manifest, binary = write_corpus(tmp_path / "x_train", utts, spec, 9, "train")
    meta, back = read_corpus(tmp_path / "x_train")
    assert meta["language"] == spec.tag and int(meta["utterances"]) == 7
    assert read_manifest(manifest)["split"] == "train"
    for a, b in zip(utts, back):
        assert a.transcript == b.transcript and np.array_equal(a.features, b.features)
    first = binary.read_bytes()
    write_corpus(tmp_path / "x_train", utts, spec, 9, "train")
    assert binary.read_bytes() == first


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_sampling_is_seed_deterministic(seed, repeats):
    spec = build_world(1, 1, seed=5).languages[0]
    a = sample_corpus(spec, 3, seed, allow_repeats=repeats)
    b = sample_corpus(spec, 3, seed, allow_repeats=repeats)
    assert all(x.transcript == y.transcript and np.array_equal(x.features, y.features) for x, y in zip(a, b))


def test_near_duplicate_preset():
    from modasr.datagen import near_duplicate_world

    w, corpora = near_duplicate_world(seed=0, train_sizes=(40, 10, 5))
    assert len({s.vocab for s in w.languages}) == 1
    assert [len(corpora[s.tag][0]) for s in w.languages] == [40, 10, 5]
    a, b = w.languages[0].prototypes, w.languages[1].prototypes
    fam = w.families[0].prototypes
    closest = np.linalg.norm(fam[:, None] - fam[None], axis=-1)[np.triu_indices(len(fam), 1)].min()
    # two dialects move each prototype by at most 5% of the closest pair distance
    assert np.linalg.norm(a - b, axis=1).max() <= 0.1 * closest + 1e-12
    with pytest.raises(ValueError):
        near_duplicate_world(train_sizes=())


def test_shared_sounds_reuse_one_bank_under_disjoint_symbols():
    w = build_world(2, 4, seed=3, config=DataConfig(shared_sounds=True))
    f0, f1 = w.families
    assert np.array_equal(f0.prototypes, f1.prototypes)
    assert not set(f0.symbols) & set(f1.symbols)
    apart = build_world(2, 4, seed=3, config=DataConfig(shared_sounds=False))
    assert not np.array_equal(apart.families[0].prototypes, apart.families[1].prototypes)
