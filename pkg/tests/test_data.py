import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from suparc.data import (
    Dataset,
    DatasetHeader,
    SyntheticConfig,
    Utterance,
    collate,
    generate_synthetic,
    load_dataset,
    load_jsonl,
    make_batches,
    n_batches,
    save_dataset,
)
from suparc.exceptions import ConfigError, DataError

HEADER = DatasetHeader(d_v=2, d_a=3, text_mode="tokens", vocab_size=10)


def record(i, y=0.5):
    return {"id": f"u{i}", "y": y, "text": [1, 2, 3], "visual": [[0.1, 0.2]], "audio": [[0.1, 0.2, 0.3], [0.0, 0.0, 1.0]]}


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_load_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_jsonl(tmp_path / "e.jsonl", HEADER) == []


def test_load_one_line(tmp_path):
    write_lines(tmp_path / "one.jsonl", [record(0)])
    [u] = load_jsonl(tmp_path / "one.jsonl", HEADER)
    assert u.id == "u0" and u.visual.shape == (1, 2) and u.text.dtype == np.int64


def test_out_of_range_label_names_line(tmp_path):
    records = [record(i) for i in range(6)] + [record(6, y=3.5)]
    write_lines(tmp_path / "bad.jsonl", records)
    with pytest.raises(DataError, match=r"line 7\b"):
        load_jsonl(tmp_path / "bad.jsonl", HEADER)


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(visual=[[0.1, 0.2, 0.3]]),
    lambda r: r.update(text=[1, 99]),
    lambda r: r.pop("audio"),
    lambda r: r.update(audio=[]),
    lambda r: r.update(text=[1.5]),
])
def test_schema_violations(tmp_path, mutate):
    r = record(0)
    mutate(r)
    write_lines(tmp_path / "bad.jsonl", [r])
    with pytest.raises(DataError, match="line 1"):
        load_jsonl(tmp_path / "bad.jsonl", HEADER)


def test_malformed_json(tmp_path):
    (tmp_path / "bad.jsonl").write_text(json.dumps(record(0)) + "\n{not json\n")
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(tmp_path / "bad.jsonl", HEADER)


def test_missing_split_files(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path, "train")


finite = st.floats(-1e6, 1e6, allow_nan=False)


@st.composite
def utterances(draw):
    n = draw(st.integers(1, 4))
    out = []
    for i in range(n):
        lv, la = draw(st.integers(1, 3)), draw(st.integers(1, 3))
        out.append(Utterance(
            id=f"x{i}",
            y=draw(st.floats(-3, 3)),
            text=np.array(draw(st.lists(st.integers(0, 9), min_size=1, max_size=5)), dtype=np.int64),
            visual=np.array(draw(st.lists(finite, min_size=2 * lv, max_size=2 * lv))).reshape(lv, 2),
            audio=np.array(draw(st.lists(finite, min_size=3 * la, max_size=3 * la))).reshape(la, 3),
        ))
    return out


@settings(max_examples=40, deadline=None)
@given(utterances())
def test_round_trip_is_bit_exact(tmp_path_factory, items):
    directory = tmp_path_factory.mktemp("rt")
    dataset = Dataset(HEADER, items)
    save_dataset(directory, dataset)
    back = load_dataset(directory, "train")
    assert back.header == HEADER
    assert back.utterances == items
    for a, b in zip(items, back.utterances):
        assert a.visual.tobytes() == b.visual.tobytes() and a.audio.tobytes() == b.audio.tobytes()


def test_synthetic_round_trip(tmp_path, small_splits):
    save_dataset(tmp_path, small_splits["valid"])
    assert load_dataset(tmp_path, "valid").utterances == small_splits["valid"].utterances


def test_synthetic_deterministic_and_seed_sensitive():
    config = SyntheticConfig(n_samples=60, seed=5, split_sizes=None)
    a, b = generate_synthetic(config), generate_synthetic(config)
    c = generate_synthetic(SyntheticConfig(n_samples=60, seed=6, split_sizes=None))
    for split in ("train", "valid", "test"):
        assert a[split].utterances == b[split].utterances
    assert a["train"].utterances != c["train"].utterances


def test_default_split_sizes():
    sizes = SyntheticConfig().resolved_split_sizes()
    assert sizes == (2000, 430, 430)
    assert SyntheticConfig(n_samples=100, split_sizes=None).resolved_split_sizes() == (70, 15, 15)


def test_no_conflict_labels_equal_latent():
    splits = generate_synthetic(SyntheticConfig(n_samples=200, seed=1, conflict_prob=0.0, split_sizes=None))
    for ds in splits.values():
        assert np.array_equal(ds.labels, ds.latent)


def test_label_mean_and_range():
    splits = generate_synthetic(SyntheticConfig(n_samples=10_000, seed=11, split_sizes=None, length_range=(1, 2)))
    y = np.concatenate([ds.labels for ds in splits.values()])
    assert y.size == 10_000
    assert abs(y.mean()) <= 0.1
    assert y.min() >= -3 and y.max() <= 3


def _ids(batches):
    return [u.id for b in batches for u in b]


def test_batches_cover_each_sample_once(small_splits):
    ds = small_splits["train"].subset(range(64))
    batches = make_batches(ds, 32, seed=0, epoch=1)
    assert [len(b) for b in batches] == [32, 32]
    assert sorted(_ids(batches)) == sorted(u.id for u in ds)


def test_trailing_singleton_dropped(small_splits):
    ds = Dataset(small_splits["train"].header, small_splits["train"].utterances[:65])
    batches = make_batches(ds, 32, seed=0, epoch=1)
    assert [len(b) for b in batches] == [32, 32]
    assert len(set(_ids(batches))) == 64
    assert n_batches(65, 32) == 2 and n_batches(66, 32) == 3


def test_batches_keyed_by_seed_and_epoch(small_splits):
    ds = small_splits["train"]
    assert _ids(make_batches(ds, 8, 3, 2)) == _ids(make_batches(ds, 8, 3, 2))
    assert _ids(make_batches(ds, 8, 3, 2)) != _ids(make_batches(ds, 8, 3, 3))


def test_batch_size_one_rejected(small_splits):
    with pytest.raises(ConfigError, match="pairs"):
        make_batches(small_splits["train"], 1, 0, 1)


def test_collate_pads_and_pools(small_splits):
    items = small_splits["train"].utterances[:3]
    batch = collate(items)
    assert batch.visual.shape[0] == 3
    assert list(batch.visual_lengths) == [u.visual.shape[0] for u in items]
    np.testing.assert_allclose(batch.text_pool.sum(axis=1), 1.0)
    for i, u in enumerate(items):
        assert np.all(batch.visual[i, u.visual.shape[0]:] == 0)
