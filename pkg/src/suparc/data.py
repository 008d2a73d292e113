"""Utterance datasets: JSONL storage, synthetic generation, batching and collation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DataError

SPLITS = ("train", "valid", "test")
TEXT_MODES = ("tokens", "vectors")
N_TEXT_BANDS = 7


@dataclass(frozen=True)
class DatasetHeader:
    d_v: int
    d_a: int
    text_mode: str = "tokens"
    vocab_size: int = 512
    split: str = "train"
    text_dim: int | None = None

    def __post_init__(self):
        if self.d_v < 1 or self.d_a < 1:
            raise DataError(f"feature widths must be >= 1, got d_v={self.d_v}, d_a={self.d_a}")
        if self.text_mode not in TEXT_MODES:
            raise DataError(f"text_mode must be one of {TEXT_MODES}, got {self.text_mode!r}")
        if self.text_mode == "tokens" and self.vocab_size < 1:
            raise DataError("vocab_size must be >= 1 in token mode")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_dict(self) -> dict:
        out = {
            "d_v": self.d_v,
            "d_a": self.d_a,
            "text_mode": self.text_mode,
            "vocab_size": self.vocab_size,
            "split": self.split,
        }
        if self.text_dim is not None:
            out["text_dim"] = self.text_dim
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetHeader":
        try:
            return cls(
                d_v=int(raw["d_v"]),
                d_a=int(raw["d_a"]),
                text_mode=raw.get("text_mode", "tokens"),
                vocab_size=int(raw.get("vocab_size", 0)),
                split=raw.get("split", "train"),
                text_dim=None if raw.get("text_dim") is None else int(raw["text_dim"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid dataset header: {exc}") from None


@dataclass(eq=False)
class Utterance:
    """One labelled sample.

    ``text`` holds token ids (int array) in token mode, or a precomputed float
    vector in vector mode. ``visual`` and ``audio`` are (length, width) arrays.
    """

    id: str
    y: float
    text: np.ndarray
    visual: np.ndarray
    audio: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.y == other.y
            and self.text.dtype == other.text.dtype
            and np.array_equal(self.text, other.text)
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.audio, other.audio)
        )


@dataclass
class Dataset:
    header: DatasetHeader
    utterances: list[Utterance]
    # latent sentiment per utterance for synthetic data; never persisted
    latent: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.y for u in self.utterances], dtype=np.float64)

    def subset(self, indices) -> "Dataset":
        latent = None if self.latent is None else self.latent[np.asarray(indices, dtype=int)]
        return Dataset(self.header, [self.utterances[i] for i in indices], latent)


def validate_utterance(u: Utterance, header: DatasetHeader) -> None:
    if not np.isfinite(u.y) or not -3.0 <= u.y <= 3.0:
        raise DataError(f"utterance {u.id!r}: y={u.y} outside [-3, 3]")
    for name, seq, width in (("visual", u.visual, header.d_v), ("audio", u.audio, header.d_a)):
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise DataError(f"utterance {u.id!r}: {name} must be a non-empty 2-D sequence")
        if seq.shape[1] != width:
            raise DataError(f"utterance {u.id!r}: {name} width {seq.shape[1]} != header {width}")
        if not np.all(np.isfinite(seq)):
            raise DataError(f"utterance {u.id!r}: non-finite {name} features")
    if u.text.ndim != 1 or u.text.size < 1:
        raise DataError(f"utterance {u.id!r}: text must be a non-empty 1-D array")
    if header.text_mode == "tokens":
        if u.text.min() < 0 or u.text.max() >= header.vocab_size:
            raise DataError(f"utterance {u.id!r}: token id outside [0, {header.vocab_size})")
    elif header.text_dim is not None and u.text.size != header.text_dim:
        raise DataError(f"utterance {u.id!r}: text vector width {u.text.size} != header {header.text_dim}")


def _utterance_from_json(obj: dict, header: DatasetHeader) -> Utterance:
    if not isinstance(obj, dict):
        raise DataError("expected a JSON object")
    missing = {"id", "y", "text", "visual", "audio"} - obj.keys()
    if missing:
        raise DataError(f"missing keys {sorted(missing)}")
    try:
        if header.text_mode == "tokens":
            raw = obj["text"]
            if any(isinstance(t, bool) or not isinstance(t, int) for t in raw):
                raise DataError("token ids must be integers")
            text = np.array(raw, dtype=np.int64)
        else:
            text = np.array(obj["text"], dtype=np.float64)
        u = Utterance(
            id=str(obj["id"]),
            y=float(obj["y"]),
            text=text,
            visual=np.array(obj["visual"], dtype=np.float64),
            audio=np.array(obj["audio"], dtype=np.float64),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(str(exc)) from None
    validate_utterance(u, header)
    return u


def _utterance_to_json(u: Utterance) -> dict:
    return {
        "id": u.id,
        "y": float(u.y),
        "text": u.text.tolist(),
        "visual": u.visual.tolist(),
        "audio": u.audio.tolist(),
    }


def load_jsonl(path, header: DatasetHeader) -> list[Utterance]:
    """Read and validate one utterance per line; errors name the line number."""
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            try:
                out.append(_utterance_from_json(obj, header))
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return out


def save_jsonl(path, utterances: Sequence[Utterance]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u in utterances:
            fh.write(json.dumps(_utterance_to_json(u)))
            fh.write("\n")


def save_dataset(directory, dataset: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split = dataset.header.split
    (directory / f"{split}.header.json").write_text(json.dumps(dataset.header.to_dict(), indent=2) + "\n")
    save_jsonl(directory / f"{split}.jsonl", dataset.utterances)


def load_dataset(directory, split: str) -> Dataset:
    directory = Path(directory)
    header_path = directory / f"{split}.header.json"
    data_path = directory / f"{split}.jsonl"
    if not header_path.exists() or not data_path.exists():
        raise DataError(f"{directory}: missing {header_path.name} or {data_path.name}")
    try:
        raw = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{header_path}: malformed JSON ({exc.msg})") from None
    header = DatasetHeader.from_dict(raw)
    return Dataset(header, load_jsonl(data_path, header))


def load_splits(directory, splits: Sequence[str] = SPLITS) -> dict[str, Dataset]:
    return {s: load_dataset(directory, s) for s in splits}


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings. ``split_sizes`` overrides the 70/15/15 fractions."""

    n_samples: int = 2860
    seed: int = 42
    d_v: int = 35
    d_a: int = 74
    vocab: int = 512
    length_range: tuple[int, int] = (4, 20)
    sigma_text: float = 0.1
    sigma_visual: float = 0.4
    sigma_audio: float = 0.4
    conflict_prob: float = 0.2
    split_sizes: tuple[int, int, int] | None = (2000, 430, 430)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 0.0 <= self.conflict_prob <= 1.0:
            raise ConfigError(f"conflict_prob must be in [0, 1], got {self.conflict_prob}")
        if min(self.sigma_text, self.sigma_visual, self.sigma_audio) < 0:
            raise ConfigError("noise sigmas must be >= 0")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid length_range {self.length_range}")
        if self.vocab < N_TEXT_BANDS:
            raise ConfigError(f"vocab must be >= {N_TEXT_BANDS}")
        if self.split_sizes is not None:
            if len(self.split_sizes) != 3 or min(self.split_sizes) < 0:
                raise ConfigError(f"invalid split_sizes {self.split_sizes}")
            if sum(self.split_sizes) != self.n_samples:
                raise ConfigError(f"split_sizes {self.split_sizes} do not sum to n_samples={self.n_samples}")

    def resolved_split_sizes(self) -> tuple[int, int, int]:
        if self.split_sizes is not None:
            return tuple(self.split_sizes)
        n_valid = int(round(0.15 * self.n_samples))
        n_test = int(round(0.15 * self.n_samples))
        return self.n_samples - n_valid - n_test, n_valid, n_test


def _text_band(score: np.ndarray) -> np.ndarray:
    return (np.clip(np.round(score), -3, 3) + 3).astype(np.int64)


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> dict[str, Dataset]:
    """Draw a deterministic train/valid/test split of synthetic utterances.

    Each sample has a latent score s ~ U[-3, 3]. Visual and audio rows are
    ``(s / 3) * w_m + sigma_m * noise`` along a fixed unit direction per
    modality; text tokens come from the vocabulary band of ``round(s)``
    (jittered by ``sigma_text``). With probability ``conflict_prob`` one
    non-text modality is driven by an independent s' instead and the label
    becomes ``0.7 * s + 0.3 * s'``.
    """
    rng = np.random.default_rng(config.seed)
    directions = {}
    for name, width in (("visual", config.d_v), ("audio", config.d_a)):
        w = rng.standard_normal(width)
        directions[name] = w / np.linalg.norm(w)
    sigmas = {"visual": config.sigma_visual, "audio": config.sigma_audio}
    band_width = config.vocab // N_TEXT_BANDS
    lo, hi = config.length_range

    utterances = []
    latent = np.empty(config.n_samples)
    for k in range(config.n_samples):
        s = rng.uniform(-3.0, 3.0)
        latent[k] = s
        drivers = {"visual": s, "audio": s}
        y = s
        if rng.random() < config.conflict_prob:
            s_other = rng.uniform(-3.0, 3.0)
            drivers["visual" if rng.random() < 0.5 else "audio"] = s_other
            y = 0.7 * s + 0.3 * s_other

        n_tokens = int(rng.integers(lo, hi + 1))
        bands = _text_band(s + config.sigma_text * rng.standard_normal(n_tokens))
        tokens = bands * band_width + rng.integers(0, band_width, size=n_tokens)

        seqs = {}
        for name in ("visual", "audio"):
            length = int(rng.integers(lo, hi + 1))
            w = directions[name]
            noise = rng.standard_normal((length, w.size))
            seqs[name] = (drivers[name] / 3.0) * w[None, :] + sigmas[name] * noise

        utterances.append(
            Utterance(
                id=f"syn-{config.seed}-{k:06d}",
                y=float(np.clip(y, -3.0, 3.0)),
                text=tokens.astype(np.int64),
                visual=seqs["visual"],
                audio=seqs["audio"],
            )
        )

    n_train, n_valid, _ = config.resolved_split_sizes()
    bounds = {"train": (0, n_train), "valid": (n_train, n_train + n_valid), "test": (n_train + n_valid, config.n_samples)}
    out = {}
    for split, (start, stop) in bounds.items():
        header = DatasetHeader(d_v=config.d_v, d_a=config.d_a, text_mode="tokens", vocab_size=config.vocab, split=split)
        out[split] = Dataset(header, utterances[start:stop], latent[start:stop].copy())
    return out


# ----------------------------------------------------------------- batching

def make_batches(dataset, batch_size: int, seed: int, epoch: int) -> list[list[Utterance]]:
    """Shuffle keyed by (seed, epoch) and cut into batches.

    A trailing batch shorter than 2 is dropped: the contrastive objectives
    need at least one pair.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 (contrastive losses need pairs), got {batch_size}")
    utterances = list(dataset)
    order = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(epoch)]).permutation(len(utterances))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        batches.append([utterances[i] for i in idx])
    return batches


def n_batches(n_samples: int, batch_size: int) -> int:
    full, rest = divmod(n_samples, batch_size)
    return full + (1 if rest >= 2 else 0) if n_samples else 0


@dataclass
class Batch:
    """Padded numeric arrays for one batch, ready for the model.

    Token mode: ``text_tokens`` holds the concatenated token ids and
    ``text_pool`` the (n, total_tokens) mean-pooling matrix. Vector mode:
    ``text_vectors`` is (n, text_dim).
    """

    ids: list[str]
    y: np.ndarray
    visual: np.ndarray
    visual_lengths: np.ndarray
    audio: np.ndarray
    audio_lengths: np.ndarray
    text_tokens: np.ndarray | None = None
    text_pool: np.ndarray | None = None
    text_vectors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)


def _pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    width = seqs[0].shape[1]
    out = np.zeros((len(seqs), int(lengths.max()), width))
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


def collate(utterances: Sequence[Utterance], text_mode: str = "tokens") -> Batch:
    if not utterances:
        raise DataError("cannot collate an empty batch")
    visual, visual_lengths = _pad([u.visual for u in utterances])
    audio, audio_lengths = _pad([u.audio for u in utterances])
    batch = Batch(
        ids=[u.id for u in utterances],
        y=np.array([u.y for u in utterances], dtype=np.float64),
        visual=visual,
        visual_lengths=visual_lengths,
        audio=audio,
        audio_lengths=audio_lengths,
    )
    if text_mode == "tokens":
        counts = [u.text.size for u in utterances]
        batch.text_tokens = np.concatenate([u.text for u in utterances]).astype(np.intp)
        pool = np.zeros((len(utterances), int(sum(counts))))
        start = 0
        for i, c in enumerate(counts):
            pool[i, start:start + c] = 1.0 / c
            start += c
        batch.text_pool = pool
    else:
        batch.text_vectors = np.stack([np.asarray(u.text, dtype=np.float64) for u in utterances])
    return batch


def iter_collated(dataset: Dataset, batch_size: int = 256):
    """Sequential (unshuffled) collated chunks for inference."""
    mode = dataset.header.text_mode
    for start in range(0, len(dataset), batch_size):
        yield collate(dataset.utterances[start:start + batch_size], mode)
