"""Fusion network: modality encoders, fusion MLP, predictor and masked fusions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, DatasetHeader
from .exceptions import ContractError, DataError, DimensionError

MODALITIES = ("t", "v", "a")
CHECKPOINT_FORMAT_VERSION = 1

# variant tag -> masked modalities
VARIANTS = {
    "full": (),
    "mask-t": ("t",),
    "mask-v": ("v",),
    "mask-a": ("a",),
    "mask-tv": ("t", "v"),
    "mask-ta": ("t", "a"),
    "mask-va": ("v", "a"),
}


@dataclass(frozen=True)
class EncoderConfig:
    """Layer widths. ``hidden`` is per recurrent direction."""

    text_vocab: int = 512
    text_embed_dim: int = 32
    visual_in: int = 35
    audio_in: int = 74
    hidden: int = 32
    rep_dim: int = 32
    text_mode: str = "tokens"
    text_in: int | None = None

    def __post_init__(self):
        widths = {
            "text_vocab": self.text_vocab,
            "text_embed_dim": self.text_embed_dim,
            "visual_in": self.visual_in,
            "audio_in": self.audio_in,
            "hidden": self.hidden,
            "rep_dim": self.rep_dim,
        }
        for name, value in widths.items():
            if int(value) < 1:
                raise ContractError(f"{name} must be >= 1, got {value}")
        if self.text_mode not in ("tokens", "vectors"):
            raise ContractError(f"unknown text_mode {self.text_mode!r}")

    @property
    def text_input_width(self) -> int:
        if self.text_mode == "tokens":
            return self.text_embed_dim
        return self.text_in if self.text_in is not None else self.rep_dim

    @classmethod
    def from_header(cls, header: DatasetHeader, **overrides) -> "EncoderConfig":
        base = dict(
            text_vocab=max(header.vocab_size, 1),
            visual_in=header.d_v,
            audio_in=header.d_a,
            text_mode=header.text_mode,
            text_in=header.text_dim,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def _parse_mask(mask) -> tuple[str, ...]:
    if mask is None:
        return ()
    if isinstance(mask, str):
        mask = tuple(mask)
    out = tuple(m for m in MODALITIES if m in set(mask))
    unknown = set(mask) - set(MODALITIES)
    if unknown:
        raise ContractError(f"unknown modalities in mask: {sorted(unknown)}")
    if len(out) == 3:
        raise ContractError("masking all three modalities leaves no information")
    return out


def _param_specs(config: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(path, shape, init rule) in a fixed order; the order fixes the RNG stream."""
    R, H = config.rep_dim, config.hidden
    specs = []
    if config.text_mode == "tokens":
        specs.append(("text.embedding", (config.text_vocab, config.text_embed_dim), "glorot"))
    specs += [
        ("text.layer0.weight", (config.text_input_width, R), "glorot"),
        ("text.layer0.bias", (R,), "zero"),
        ("text.layer1.weight", (R, R), "glorot"),
        ("text.layer1.bias", (R,), "zero"),
    ]
    for name, width in (("visual", config.visual_in), ("audio", config.audio_in)):
        for direction in ("fwd", "bwd"):
            specs += [
                (f"{name}.{direction}.w_ih", (width, 4 * H), "glorot"),
                (f"{name}.{direction}.w_hh", (H, 4 * H), "recurrent"),
                (f"{name}.{direction}.bias", (4 * H,), "lstm_bias"),
            ]
        specs += [
            (f"{name}.proj.weight", (2 * H, R), "glorot"),
            (f"{name}.proj.bias", (R,), "zero"),
        ]
    specs += [
        ("fusion.layer0.weight", (3 * R, R), "glorot"),
        ("fusion.layer0.bias", (R,), "zero"),
        ("fusion.layer1.weight", (R, R), "glorot"),
        ("fusion.layer1.bias", (R,), "zero"),
        ("predictor.layer0.weight", (R, R), "glorot"),
        ("predictor.layer0.bias", (R,), "zero"),
        ("predictor.layer1.weight", (R, 1), "glorot"),
        ("predictor.layer1.bias", (1,), "zero"),
    ]
    return specs


def _init_array(rng: np.random.Generator, shape, rule: str) -> np.ndarray:
    if rule == "zero":
        return np.zeros(shape)
    if rule == "lstm_bias":
        # gate order i, f, g, o; forget gate starts open
        out = np.zeros(shape)
        hidden = shape[0] // 4
        out[hidden:2 * hidden] = 1.0
        return out
    if rule == "glorot":
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)
    if rule == "recurrent":
        bound = 1.0 / np.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(rule)


class FusionModel:
    """All learnable tensors plus the forward computations that use them.

    Every forward method takes and returns batched tensors: one row per
    utterance.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        expected = [path for path, _, _ in _param_specs(config)]
        if list(params) != expected:
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ContractError(f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        self.config = config
        self.params = params

    # ------------------------------------------------------------ plumbing
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.values = np.array(state[k], dtype=np.float64)
            p.zero_grad()

    def copy(self) -> "FusionModel":
        return FusionModel(self.config, {k: Tensor(v.values, requires_grad=True, name=k) for k, v in self.params.items()})

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.params[f"{prefix}.weight"]), self.params[f"{prefix}.bias"])

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(ad.tanh(self._linear(x, f"{prefix}.layer0")), f"{prefix}.layer1")

    # ------------------------------------------------------------ encoders
    def encode_text(self, batch: Batch) -> Tensor:
        """Mean-pooled token embeddings (or given vectors) through a 2-layer MLP."""
        if self.config.text_mode == "tokens":
            if batch.text_tokens is None:
                raise DataError("batch has no token ids but the model expects tokens")
            tokens = batch.text_tokens
            if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.text_vocab):
                raise DataError(f"token id outside [0, {self.config.text_vocab})")
            embedded = ad.take_rows(self.params["text.embedding"], tokens)
            pooled = ad.matmul(Tensor(batch.text_pool), embedded)
        else:
            if batch.text_vectors is None:
                raise DataError("batch has no text vectors but the model expects vectors")
            if batch.text_vectors.shape[1] != self.config.text_input_width:
                raise DataError(
                    f"text vector width {batch.text_vectors.shape[1]} != {self.config.text_input_width}"
                )
            pooled = Tensor(batch.text_vectors)
        return self._mlp(pooled, "text")

    def _lstm_direction(self, prefix: str, seqs: np.ndarray, lengths: np.ndarray, reverse: bool) -> Tensor:
        w_ih = self.params[f"{prefix}.w_ih"]
        w_hh = self.params[f"{prefix}.w_hh"]
        bias = self.params[f"{prefix}.bias"]
        n, steps, _ = seqs.shape
        H = self.config.hidden
        h = Tensor(np.zeros((n, H)))
        c = Tensor(np.zeros((n, H)))
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            active = t < lengths
            if not active.any():
                continue
            gates = ad.add_bias(ad.matmul(Tensor(seqs[:, t, :]), w_ih) + ad.matmul(h, w_hh), bias)
            sig = ad.sigmoid(gates)
            i_gate, f_gate, o_gate = sig[:, :H], sig[:, H:2 * H], sig[:, 3 * H:]
            candidate = ad.tanh(gates[:, 2 * H:3 * H])
            c_new = f_gate * c + i_gate * candidate
            h_new = o_gate * ad.tanh(c_new)
            if active.all():
                h, c = h_new, c_new
            else:
                keep = np.repeat(active[:, None], H, axis=1).astype(np.float64)
                h = h_new * keep + h * (1.0 - keep)
                c = c_new * keep + c * (1.0 - keep)
        return h

    def encode_recurrent(self, modality: str, seqs: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        """One-layer BiLSTM; final states of both directions projected to rep_dim.

        ``seqs`` is (n, max_len, width), zero-padded past each ``lengths[i]``.
        """
        name = {"v": "visual", "a": "audio", "visual": "visual", "audio": "audio"}.get(modality)
        if name is None:
            raise ContractError(f"encode_recurrent handles visual or audio, got {modality!r}")
        seqs = np.asarray(seqs, dtype=np.float64)
        if seqs.ndim == 2:
            seqs = seqs[None]
        width = self.config.visual_in if name == "visual" else self.config.audio_in
        if seqs.ndim != 3 or seqs.shape[2] != width:
            raise DataError(f"{name} features have shape {seqs.shape}, expected (n, length, {width})")
        if lengths is None:
            lengths = np.full(seqs.shape[0], seqs.shape[1])
        lengths = np.asarray(lengths)
        if lengths.min() < 1:
            raise DataError(f"{name} sequences must have length >= 1")
        forward = self._lstm_direction(f"{name}.fwd", seqs, lengths, reverse=False)
        backward = self._lstm_direction(f"{name}.bwd", seqs, lengths, reverse=True)
        return self._linear(ad.concat([forward, backward], axis=1), f"{name}.proj")

    # -------------------------------------------------------------- fusion
    def fuse(self, h_t: Tensor, h_v: Tensor, h_a: Tensor) -> Tensor:
        R = self.config.rep_dim
        for name, h in (("h_t", h_t), ("h_v", h_v), ("h_a", h_a)):
            if h.ndim != 2 or h.shape[1] != R:
                raise ContractError(f"{name} has shape {h.shape}, expected (n, {R})")
        return self._mlp(ad.concat([h_t, h_v, h_a], axis=1), "fusion")

    def masked_fuse(self, h_t: Tensor, h_v: Tensor, h_a: Tensor, mask=()) -> Tensor:
        """Fusion after replacing the masked modality representations by zeros."""
        masked = _parse_mask(mask)
        reps = {"t": h_t, "v": h_v, "a": h_a}
        for m in masked:
            reps[m] = Tensor(np.zeros(reps[m].shape))
        return self.fuse(reps["t"], reps["v"], reps["a"])

    def predict(self, h: Tensor) -> Tensor:
        """Sentiment score in (-3, 3) for each fusion row."""
        if h.ndim != 2 or h.shape[1] != self.config.rep_dim:
            raise DimensionError(f"fusion vector shape {h.shape}, expected (n, {self.config.rep_dim})")
        out = ad.scale(ad.tanh(self._mlp(h, "predictor")), 3.0)
        return ad.reshape(out, (h.shape[0],))

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        h_t = self.encode_text(batch)
        h_v = self.encode_recurrent("visual", batch.visual, batch.visual_lengths)
        h_a = self.encode_recurrent("audio", batch.audio, batch.audio_lengths)
        return h_t, h_v, h_a

    def forward(self, batch: Batch, with_masks: bool = False) -> dict:
        """Full pass. With ``with_masks`` also returns the six masked fusions.

        Keys: ``h_t``, ``h_v``, ``h_a``, ``h``, ``y_hat`` and, when requested,
        ``singles`` (modality -> one-masked fusion) and ``doubles``
        (frozenset of two modalities -> two-masked fusion).
        """
        h_t, h_v, h_a = self.encode(batch)
        h = self.fuse(h_t, h_v, h_a)
        out = {"h_t": h_t, "h_v": h_v, "h_a": h_a, "h": h, "y_hat": self.predict(h)}
        if with_masks:
            out["singles"] = {m: self.masked_fuse(h_t, h_v, h_a, (m,)) for m in MODALITIES}
            out["doubles"] = {
                frozenset(pair): self.masked_fuse(h_t, h_v, h_a, pair)
                for pair in (("t", "v"), ("t", "a"), ("v", "a"))
            }
        return out

    def fusion_variant(self, batch: Batch, variant: str) -> Tensor:
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        h_t, h_v, h_a = self.encode(batch)
        return self.masked_fuse(h_t, h_v, h_a, VARIANTS[variant])


def init_params(config: EncoderConfig, seed: int) -> FusionModel:
    """Deterministic initialisation from a 64-bit seed.

    Linear and input-to-hidden weights: uniform in +-sqrt(6 / (fan_in + fan_out)).
    Hidden-to-hidden weights: uniform in +-1/sqrt(hidden). Biases zero except
    the LSTM forget gate (1.0).
    """
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    params = {}
    for path, shape, rule in _param_specs(config):
        params[path] = Tensor(_init_array(rng, shape, rule), requires_grad=True, name=path)
    return FusionModel(config, params)


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: FusionModel, metadata: dict | None = None) -> None:
    """JSON checkpoint: header plus parameter path -> shape + row-major values."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder_config": asdict(model.config),
        "metadata": metadata or {},
        "params": {
            name: {"shape": list(p.shape), "values": p.values.reshape(-1).tolist()}
            for name, p in model.named_parameters()
        },
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> FusionModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format_version {version!r}")
    config = EncoderConfig.from_dict(doc["encoder_config"])
    params = {}
    for name, shape, _ in _param_specs(config):
        entry = doc["params"].get(name)
        if entry is None:
            raise DataError(f"{path}: missing parameter {name}")
        values = np.array(entry["values"], dtype=np.float64)
        if list(entry["shape"]) != list(shape) or values.size != int(np.prod(shape)):
            raise DataError(f"{path}: parameter {name} has shape {entry['shape']}, expected {list(shape)}")
        params[name] = Tensor(values.reshape(shape), requires_grad=True, name=name)
    return FusionModel(config, params)
