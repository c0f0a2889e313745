"""A miniature masked language model with a frozen-backbone interface.

Word embeddings, a post-LN transformer encoder, and an MLM head whose
vocabulary decoder is the transposed embedding matrix. Inputs may mix
ordinary vocabulary tokens with directly supplied trainable embedding
rows, so gradients can flow to inserted prompt vectors while every model
weight stays frozen. There is no dropout anywhere, which makes forward
passes deterministic by construction.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from warpkit import autodiff as ad
from warpkit.autodiff import Tensor


class CheckpointFormatError(Exception):
    """Raised when a checkpoint file is malformed or mismatched."""


class PretrainDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"masked-LM pretraining diverged (NaN loss) at step {step}")
        self.step = step


_MAGIC = b"WLMC"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    ffn_dim: int
    max_positions: int
    cls_id: int = 1
    sep_id: int = 2
    mask_id: int = 3
    pad_id: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        specials = (self.cls_id, self.sep_id, self.mask_id, self.pad_id)
        if len(set(specials)) != 4:
            raise ValueError("special token ids must be distinct")
        if max(specials) >= self.vocab_size or min(specials) < 0:
            raise ValueError("special token ids must be < vocab_size")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def header_fields(self) -> tuple[int, ...]:
        return (
            self.vocab_size, self.embed_dim, self.num_layers, self.num_heads,
            self.ffn_dim, self.max_positions,
            self.cls_id, self.sep_id, self.mask_id, self.pad_id,
        )

    @classmethod
    def from_header_fields(cls, fields) -> "LMConfig":
        return cls(*fields)


# Default desk-scale configuration: trains in seconds, large enough to
# separate prompt-tuned runs from the prompt-free configuration.
TINY_CONFIG = LMConfig(
    vocab_size=256, embed_dim=32, num_layers=2, num_heads=4,
    ffn_dim=64, max_positions=64,
)


def _param_spec(config: LMConfig) -> list[tuple[str, tuple[int, ...]]]:
    E, F, V, P = config.embed_dim, config.ffn_dim, config.vocab_size, config.max_positions
    spec = [
        ("word_embeddings", (V, E)),
        ("position_embeddings", (P, E)),
        ("emb_ln_gamma", (E,)),
        ("emb_ln_beta", (E,)),
    ]
    for i in range(config.num_layers):
        spec += [
            (f"layer{i}_q_w", (E, E)), (f"layer{i}_q_b", (E,)),
            (f"layer{i}_k_w", (E, E)), (f"layer{i}_k_b", (E,)),
            (f"layer{i}_v_w", (E, E)), (f"layer{i}_v_b", (E,)),
            (f"layer{i}_o_w", (E, E)), (f"layer{i}_o_b", (E,)),
            (f"layer{i}_attn_ln_gamma", (E,)), (f"layer{i}_attn_ln_beta", (E,)),
            (f"layer{i}_ffn_w1", (E, F)), (f"layer{i}_ffn_b1", (F,)),
            (f"layer{i}_ffn_w2", (F, E)), (f"layer{i}_ffn_b2", (E,)),
            (f"layer{i}_ffn_ln_gamma", (E,)), (f"layer{i}_ffn_ln_beta", (E,)),
        ]
    spec += [
        ("head_dense_w", (E, E)), ("head_dense_b", (E,)),
        ("head_ln_gamma", (E,)), ("head_ln_beta", (E,)),
    ]
    return spec


class FrozenLM:
    """The pretrained backbone: immutable during prompt training.

    identity_mlm_head is a test hook that bypasses the feature head so
    mlm_features returns raw hidden states; it is never serialized.
    """

    def __init__(self, config: LMConfig, params: dict[str, Tensor],
                 identity_mlm_head: bool = False):
        expected = _param_spec(config)
        if [n for n, _ in expected] != list(params.keys()):
            raise ValueError("parameter names do not match the declared layout")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ValueError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.identity_mlm_head = identity_mlm_head

    @classmethod
    def random_init(cls, config: LMConfig, seed: int = 0, dtype=np.float32,
                    init_scale: float = 0.02) -> "FrozenLM":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in _param_spec(config):
            if name.endswith("_gamma"):
                data = np.ones(shape)
            elif name.endswith(("_b", "_beta", "_b1", "_b2")):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, init_scale, size=shape)
            params[name] = Tensor(data.astype(dtype))
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    @property
    def dtype(self):
        return self.params["word_embeddings"].dtype

    def astype(self, dtype) -> "FrozenLM":
        cast = {n: Tensor(p.data.astype(dtype)) for n, p in self.params.items()}
        return FrozenLM(self.config, cast, self.identity_mlm_head)

    def fingerprint(self) -> str:
        """Cryptographic hash over every parameter array."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


@dataclass
class MixedInput:
    """One assembled input sequence: token slots plus trainable slots.

    token_ids holds the vocabulary id per position (pad_id at trainable
    slots, whose embeddings come from the prompt tensor). owners tags
    each position with its template origin so truncation knows which
    positions belong to which sentence.
    """

    token_ids: np.ndarray
    prompt_slots: list[tuple[int, int]] = field(default_factory=list)
    mask_position: int | None = None
    owners: list[str] = field(default_factory=list)
    prompt: Tensor | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.owners and len(self.owners) != len(self.token_ids):
            raise ValueError("owners must parallel token_ids")

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])


def _assemble(model: FrozenLM, inputs: list[MixedInput]) -> tuple[Tensor, np.ndarray, int]:
    """Pad a batch and build the [B, T, E] input embedding tensor."""
    B = len(inputs)
    lens = np.array([inp.length for inp in inputs], dtype=np.int64)
    T = int(lens.max())
    pad = model.config.pad_id
    ids = np.full((B, T), pad, dtype=np.int64)
    for b, inp in enumerate(inputs):
        ids[b, : inp.length] = inp.token_ids
    prompts = [inp.prompt for inp in inputs]
    we = model["word_embeddings"]
    needs_graph = ad.grad_enabled() and (
        we.requires_grad or any(p is not None and p.requires_grad for p in prompts)
    )
    if needs_graph:
        distinct = {id(p) for p in prompts if p is not None}
        if len(distinct) > 1:
            raise ValueError("a training batch must share a single prompt tensor")
        shared = next((p for p in prompts if p is not None), None)
        placements = [
            (b, pos, row)
            for b, inp in enumerate(inputs)
            for pos, row in inp.prompt_slots
        ]
        x = ad.mixed_embed(we, ids, shared, placements)
    else:
        data = we.data[ids]
        for b, inp in enumerate(inputs):
            if inp.prompt is not None:
                for pos, row in inp.prompt_slots:
                    data[b, pos] = inp.prompt.data[row].astype(data.dtype)
        x = Tensor(data)
    return x, lens, T


def _attention_mask(lens: np.ndarray, T: int, num_heads: int, dtype) -> Tensor:
    # additive mask: -1e9 on key positions beyond each sequence's length
    B = lens.shape[0]
    key_valid = np.arange(T)[None, :] < lens[:, None]
    mask = np.where(key_valid, 0.0, -1e9).astype(dtype)
    full = np.broadcast_to(mask[:, None, None, :], (B, num_heads, T, T))
    return Tensor(np.ascontiguousarray(full))


def _self_attention(model: FrozenLM, i: int, x: Tensor, mask: Tensor) -> Tensor:
    cfg = model.config
    B, T, E = x.shape
    H, D = cfg.num_heads, cfg.head_dim

    def proj(kind: str) -> Tensor:
        h = ad.add(ad.matmul(x, model[f"layer{i}_{kind}_w"]), model[f"layer{i}_{kind}_b"])
        h = ad.reshape(h, (B, T, H, D))
        return ad.transpose(h, (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(D))
    probs = ad.softmax(ad.add(scores, mask))
    ctx = ad.matmul(probs, v)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, E))
    out = ad.add(ad.matmul(merged, model[f"layer{i}_o_w"]), model[f"layer{i}_o_b"])
    return ad.layer_norm(ad.add(x, out),
                         model[f"layer{i}_attn_ln_gamma"], model[f"layer{i}_attn_ln_beta"])


def _ffn(model: FrozenLM, i: int, x: Tensor) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, model[f"layer{i}_ffn_w1"]), model[f"layer{i}_ffn_b1"]))
    h = ad.add(ad.matmul(h, model[f"layer{i}_ffn_w2"]), model[f"layer{i}_ffn_b2"])
    return ad.layer_norm(ad.add(x, h),
                         model[f"layer{i}_ffn_ln_gamma"], model[f"layer{i}_ffn_ln_beta"])


def encode_batch(model: FrozenLM, inputs: list[MixedInput]) -> Tensor:
    """Hidden states [B, T, E] for a padded batch of mixed inputs."""
    if not inputs:
        raise ValueError("encode_batch needs at least one input")
    cfg = model.config
    for inp in inputs:
        if inp.length > cfg.max_positions:
            raise ValueError(
                f"input length {inp.length} exceeds max_positions {cfg.max_positions}; "
                "truncate first")
    x, lens, T = _assemble(model, inputs)
    pos_ids = np.arange(T, dtype=np.int64)[None, :]
    pos = ad.reshape(ad.mixed_embed(model["position_embeddings"], pos_ids, None, []),
                     (T, cfg.embed_dim))
    x = ad.layer_norm(ad.add(x, pos), model["emb_ln_gamma"], model["emb_ln_beta"])
    if cfg.num_layers > 0:
        mask = _attention_mask(lens, T, cfg.num_heads, x.dtype)
        for i in range(cfg.num_layers):
            x = _self_attention(model, i, x, mask)
            x = _ffn(model, i, x)
    return x


def encode(model: FrozenLM, inp: MixedInput) -> Tensor:
    """Hidden states [len, E] for a single mixed input."""
    hidden = encode_batch(model, [inp])
    return ad.reshape(hidden, hidden.shape[1:])


def mlm_features_batch(model: FrozenLM, hidden: Tensor, positions) -> Tensor:
    """MLM head feature vectors at the given (one per row) positions."""
    B, T, _ = hidden.shape
    pairs = [(b, int(p)) for b, p in enumerate(positions)]
    for _, p in pairs:
        if not 0 <= p < T:
            raise IndexError(f"feature position {p} out of range [0, {T})")
    rows = ad.gather_bt(hidden, pairs)
    if model.identity_mlm_head:
        return rows
    h = ad.gelu(ad.add(ad.matmul(rows, model["head_dense_w"]), model["head_dense_b"]))
    return ad.layer_norm(h, model["head_ln_gamma"], model["head_ln_beta"])


def mlm_features(model: FrozenLM, hidden: Tensor, position: int) -> Tensor:
    """Feature vector f(x) at one position of [len, E] hidden states."""
    if hidden.data.ndim != 2:
        raise ValueError("mlm_features expects [len, E] hidden states")
    batched = ad.reshape(hidden, (1,) + hidden.shape)
    feats = mlm_features_batch(model, batched, [position])
    return ad.reshape(feats, (feats.shape[-1],))


def vocab_logits(model: FrozenLM, features: Tensor) -> Tensor:
    """Tied-decoder logits: features times the transposed embedding matrix."""
    return ad.matmul(features, ad.transpose(model["word_embeddings"], (1, 0)))


@dataclass
class PretrainReport:
    steps: int
    final_loss: float | None
    holdout_accuracy: float
    chance: float


def _prepare_sequences(corpus, config: LMConfig) -> list[np.ndarray]:
    seqs = []
    body = config.max_positions - 2
    for tokens in corpus:
        ids = np.asarray(tokens, dtype=np.int64)[:body]
        if ids.size == 0:
            continue
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise ValueError("corpus token id out of vocabulary range")
        seqs.append(np.concatenate(([config.cls_id], ids, [config.sep_id])))
    return seqs


def _maskable(seq: np.ndarray, config: LMConfig) -> np.ndarray:
    specials = (config.cls_id, config.sep_id, config.pad_id, config.mask_id)
    return np.where(~np.isin(seq, specials))[0]


def _mask_sequence(seq: np.ndarray, config: LMConfig, mask_prob: float, rng):
    candidates = _maskable(seq, config)
    if candidates.size == 0:
        return None
    chosen = candidates[rng.random(candidates.size) < mask_prob]
    if chosen.size == 0:
        chosen = np.array([rng.choice(candidates)])
    masked = seq.copy()
    masked[chosen] = config.mask_id
    return masked, chosen, seq[chosen]


def _masked_batch_loss(model: FrozenLM, batch, config: LMConfig, mask_prob: float, rng):
    inputs, pairs, targets = [], [], []
    for seq in batch:
        out = _mask_sequence(seq, config, mask_prob, rng)
        if out is None:
            continue
        masked, positions, originals = out
        b = len(inputs)
        inputs.append(MixedInput(token_ids=masked))
        pairs.extend((b, int(p)) for p in positions)
        targets.extend(int(t) for t in originals)
    hidden = encode_batch(model, inputs)
    feats = ad.gather_bt(hidden, pairs)
    if not model.identity_mlm_head:
        feats = ad.layer_norm(
            ad.gelu(ad.add(ad.matmul(feats, model["head_dense_w"]), model["head_dense_b"])),
            model["head_ln_gamma"], model["head_ln_beta"])
    logits = vocab_logits(model, feats)
    return ad.cross_entropy(logits, targets), len(targets)


def masked_token_accuracy(model: FrozenLM, sequences, mask_prob: float, seed: int) -> float:
    """Accuracy of tied-decoder argmax on freshly masked positions."""
    rng = np.random.default_rng(seed)
    correct = total = 0
    with ad.no_grad():
        for seq in sequences:
            out = _mask_sequence(seq, model.config, mask_prob, rng)
            if out is None:
                continue
            masked, positions, originals = out
            hidden = encode_batch(model, [MixedInput(token_ids=masked)])
            # evaluate every masked position of this sequence in one pass
            feats = ad.gather_bt(hidden, [(0, int(p)) for p in positions])
            if not model.identity_mlm_head:
                feats = ad.layer_norm(
                    ad.gelu(ad.add(ad.matmul(feats, model["head_dense_w"]),
                                   model["head_dense_b"])),
                    model["head_ln_gamma"], model["head_ln_beta"])
            preds = vocab_logits(model, feats).data.argmax(axis=-1)
            correct += int((preds == originals).sum())
            total += len(originals)
    return correct / total if total else 0.0


def pretrain_toy(corpus, config: LMConfig, mask_prob: float = 0.15, steps: int = 1500,
                 seed: int = 0, batch_size: int = 16, lr: float = 1e-3,
                 holdout_frac: float = 0.1) -> tuple[FrozenLM, PretrainReport]:
    """Train all LM parameters with masked-token prediction, then freeze.

    The held-out slice is the tail of the corpus; its masked-token
    accuracy goes into the returned report.
    """
    if not (0.0 < mask_prob < 1.0):
        raise ValueError("mask_prob must be in (0, 1)")
    sequences = _prepare_sequences(corpus, config)
    if not sequences:
        raise ValueError("corpus is empty")
    n_holdout = max(1, int(round(len(sequences) * holdout_frac))) if len(sequences) > 1 else 0
    train_seqs = sequences[: len(sequences) - n_holdout] or sequences
    holdout_seqs = sequences[len(sequences) - n_holdout:] if n_holdout else sequences

    model = FrozenLM.random_init(config, seed=seed)
    final_loss = None
    if steps > 0:
        from warpkit.trainer import AdamState, adam_step

        model.set_trainable(True)
        params = model.parameters()
        state = AdamState.for_params(params)
        rng = np.random.default_rng([seed, 1])
        for step in range(steps):
            idx = rng.integers(0, len(train_seqs), size=min(batch_size, len(train_seqs)))
            batch = [train_seqs[i] for i in idx]
            for p in params:
                p.zero_grad()
            loss, _ = _masked_batch_loss(model, batch, config, mask_prob, rng)
            if not np.isfinite(loss.item()):
                raise PretrainDivergedError(step)
            loss.backward()
            ad.global_norm_clip(params, 1.0)
            adam_step(params, [p.grad for p in params], state, lr)
            final_loss = loss.item()
    model.set_trainable(False)
    accuracy = masked_token_accuracy(model, holdout_seqs, mask_prob, seed=seed + 1)
    report = PretrainReport(
        steps=steps, final_loss=final_loss,
        holdout_accuracy=accuracy, chance=1.0 / config.vocab_size,
    )
    return model, report


def save_checkpoint(model: FrozenLM, path) -> None:
    """Write the little-endian binary checkpoint (float32 arrays)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _FORMAT_VERSION))
        f.write(struct.pack("<10I", *model.config.header_fields()))
        for name, p in model.params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            arr = np.ascontiguousarray(p.data.astype(np.float32))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> FrozenLM:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(f"truncated checkpoint: needed {n} bytes at {off}")
        chunk = blob[off: off + n]
        off += n
        return chunk

    if take(4) != _MAGIC:
        raise CheckpointFormatError("bad magic number; not an LM checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != _FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    fields = struct.unpack("<10I", take(40))
    try:
        config = LMConfig.from_header_fields(fields)
    except ValueError as e:
        raise CheckpointFormatError(f"invalid config header: {e}") from e
    params: dict[str, Tensor] = {}
    for name, shape in _param_spec(config):
        (name_len,) = struct.unpack("<I", take(4))
        read_name = take(name_len).decode("utf-8")
        if read_name != name:
            raise CheckpointFormatError(f"expected array {name!r}, found {read_name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if dims != shape:
            raise CheckpointFormatError(f"array {name} has shape {dims}, expected {shape}")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        params[name] = Tensor(np.ascontiguousarray(data))
    if off != len(blob):
        raise CheckpointFormatError(f"{len(blob) - off} trailing bytes after arrays")
    return FrozenLM(config, params)
