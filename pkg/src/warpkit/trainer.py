"""Prompt/verbalizer training against a frozen backbone.

Owns the only trainable tensors in the system: K prompt embeddings plus
either C verbalizer embeddings or a scalar regression head. The loss is
cross-entropy (or MSE) of class scores computed as dot products between
the MLM head feature at the mask position and the head rows. Training
uses Adam without weight decay, a slanted triangular learning rate with
6% warm-up, global gradient-norm clipping at 1.0, and length-bucketed
batches.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from warpkit import autodiff as ad
from warpkit import tasks as tasklib
from warpkit.autodiff import Tensor
from warpkit.lm import FrozenLM, MixedInput, encode_batch, mlm_features_batch
from warpkit.templates import Template, apply_template, parse_template, render_template, truncate


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at step {step}")
        self.step = step


class WarpCheckpointError(Exception):
    """Raised when a prompt checkpoint file is malformed or mismatched."""


# Learning-rate grid used for sweeps and few-shot selection.
LR_GRID = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5)


# ---------------------------------------------------------------------------
# initialization strategies


@dataclass(frozen=True)
class MaskInit:
    """Every prompt and verbalizer row copies the mask token embedding."""


@dataclass(frozen=True)
class StatsRandom:
    """I.i.d. normal rows with per-dimension stats of the embedding matrix."""


@dataclass(frozen=True)
class ManualText:
    """Rows copy the embeddings of hand-picked vocabulary words."""

    prompt_words: tuple[str, ...]
    verbalizer_words: tuple[str, ...]


@dataclass(frozen=True)
class WarmStart:
    """Rows copied from a previously trained prompt checkpoint."""

    path: str


# ---------------------------------------------------------------------------
# trainable parameters


@dataclass
class VerbalizerHead:
    weights: Tensor  # [C, E]


@dataclass
class RegressionHead:
    weight: Tensor  # [E]
    bias: Tensor  # scalar
    clip_range: tuple[float, float]


@dataclass
class WarpParameters:
    prompt: Tensor  # [K, E]
    head: VerbalizerHead | RegressionHead

    @property
    def k(self) -> int:
        return int(self.prompt.shape[0])

    @property
    def e(self) -> int:
        return int(self.prompt.shape[1])

    @property
    def c(self) -> int:
        if isinstance(self.head, VerbalizerHead):
            return int(self.head.weights.shape[0])
        return 1

    @property
    def is_regression(self) -> bool:
        return isinstance(self.head, RegressionHead)

    def trainables(self) -> list[Tensor]:
        if isinstance(self.head, VerbalizerHead):
            return [self.prompt, self.head.weights]
        return [self.prompt, self.head.weight, self.head.bias]

    def zero_grads(self) -> None:
        for t in self.trainables():
            t.zero_grad()

    def clone(self) -> "WarpParameters":
        if isinstance(self.head, VerbalizerHead):
            head = VerbalizerHead(self.head.weights.copy())
        else:
            head = RegressionHead(self.head.weight.copy(), self.head.bias.copy(),
                                  self.head.clip_range)
        return WarpParameters(self.prompt.copy(), head)

    def astype(self, dtype) -> "WarpParameters":
        if isinstance(self.head, VerbalizerHead):
            head = VerbalizerHead(self.head.weights.astype(dtype))
        else:
            head = RegressionHead(self.head.weight.astype(dtype),
                                  self.head.bias.astype(dtype), self.head.clip_range)
        return WarpParameters(self.prompt.astype(dtype), head)


def init_params(strategy, model: FrozenLM, k: int, c: int, *, vocab=None,
                rng=None, regression: bool = False,
                clip_range: tuple[float, float] = (1.0, 5.0)) -> WarpParameters:
    """Build trainable parameters per the chosen initialization recipe."""
    if k < 0 or c < 1:
        raise ValueError("need k >= 0 and c >= 1")
    we = model["word_embeddings"].data
    E = model.config.embed_dim
    dtype = we.dtype

    if isinstance(strategy, WarmStart):
        loaded = load_warp(strategy.path)
        params = loaded.params
        if params.e != E:
            raise ValueError(
                f"warm-start embedding size {params.e} != model embedding size {E}")
        if params.k != k or params.c != c or params.is_regression != regression:
            raise ValueError(
                f"warm-start shape (K={params.k}, C={params.c}) does not match "
                f"requested (K={k}, C={c})")
        return params.astype(dtype)

    if isinstance(strategy, MaskInit) or strategy is None:
        mask_row = we[model.config.mask_id]
        prompt_rows = np.tile(mask_row, (k, 1))
        head_rows = np.tile(mask_row, (c, 1))
    elif isinstance(strategy, StatsRandom):
        if rng is None:
            rng = np.random.default_rng(0)
        mu = we.mean(axis=0)
        sigma = we.std(axis=0)
        prompt_rows = rng.normal(mu, sigma, size=(k, E))
        head_rows = rng.normal(mu, sigma, size=(c, E))
    elif isinstance(strategy, ManualText):
        if vocab is None:
            raise ValueError("manual-text initialization needs a vocabulary")
        if len(strategy.prompt_words) != k:
            raise ValueError(
                f"manual init has {len(strategy.prompt_words)} prompt words, template needs {k}")
        n_head = 1 if regression else c
        if len(strategy.verbalizer_words) != n_head:
            raise ValueError(
                f"manual init has {len(strategy.verbalizer_words)} verbalizer words, "
                f"task needs {n_head}")
        prompt_rows = np.stack(
            [we[vocab.lookup(w)] for w in strategy.prompt_words]
        ) if k else np.zeros((0, E), dtype=dtype)
        head_rows = np.stack([we[vocab.lookup(w)] for w in strategy.verbalizer_words])
    else:
        raise ValueError(f"unknown initialization strategy {strategy!r}")

    prompt = Tensor(np.asarray(prompt_rows, dtype=dtype).reshape(k, E), requires_grad=True)
    if regression:
        head = RegressionHead(
            weight=Tensor(np.asarray(head_rows[0], dtype=dtype), requires_grad=True),
            bias=Tensor(np.asarray(0.0, dtype=dtype), requires_grad=True),
            clip_range=clip_range,
        )
    else:
        head = VerbalizerHead(Tensor(np.asarray(head_rows, dtype=dtype).reshape(c, E),
                                     requires_grad=True))
    return WarpParameters(prompt, head)


def class_logits(features: Tensor, head) -> Tensor:
    """Class scores as dot products with head rows (no bias), or the
    regression output weight . features + bias (unclipped)."""
    single = features.data.ndim == 1
    f = ad.reshape(features, (1, features.shape[-1])) if single else features
    if isinstance(head, VerbalizerHead):
        logits = ad.matmul(f, ad.transpose(head.weights, (1, 0)))
        return ad.reshape(logits, (logits.shape[-1],)) if single else logits
    scores = ad.matmul(f, ad.reshape(head.weight, (head.weight.shape[0], 1)))
    scores = ad.add(ad.reshape(scores, (scores.shape[0],)), head.bias)
    return ad.reshape(scores, ()) if single else scores


# ---------------------------------------------------------------------------
# optimizer and schedule


def stlr(step: int, total_steps: int, warmup_frac: float = 0.06,
         lr_max: float = 1e-3) -> float:
    """Slanted triangular schedule: linear warm-up then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = max(1, math.ceil(warmup_frac * total_steps))
    if step <= warm:
        return lr_max * step / warm
    return lr_max * (total_steps - step) / (total_steps - warm)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data, dtype=np.float64) for p in params],
            v=[np.zeros_like(p.data, dtype=np.float64) for p in params],
        )


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Standard Adam with bias correction and no weight decay, in place."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g.astype(np.float64) ** 2)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    epochs: int = 20
    warmup_frac: float = 0.06
    max_tokens_per_batch: int = 1024
    max_examples_per_batch: int = 8
    grad_clip_norm: float = 1.0
    padding_noise: float = 0.1
    seed: int = 0
    init: object = None
    early_stopping: bool = True
    validation_metric: str | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float | None
    lr: float


def batch_loss(model: FrozenLM, template: Template, vocab, params: WarpParameters,
               batch) -> Tensor:
    """Mean loss of one batch through the frozen encoder."""
    inputs = []
    for ex in batch:
        inp = apply_template(template, vocab, ex.s1, ex.s2, prompt=params.prompt)
        inputs.append(truncate(inp, model.config.max_positions))
    hidden = encode_batch(model, inputs)
    feats = mlm_features_batch(model, hidden, [inp.mask_position for inp in inputs])
    out = class_logits(feats, params.head)
    if params.is_regression:
        return ad.mse(out, [float(ex.label) for ex in batch])
    return ad.cross_entropy(out, [int(ex.label) for ex in batch])


def training_step(model: FrozenLM, batch, params: WarpParameters, opt_state: AdamState,
                  lr: float, config: TrainConfig, template: Template, vocab,
                  step: int = 0) -> float:
    """One optimization step; frozen parameters are untouched."""
    if not batch:
        raise ValueError("training_step got an empty batch")
    params.zero_grads()
    loss = batch_loss(model, template, vocab, params, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(step, value)
    loss.backward()
    trainables = params.trainables()
    ad.global_norm_clip(trainables, config.grad_clip_norm)
    adam_step(trainables, [t.grad for t in trainables], opt_state, lr,
              config.adam_beta1, config.adam_beta2, config.adam_eps)
    return value


@dataclass
class Prediction:
    index: int | None
    score: float | None
    probs: np.ndarray | None

    @property
    def value(self):
        return self.score if self.index is None else self.index


def predict_batch(model: FrozenLM, params: WarpParameters, template: Template,
                  vocab, examples, chunk: int = 32) -> list[Prediction]:
    """Inference path: argmax classification (ties pick the lowest class
    index) or clipped regression scores."""
    out: list[Prediction] = []
    with ad.no_grad():
        for start in range(0, len(examples), chunk):
            part = examples[start: start + chunk]
            inputs = []
            for ex in part:
                inp = apply_template(template, vocab, ex.s1, ex.s2, prompt=params.prompt)
                inputs.append(truncate(inp, model.config.max_positions))
            hidden = encode_batch(model, inputs)
            feats = mlm_features_batch(model, hidden,
                                       [inp.mask_position for inp in inputs])
            scores = class_logits(feats, params.head)
            if params.is_regression:
                lo, hi = params.head.clip_range
                for s in np.asarray(scores.data).reshape(-1):
                    out.append(Prediction(index=None,
                                          score=float(np.clip(s, lo, hi)), probs=None))
            else:
                probs = ad.softmax(scores).data
                for row in probs:
                    out.append(Prediction(index=int(np.argmax(row)), score=None,
                                          probs=row.copy()))
    return out


def predict(model: FrozenLM, params: WarpParameters, template: Template, vocab,
            example) -> Prediction:
    return predict_batch(model, params, template, vocab, [example])[0]


def evaluate(model: FrozenLM, params: WarpParameters, template: Template, vocab,
             dataset, metric: str) -> float:
    preds = predict_batch(model, params, template, vocab, dataset.examples)
    values = [p.value for p in preds]
    golds = [ex.label for ex in dataset.examples]
    return tasklib.compute_metric(metric, values, golds)


def train(model: FrozenLM, task, train_ds, dev_ds, config: TrainConfig,
          template: Template | None = None, vocab=None,
          validation_fn=None) -> tuple[WarpParameters, list[EpochRecord]]:
    """Full optimization recipe with per-epoch validation.

    With early stopping the checkpoint with the best validation metric is
    returned; otherwise the last checkpoint. validation_fn overrides the
    dev evaluation (test harness hook).
    """
    if len(train_ds) == 0:
        raise ValueError("training dataset is empty")
    if template is None:
        template = parse_template(task.template)
    metric = config.validation_metric or task.metric
    direction = tasklib.metric_direction(metric)
    strategy = config.init if config.init is not None else task.init
    rng = np.random.default_rng([config.seed, 17])
    params = init_params(
        strategy, model, template.k, task.num_classes, vocab=vocab, rng=rng,
        regression=task.is_regression,
        clip_range=task.regression_range or (1.0, 5.0),
    )
    history: list[EpochRecord] = []
    if config.epochs == 0:
        return params, history
    has_dev = dev_ds is not None and len(dev_ds) > 0
    if config.early_stopping and not has_dev and validation_fn is None:
        raise ValueError("early stopping needs a nonempty validation set")
    plans = [
        tasklib.bucket_batches(
            train_ds, config.max_tokens_per_batch, config.max_examples_per_batch,
            config.padding_noise, seed=[config.seed, 29, epoch])
        for epoch in range(config.epochs)
    ]
    total_steps = sum(len(plan) for plan in plans)
    opt_state = AdamState.for_params(params.trainables())
    best: tuple[float, WarpParameters] | None = None
    step = 0
    lr = 0.0
    for epoch, plan in enumerate(plans):
        losses = []
        for batch in plan:
            step += 1
            lr = stlr(step, total_steps, config.warmup_frac, config.lr_max)
            losses.append(training_step(model, batch, params, opt_state, lr,
                                        config, template, vocab, step=step))
        if validation_fn is not None:
            dev_metric = validation_fn(model, params, template, epoch)
        elif has_dev:
            dev_metric = evaluate(model, params, template, vocab, dev_ds, metric)
        else:
            dev_metric = None
        history.append(EpochRecord(epoch, float(np.mean(losses)), dev_metric, lr))
        if config.early_stopping and dev_metric is not None:
            if best is None or direction * dev_metric > direction * best[0]:
                best = (dev_metric, params.clone())
    if config.early_stopping and best is not None:
        return best[1], history
    return params, history


# ---------------------------------------------------------------------------
# frozen-feature linear baseline


def pooled_features(model: FrozenLM, vocab, examples, chunk: int = 32) -> np.ndarray:
    """Mean of non-special last-layer hidden states per example."""
    cfg = model.config
    special_ids = {cfg.cls_id, cfg.sep_id, cfg.mask_id, cfg.pad_id}
    feats = np.zeros((len(examples), cfg.embed_dim), dtype=model.dtype)
    with ad.no_grad():
        for start in range(0, len(examples), chunk):
            part = examples[start: start + chunk]
            inputs = []
            for ex in part:
                ids = [cfg.cls_id, *map(int, ex.s1), cfg.sep_id]
                owners = ["special"] + ["s1"] * len(ex.s1) + ["special"]
                if ex.s2 is not None:
                    ids += [*map(int, ex.s2), cfg.sep_id]
                    owners += ["s2"] * len(ex.s2) + ["special"]
                inp = MixedInput(token_ids=np.asarray(ids, dtype=np.int64), owners=owners)
                inputs.append(truncate(inp, cfg.max_positions))
            hidden = encode_batch(model, inputs)
            B, T, _ = hidden.shape
            weights = np.zeros((B, T), dtype=model.dtype)
            for b, inp in enumerate(inputs):
                keep = [t for t, tok in enumerate(inp.token_ids)
                        if int(tok) not in special_ids]
                if not keep:
                    keep = list(range(inp.length))
                weights[b, keep] = 1.0 / len(keep)
            pooled = ad.pool_rows(hidden, weights)
            feats[start: start + len(part)] = pooled.data
    return feats


def fit_linear_head(features: np.ndarray, labels, n_classes: int,
                    config: TrainConfig) -> Tensor:
    """Train a C-way linear layer over fixed features with the same recipe."""
    n = features.shape[0]
    weight = Tensor(np.zeros((n_classes, features.shape[1]), dtype=features.dtype),
                    requires_grad=True)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([config.seed, 43])
    batch_size = config.max_examples_per_batch
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total_steps = config.epochs * steps_per_epoch
    state = AdamState.for_params([weight])
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            step += 1
            lr = stlr(step, total_steps, config.warmup_frac, config.lr_max)
            weight.zero_grad()
            logits = ad.matmul(Tensor(features[idx]), ad.transpose(weight, (1, 0)))
            loss = ad.cross_entropy(logits, labels[idx])
            loss.backward()
            ad.global_norm_clip([weight], config.grad_clip_norm)
            adam_step([weight], [weight.grad], state, lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
    return weight


def linear_probe_baseline(model: FrozenLM, task, train_ds, dev_ds,
                          config: TrainConfig, vocab) -> tuple[Tensor, float]:
    """Frozen mean-pooled features plus a trained linear classifier."""
    if task.is_regression:
        raise ValueError("the linear probe baseline is defined for classification")
    train_feats = pooled_features(model, vocab, train_ds.examples)
    labels = [ex.label for ex in train_ds.examples]
    weight = fit_linear_head(train_feats, labels, task.num_classes, config)
    dev_feats = pooled_features(model, vocab, dev_ds.examples)
    preds = (dev_feats @ weight.data.T).argmax(axis=1)
    metric = tasklib.compute_metric(task.metric, preds.tolist(),
                                    [ex.label for ex in dev_ds.examples])
    return weight, metric


# ---------------------------------------------------------------------------
# prompt checkpoints


_WARP_MAGIC = b"WARP"
_WARP_VERSION = 1
_HEAD_VERBALIZER = 0
_HEAD_REGRESSION = 1


@dataclass
class LoadedWarp:
    params: WarpParameters
    template: Template
    task_name: str


def save_warp(path, params: WarpParameters, template: Template, task_name: str) -> None:
    """Little-endian prompt checkpoint; byte-identical round trips."""
    spec = render_template(template).encode("utf-8")
    name = task_name.encode("utf-8")
    head_kind = _HEAD_REGRESSION if params.is_regression else _HEAD_VERBALIZER
    with open(path, "wb") as f:
        f.write(_WARP_MAGIC)
        f.write(struct.pack("<5I", _WARP_VERSION, params.e, params.k, params.c, head_kind))
        f.write(struct.pack("<I", len(spec)))
        f.write(spec)
        f.write(struct.pack("<I", len(name)))
        f.write(name)
        f.write(np.ascontiguousarray(params.prompt.data.astype(np.float32)).tobytes())
        if isinstance(params.head, VerbalizerHead):
            f.write(np.ascontiguousarray(params.head.weights.data.astype(np.float32)).tobytes())
        else:
            f.write(np.ascontiguousarray(params.head.weight.data.astype(np.float32)).tobytes())
            f.write(np.float32(params.head.bias.data).tobytes())
            f.write(np.asarray(params.head.clip_range, dtype=np.float32).tobytes())


def load_warp(path) -> LoadedWarp:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise WarpCheckpointError(f"truncated checkpoint: needed {n} bytes at {off}")
        chunk = blob[off: off + n]
        off += n
        return chunk

    if take(4) != _WARP_MAGIC:
        raise WarpCheckpointError("bad magic number; not a prompt checkpoint")
    version, e, k, c, head_kind = struct.unpack("<5I", take(20))
    if version != _WARP_VERSION:
        raise WarpCheckpointError(f"unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack("<I", take(4))
    template = parse_template(take(spec_len).decode("utf-8"))
    (name_len,) = struct.unpack("<I", take(4))
    task_name = take(name_len).decode("utf-8")
    if template.k != k:
        raise WarpCheckpointError(
            f"template has {template.k} prompt slots but header says K={k}")
    prompt = np.frombuffer(take(4 * k * e), dtype="<f4").reshape(k, e)
    params_prompt = Tensor(np.ascontiguousarray(prompt), requires_grad=True)
    if head_kind == _HEAD_VERBALIZER:
        rows = np.frombuffer(take(4 * c * e), dtype="<f4").reshape(c, e)
        head = VerbalizerHead(Tensor(np.ascontiguousarray(rows), requires_grad=True))
    elif head_kind == _HEAD_REGRESSION:
        weight = np.frombuffer(take(4 * e), dtype="<f4")
        bias = np.frombuffer(take(4), dtype="<f4")[0]
        lo, hi = np.frombuffer(take(8), dtype="<f4")
        head = RegressionHead(
            weight=Tensor(np.ascontiguousarray(weight), requires_grad=True),
            bias=Tensor(np.asarray(bias, dtype=np.float32), requires_grad=True),
            clip_range=(float(lo), float(hi)),
        )
    else:
        raise WarpCheckpointError(f"unknown head kind {head_kind}")
    if off != len(blob):
        raise WarpCheckpointError(f"{len(blob) - off} trailing bytes after tensors")
    return LoadedWarp(WarpParameters(params_prompt, head), template, task_name)
