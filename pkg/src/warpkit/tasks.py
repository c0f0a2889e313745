"""Task ingestion, synthetic desk-scale tasks, batching, and metrics.

Tasks live in a directory holding task.conf (key = value lines),
vocab.txt (one token per line, line number = id), and {train,dev}.jsonl
records with fields s1, optional s2, and label. Text is whitespace
tokenized against the vocabulary map; unknown words map to [UNK].
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TaskFormatError(ValueError):
    pass


class MetricDegenerateWarning(UserWarning):
    """A metric hit a zero-variance or zero-denominator case and returned 0."""


SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

METRICS = ("accuracy", "f1", "matthews", "pearson", "mse")
CLASSIFICATION_METRICS = ("accuracy", "f1", "matthews")
REGRESSION_METRICS = ("pearson", "mse")

KINDS = ("single_sentence", "sentence_pair", "pair_regression")


class Vocab:
    """Whitespace tokenizer over a fixed token list; ids 0..4 are special."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    pad_id, cls_id, sep_id, mask_id, unk_id = 0, 1, 2, 3, 4

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, self.unk_id) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def lookup(self, token: str) -> int:
        if token not in self.token_to_id:
            raise ValueError(f"unknown token {token!r}")
        return self.token_to_id[token]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


@dataclass
class Example:
    s1_text: str
    s2_text: str | None
    label: object  # class index (int) or regression target (float)
    s1: np.ndarray = field(compare=False, default=None)
    s2: np.ndarray | None = field(compare=False, default=None)


@dataclass
class Dataset:
    examples: list[Example]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


@dataclass
class TaskSpec:
    name: str
    kind: str
    classes: list[str] | None
    regression_range: tuple[float, float] | None
    template: str
    metric: str
    init: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TaskFormatError(f"unknown kind {self.kind!r}")
        if self.metric not in METRICS:
            raise TaskFormatError(f"unknown metric {self.metric!r}")
        if self.is_regression:
            if self.metric not in REGRESSION_METRICS:
                raise TaskFormatError(f"metric {self.metric} invalid for regression")
            if self.regression_range is None:
                raise TaskFormatError("regression task needs a score range")
            if self.regression_range[0] >= self.regression_range[1]:
                raise TaskFormatError("regression range must be (lo, hi) with lo < hi")
        else:
            if self.metric not in CLASSIFICATION_METRICS:
                raise TaskFormatError(f"metric {self.metric} invalid for classification")
            if not self.classes:
                raise TaskFormatError("classification task needs a nonempty class list")
            if self.metric in ("f1", "matthews") and len(self.classes) != 2:
                raise TaskFormatError(f"{self.metric} is defined for 2 classes")

    @property
    def is_regression(self) -> bool:
        return self.kind == "pair_regression"

    @property
    def num_classes(self) -> int:
        return 1 if self.is_regression else len(self.classes)

    @property
    def num_sentences(self) -> int:
        return 1 if self.kind == "single_sentence" else 2

    def label_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise TaskFormatError(f"label {label!r} not in classes {self.classes}") from None


def _parse_init(conf: dict, context: str):
    from warpkit.trainer import ManualText, MaskInit, StatsRandom, WarmStart

    kind = conf.get("init", "mask").strip()
    if kind == "mask":
        return MaskInit()
    if kind == "stats":
        return StatsRandom()
    if kind == "manual":
        prompt_words = tuple(conf.get("init_prompt_words", "").split())
        verbalizer_words = tuple(conf.get("init_verbalizer_words", "").split())
        if not verbalizer_words:
            raise TaskFormatError(f"{context}: manual init needs init_verbalizer_words")
        return ManualText(prompt_words, verbalizer_words)
    if kind == "warmstart":
        path = conf.get("init_checkpoint", "").strip()
        if not path:
            raise TaskFormatError(f"{context}: warmstart init needs init_checkpoint")
        return WarmStart(path)
    raise TaskFormatError(f"{context}: unknown init {kind!r}")


def render_init(strategy) -> dict[str, str]:
    from warpkit.trainer import ManualText, MaskInit, StatsRandom, WarmStart

    if isinstance(strategy, MaskInit) or strategy is None:
        return {"init": "mask"}
    if isinstance(strategy, StatsRandom):
        return {"init": "stats"}
    if isinstance(strategy, ManualText):
        return {
            "init": "manual",
            "init_prompt_words": " ".join(strategy.prompt_words),
            "init_verbalizer_words": " ".join(strategy.verbalizer_words),
        }
    if isinstance(strategy, WarmStart):
        return {"init": "warmstart", "init_checkpoint": strategy.path}
    raise ValueError(f"cannot render init strategy {strategy!r}")


def _read_conf(path: Path) -> dict[str, str]:
    conf = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TaskFormatError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        conf[key.strip()] = value.strip()
    return conf


def load_task(task_dir) -> tuple[TaskSpec, dict[str, Dataset], Vocab]:
    """Load task.conf, vocab.txt, and every {split}.jsonl in the directory."""
    task_dir = Path(task_dir)
    conf_path = task_dir / "task.conf"
    if not conf_path.exists():
        raise TaskFormatError(f"{conf_path}: missing task.conf")
    conf = _read_conf(conf_path)
    for key in ("name", "kind", "template", "metric"):
        if key not in conf:
            raise TaskFormatError(f"{conf_path}: missing key {key!r}")
    kind = conf["kind"]
    classes = conf["classes"].split() if "classes" in conf else None
    rng_range = None
    if kind == "pair_regression":
        if "range" not in conf:
            raise TaskFormatError(f"{conf_path}: regression task needs range = lo hi")
        parts = conf["range"].split()
        if len(parts) != 2:
            raise TaskFormatError(f"{conf_path}: range must be two numbers")
        rng_range = (float(parts[0]), float(parts[1]))
    spec = TaskSpec(
        name=conf["name"], kind=kind, classes=classes,
        regression_range=rng_range, template=conf["template"],
        metric=conf["metric"], init=_parse_init(conf, str(conf_path)),
    )
    vocab_path = task_dir / "vocab.txt"
    if not vocab_path.exists():
        raise TaskFormatError(f"{vocab_path}: missing vocabulary file")
    vocab = Vocab.load(vocab_path)
    splits: dict[str, Dataset] = {}
    for split in ("train", "dev", "test"):
        path = task_dir / f"{split}.jsonl"
        if not path.exists():
            if split == "test":
                continue
            raise TaskFormatError(f"{path}: missing split file")
        splits[split] = _load_jsonl(path, spec, vocab, split)
    return spec, splits, vocab


def _load_jsonl(path: Path, spec: TaskSpec, vocab: Vocab, split: str) -> Dataset:
    examples = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as e:
            raise TaskFormatError(f"{path}:{lineno}: invalid JSON ({e})") from None
        if "s1" not in record:
            raise TaskFormatError(f"{path}:{lineno}: missing field s1")
        s2_text = record.get("s2")
        if spec.num_sentences == 2 and s2_text is None:
            raise TaskFormatError(f"{path}:{lineno}: sentence-pair task missing s2")
        if "label" not in record:
            raise TaskFormatError(f"{path}:{lineno}: missing field label")
        if spec.is_regression:
            label = float(record["label"])
            lo, hi = spec.regression_range
            if not lo <= label <= hi:
                raise TaskFormatError(
                    f"{path}:{lineno}: label {label} outside range [{lo}, {hi}]")
        else:
            try:
                label = spec.label_index(str(record["label"]))
            except TaskFormatError as e:
                raise TaskFormatError(f"{path}:{lineno}: {e}") from None
        examples.append(Example(
            s1_text=record["s1"],
            s2_text=s2_text,
            label=label,
            s1=np.asarray(vocab.encode(record["s1"]), dtype=np.int64),
            s2=(np.asarray(vocab.encode(s2_text), dtype=np.int64)
                if s2_text is not None else None),
        ))
    return Dataset(examples, split=split)


def write_jsonl(path, spec: TaskSpec, dataset: Dataset) -> None:
    lines = []
    for ex in dataset.examples:
        record = {"s1": ex.s1_text}
        if ex.s2_text is not None:
            record["s2"] = ex.s2_text
        record["label"] = ex.label if spec.is_regression else spec.classes[ex.label]
        lines.append(json.dumps(record, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_task_dir(task_dir, spec: TaskSpec, splits: dict[str, Dataset],
                   vocab: Vocab, corpus_texts=None) -> None:
    task_dir = Path(task_dir)
    task_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"name = {spec.name}",
        f"kind = {spec.kind}",
    ]
    if spec.classes is not None:
        lines.append(f"classes = {' '.join(spec.classes)}")
    if spec.regression_range is not None:
        lo, hi = spec.regression_range
        lines.append(f"range = {lo} {hi}")
    lines.append(f"template = {spec.template}")
    lines.append(f"metric = {spec.metric}")
    for key, value in render_init(spec.init).items():
        lines.append(f"{key} = {value}")
    (task_dir / "task.conf").write_text("\n".join(lines) + "\n", encoding="utf-8")
    vocab.save(task_dir / "vocab.txt")
    for split, dataset in splits.items():
        write_jsonl(task_dir / f"{split}.jsonl", spec, dataset)
    if corpus_texts is not None:
        (task_dir / "corpus.txt").write_text(
            "\n".join(corpus_texts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic tasks


_POS_KEYWORDS = ("wonderful", "superb", "delightful", "marvelous", "excellent", "charming")
_NEG_KEYWORDS = ("awful", "dreadful", "terrible", "boring", "dismal", "wretched")
_POS_CONTEXT = ("praise", "cheer", "smiles", "warmth", "applause", "joy")
_NEG_CONTEXT = ("gloom", "yawns", "scorn", "chill", "groans", "tears")
_TOPICS = ("castle", "river", "market", "forest", "harbor", "meadow",
           "temple", "bridge", "tavern", "tower", "garden", "mill")
_COMMON = (
    "the", "a", "an", "it", "was", "is", "and", "of", "very", "quite", "rather",
    "this", "that", "movie", "film", "story", "plot", "scene", "actor", "cast",
    "script", "crowd", "night", "day", "music", "song", "people", "place",
    "thing", "time", "work", "life", "way", "world", "overall", "review",
    "felt", "seemed", "looked", "ended",
)
_PUNCT = ('"', "?", ".", "!", ",", "'")


def build_synthetic_vocab(vocab_size: int = 256) -> Vocab:
    named = list(SPECIAL_TOKENS) + list(_PUNCT) + list(_POS_KEYWORDS) + list(_NEG_KEYWORDS) \
        + list(_POS_CONTEXT) + list(_NEG_CONTEXT) + list(_TOPICS) + list(_COMMON)
    if vocab_size < len(named) + 16:
        raise ValueError(f"vocab_size must be at least {len(named) + 16}")
    fillers = [f"w{i:03d}" for i in range(vocab_size - len(named))]
    return Vocab(named + fillers)


def _filler_pool(vocab: Vocab) -> list[str]:
    generated = [t for t in vocab.tokens if len(t) == 4 and t[0] == "w" and t[1:].isdigit()]
    return list(_COMMON) + generated


# Sentences are built from short chunks with predictable local structure.
# Slot code 0 draws from the class keyword set, slot code 1 from the class
# context set; frames mixing both make keyword and context embeddings of a
# class cluster together during masked-token pretraining.
_CLASS_FRAMES = (
    ("the", "movie", "was", 0),
    ("this", "film", "seemed", 0),
    ("the", "story", "felt", 0),
    ("it", "was", 0, "overall"),
    ("a", 0, "film"),
    ("people", "felt", 1),
    ("full", "of", 1),
    ("the", "crowd", "felt", 1),
    (1, "and", 1),
    (0, "and", 0),
    ("the", "movie", "was", 0, "full", "of", 1),
    ("it", "was", 0, "and", 1),
)
_KW_BEARING = tuple(i for i, f in enumerate(_CLASS_FRAMES) if 0 in f)


def _fill_frame(frame, rng, keywords, context) -> list[str]:
    out = []
    for tok in frame:
        if tok == 0:
            out.append(str(rng.choice(keywords)))
        elif tok == 1:
            out.append(str(rng.choice(context)))
        else:
            out.append(tok)
    return out


_N_FILLER_PAIRS = 24


def _filler_pairs(vocab: Vocab) -> list[tuple[str, str]]:
    # fillers come in fixed bigram pairs, so they are locally predictable
    # noise rather than irreducible entropy for the toy LM
    generated = [t for t in vocab.tokens
                 if len(t) == 4 and t[0] == "w" and t[1:].isdigit()]
    pairs = []
    for i in range(_N_FILLER_PAIRS):
        pairs.append((generated[2 * i], generated[2 * i + 1]))
    return pairs


def _pair_weights() -> np.ndarray:
    weights = 1.0 / (np.arange(_N_FILLER_PAIRS) + 2.0)
    return weights / weights.sum()


@dataclass
class SyntheticTask:
    spec: TaskSpec
    splits: dict[str, Dataset]
    vocab: Vocab
    corpus_texts: list[str]


def _tokenize_examples(examples: list[Example], vocab: Vocab) -> None:
    for ex in examples:
        ex.s1 = np.asarray(vocab.encode(ex.s1_text), dtype=np.int64)
        ex.s2 = (np.asarray(vocab.encode(ex.s2_text), dtype=np.int64)
                 if ex.s2_text is not None else None)


def _filler_chunk(rng, pairs, weights) -> list[str]:
    chunk = []
    for _ in range(int(rng.integers(1, 3))):
        a, b = pairs[int(rng.choice(_N_FILLER_PAIRS, p=weights))]
        chunk += [a, b]
    return chunk


def _keyword_sentence(rng, label: int, vocab: Vocab) -> str:
    keywords = _POS_KEYWORDS if label == 1 else _NEG_KEYWORDS
    context = _POS_CONTEXT if label == 1 else _NEG_CONTEXT
    pairs, weights = _filler_pairs(vocab), _pair_weights()
    # first chunk always carries a keyword so a bag-of-keywords oracle is exact
    chunks = [_fill_frame(_CLASS_FRAMES[rng.choice(_KW_BEARING)], rng, keywords, context)]
    for _ in range(1 + int(rng.integers(0, 3))):
        chunks.append(_fill_frame(_CLASS_FRAMES[rng.integers(len(_CLASS_FRAMES))],
                                  rng, keywords, context))
    for _ in range(int(rng.integers(1, 4))):
        chunks.append(_filler_chunk(rng, pairs, weights))
    order = rng.permutation(len(chunks))
    return " ".join(tok for i in order for tok in chunks[i])


def _keyword_corpus(rng, vocab: Vocab, n_sentences: int) -> list[str]:
    pairs, weights = _filler_pairs(vocab), _pair_weights()
    corpus = []
    for _ in range(n_sentences):
        draw = rng.random()
        if draw < 0.4:
            corpus.append(_keyword_sentence(rng, 1, vocab))
        elif draw < 0.8:
            corpus.append(_keyword_sentence(rng, 0, vocab))
        else:
            chunks = [_filler_chunk(rng, pairs, weights)
                      for _ in range(int(rng.integers(2, 5)))]
            corpus.append(" ".join(tok for c in chunks for tok in c))
    return corpus


def _generate_keyword(rng, vocab: Vocab, n_train: int, n_dev: int,
                      corpus_sentences: int) -> SyntheticTask:
    from warpkit.templates import default_template_spec
    from warpkit.trainer import ManualText

    classes = ["negative", "positive"]

    def make_split(n: int, split: str) -> Dataset:
        examples = []
        for i in range(n):
            label = i % 2
            examples.append(Example(
                s1_text=_keyword_sentence(rng, label, vocab),
                s2_text=None, label=label,
            ))
        _tokenize_examples(examples, vocab)
        return Dataset(examples, split=split)

    spec = TaskSpec(
        name="keyword-sentiment",
        kind="single_sentence",
        classes=classes,
        regression_range=None,
        template=default_template_spec("single_sentence", 2),
        metric="accuracy",
        init=ManualText(
            prompt_words=("overall", "review"),
            verbalizer_words=(_NEG_KEYWORDS[0], _POS_KEYWORDS[0]),
        ),
    )
    splits = {"train": make_split(n_train, "train"), "dev": make_split(n_dev, "dev")}
    corpus = _keyword_corpus(rng, vocab, corpus_sentences)
    return SyntheticTask(spec, splits, vocab, corpus)


def _generate_pairmatch(rng, vocab: Vocab, n_train: int, n_dev: int,
                        corpus_sentences: int) -> SyntheticTask:
    from warpkit.templates import default_template_spec
    from warpkit.trainer import ManualText

    pairs, weights = _filler_pairs(vocab), _pair_weights()
    classes = ["mismatch", "match"]
    topic_frames = (("the", 0, "place"), ("this", 0), ("the", 0))

    def topic_sentence(topic: str) -> str:
        chunks = [_fill_frame(topic_frames[rng.integers(len(topic_frames))], rng, (topic,))]
        for _ in range(int(rng.integers(1, 4))):
            chunks.append(_filler_chunk(rng, pairs, weights))
        order = rng.permutation(len(chunks))
        return " ".join(tok for i in order for tok in chunks[i])

    def make_split(n: int, split: str) -> Dataset:
        examples = []
        for i in range(n):
            label = i % 2
            t1 = str(rng.choice(_TOPICS))
            if label == 1:
                t2 = t1
            else:
                others = [t for t in _TOPICS if t != t1]
                t2 = str(rng.choice(others))
            examples.append(Example(
                s1_text=topic_sentence(t1), s2_text=topic_sentence(t2), label=label,
            ))
        _tokenize_examples(examples, vocab)
        return Dataset(examples, split=split)

    spec = TaskSpec(
        name="pair-topic-match",
        kind="sentence_pair",
        classes=classes,
        regression_range=None,
        template=default_template_spec("sentence_pair", 2),
        metric="accuracy",
        init=ManualText(prompt_words=("this", "that"),
                        verbalizer_words=("w000", "w001")),
    )
    splits = {"train": make_split(n_train, "train"), "dev": make_split(n_dev, "dev")}
    corpus = [topic_sentence(str(rng.choice(_TOPICS))) for _ in range(corpus_sentences)]
    return SyntheticTask(spec, splits, vocab, corpus)


def _generate_pairscore(rng, vocab: Vocab, n_train: int, n_dev: int,
                        corpus_sentences: int) -> SyntheticTask:
    from warpkit.templates import default_template_spec
    from warpkit.trainer import MaskInit

    fillers = _filler_pool(vocab)

    def make_pair() -> tuple[str, str, float]:
        length = int(rng.integers(8, 15))
        s1_words = list(rng.choice(fillers, size=length, replace=False))
        keep = rng.random()
        shared = [w for w in s1_words if rng.random() < keep]
        fresh_pool = [w for w in fillers if w not in s1_words]
        s2_words = shared + list(rng.choice(fresh_pool, size=max(length - len(shared), 1),
                                            replace=False))
        order = rng.permutation(len(s2_words))
        s2_words = [s2_words[i] for i in order]
        a, b = set(s1_words), set(s2_words)
        score = 1.0 + 4.0 * len(a & b) / len(a | b)
        return " ".join(s1_words), " ".join(s2_words), round(score, 4)

    def make_split(n: int, split: str) -> Dataset:
        examples = []
        for _ in range(n):
            s1_text, s2_text, score = make_pair()
            examples.append(Example(s1_text=s1_text, s2_text=s2_text, label=score))
        _tokenize_examples(examples, vocab)
        return Dataset(examples, split=split)

    spec = TaskSpec(
        name="pair-overlap-score",
        kind="pair_regression",
        classes=None,
        regression_range=(1.0, 5.0),
        template=default_template_spec("pair_regression", 2),
        metric="pearson",
        init=MaskInit(),
    )
    splits = {"train": make_split(n_train, "train"), "dev": make_split(n_dev, "dev")}
    corpus = []
    for _ in range(corpus_sentences):
        length = int(rng.integers(6, 16))
        corpus.append(" ".join(rng.choice(fillers, size=length)))
    return SyntheticTask(spec, splits, vocab, corpus)


_GENERATORS = {
    "keyword": _generate_keyword,
    "pairmatch": _generate_pairmatch,
    "pairscore": _generate_pairscore,
}


def generate_synthetic(kind: str, vocab_size: int = 256, n_train: int = 64,
                       n_dev: int = 128, seed: int = 0,
                       corpus_sentences: int = 1200) -> SyntheticTask:
    """Deterministic synthetic task plus a pretraining corpus from the
    same generator, so the toy LM encodes the planted associations."""
    if vocab_size < 64:
        raise ValueError("vocab_size must be at least 64")
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {sorted(_GENERATORS)}")
    rng = np.random.default_rng(seed)
    vocab = build_synthetic_vocab(vocab_size)
    return _GENERATORS[kind](rng, vocab, n_train, n_dev, corpus_sentences)


def keyword_oracle_accuracy(dataset: Dataset, vocab: Vocab) -> float:
    """Bag-of-keywords classifier; proves the keyword task is solvable."""
    pos = {vocab.lookup(w) for w in _POS_KEYWORDS}
    neg = {vocab.lookup(w) for w in _NEG_KEYWORDS}
    correct = 0
    for ex in dataset:
        tokens = set(int(t) for t in ex.s1)
        pred = 1 if tokens & pos else 0 if tokens & neg else 0
        correct += int(pred == ex.label)
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# batching


def example_length(ex: Example) -> int:
    return len(ex.s1) + (len(ex.s2) if ex.s2 is not None else 0)


def bucket_batches(dataset: Dataset, max_tokens: int, max_examples: int,
                   padding_noise: float = 0.1, seed: int = 0) -> list[list[Example]]:
    """Length-bucketed batches under joint token and example caps.

    Examples are sorted by jittered length, packed greedily so that
    batch_size * max_len_in_batch <= max_tokens and the batch holds at
    most max_examples, then the batch order is shuffled.
    """
    if max_examples < 1:
        raise ValueError("max_examples must be at least 1")
    rng = np.random.default_rng(seed)
    lengths = np.array([example_length(ex) for ex in dataset.examples], dtype=np.float64)
    if len(lengths) == 0:
        return []
    if lengths.max() > max_tokens:
        raise ValueError(
            "an example exceeds max_tokens on its own; truncate the dataset first")
    jitter = rng.uniform(-padding_noise, padding_noise, size=len(lengths))
    order = np.argsort(lengths * (1.0 + jitter), kind="stable")
    batches: list[list[Example]] = []
    current: list[Example] = []
    current_max = 0
    for idx in order:
        ex = dataset.examples[int(idx)]
        L = int(lengths[int(idx)])
        new_max = max(current_max, L)
        if current and (len(current) + 1 > max_examples
                        or (len(current) + 1) * new_max > max_tokens):
            batches.append(current)
            current, current_max = [], 0
            new_max = L
        current.append(ex)
        current_max = new_max
    if current:
        batches.append(current)
    perm = rng.permutation(len(batches))
    return [batches[int(i)] for i in perm]


# ---------------------------------------------------------------------------
# metrics


def _binary_confusion(predictions, golds) -> tuple[int, int, int, int]:
    tp = fp = fn = tn = 0
    for p, g in zip(predictions, golds):
        if p not in (0, 1) or g not in (0, 1):
            raise ValueError("binary metric got a non-binary label")
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def _degenerate(name: str) -> float:
    warnings.warn(f"{name} undefined on this input; reporting 0",
                  MetricDegenerateWarning, stacklevel=3)
    return 0.0


def compute_metric(metric: str, predictions, golds) -> float:
    """Standard metric definitions; degenerate cases return flagged 0."""
    predictions = list(predictions)
    golds = list(golds)
    if not predictions or len(predictions) != len(golds):
        raise ValueError("predictions and golds must be nonempty and equal length")
    if metric == "accuracy":
        return float(np.mean([p == g for p, g in zip(predictions, golds)]))
    if metric == "f1":
        tp, fp, fn, _ = _binary_confusion(predictions, golds)
        denom = 2 * tp + fp + fn
        if denom == 0:
            return _degenerate("f1")
        return 2.0 * tp / denom
    if metric == "matthews":
        tp, fp, fn, tn = _binary_confusion(predictions, golds)
        denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if denom == 0:
            return _degenerate("matthews")
        return float((tp * tn - fp * fn) / np.sqrt(denom))
    if metric == "pearson":
        x = np.asarray(predictions, dtype=np.float64)
        y = np.asarray(golds, dtype=np.float64)
        xc, yc = x - x.mean(), y - y.mean()
        denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
        if denom == 0:
            return _degenerate("pearson")
        return float((xc * yc).sum() / denom)
    if metric == "mse":
        x = np.asarray(predictions, dtype=np.float64)
        y = np.asarray(golds, dtype=np.float64)
        return float(((x - y) ** 2).mean())
    raise ValueError(f"unknown metric {metric!r}")


def metric_direction(metric: str) -> int:
    """+1 when larger is better, -1 for error metrics."""
    return -1 if metric == "mse" else 1
