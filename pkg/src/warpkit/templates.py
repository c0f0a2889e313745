"""Input templates: where prompts, sentences, the mask, and specials go.

A template is written in a one-line DSL, e.g.

    [CLS] " {s1} " ? [MASK] . " {s2} " ! [SEP]

`[P_i]` marks trainable prompt slot i, `{s1}`/`{s2}` are sentence slots,
and any other run of non-space characters is literal text tokenized with
the task vocabulary when the template is applied.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from warpkit.autodiff import Tensor
from warpkit.lm import MixedInput


class TemplateParseError(ValueError):
    def __init__(self, message: str, column: int):
        super().__init__(f"column {column}: {message}")
        self.column = column


@dataclass(frozen=True)
class SpecialToken:
    which: str  # "CLS" or "SEP"


@dataclass(frozen=True)
class SentenceSlot:
    index: int  # 1 or 2


@dataclass(frozen=True)
class PromptSlot:
    index: int  # 1-based


@dataclass(frozen=True)
class MaskSlot:
    pass


@dataclass(frozen=True)
class LiteralText:
    text: str


@dataclass(frozen=True)
class Template:
    elements: tuple
    k: int
    num_sentences: int


_BRACKET = re.compile(r"\[([A-Z_0-9]+)\]")
_SENTENCE = re.compile(r"\{s([12])\}")
_PROMPT = re.compile(r"P_([0-9]+)$")


def parse_template(spec: str) -> Template:
    """Parse the DSL into a validated Template.

    Rejects duplicate [MASK], missing [MASK], duplicate sentence slots,
    and prompt indices that are not exactly 1..K.
    """
    elements = []
    i, n = 0, len(spec)
    while i < n:
        ch = spec[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "[":
            m = _BRACKET.match(spec, i)
            if not m:
                raise TemplateParseError("malformed bracket token", i + 1)
            name = m.group(1)
            if name in ("CLS", "SEP"):
                elements.append(SpecialToken(name))
            elif name == "MASK":
                elements.append(MaskSlot())
            else:
                pm = _PROMPT.match(name)
                if not pm:
                    raise TemplateParseError(f"unknown bracket token [{name}]", i + 1)
                elements.append(PromptSlot(int(pm.group(1))))
            i = m.end()
        elif ch == "{":
            m = _SENTENCE.match(spec, i)
            if not m:
                raise TemplateParseError("expected {s1} or {s2}", i + 1)
            elements.append(SentenceSlot(int(m.group(1))))
            i = m.end()
        else:
            start = i
            while i < n and not spec[i].isspace() and spec[i] not in "[{":
                i += 1
            elements.append(LiteralText(spec[start:i]))
    masks = sum(isinstance(e, MaskSlot) for e in elements)
    if masks == 0:
        raise TemplateParseError("template has no [MASK] slot", len(spec))
    if masks > 1:
        col = spec.index("[MASK]", spec.index("[MASK]") + 1) + 1
        raise TemplateParseError("duplicate [MASK] slot", col)
    sentence_indices = [e.index for e in elements if isinstance(e, SentenceSlot)]
    if len(sentence_indices) != len(set(sentence_indices)):
        raise TemplateParseError("a sentence slot may appear at most once", len(spec))
    if sentence_indices == [2]:
        raise TemplateParseError("{s2} used without {s1}", len(spec))
    prompt_indices = sorted(e.index for e in elements if isinstance(e, PromptSlot))
    if prompt_indices != list(range(1, len(prompt_indices) + 1)):
        raise TemplateParseError(
            f"prompt slots must be exactly [P_1]..[P_K], got {prompt_indices}", len(spec))
    return Template(
        elements=tuple(elements),
        k=len(prompt_indices),
        num_sentences=max(sentence_indices, default=0),
    )


def render_template(template: Template) -> str:
    """Canonical one-line form; render(parse(spec)) round-trips."""
    parts = []
    for e in template.elements:
        if isinstance(e, SpecialToken):
            parts.append(f"[{e.which}]")
        elif isinstance(e, SentenceSlot):
            parts.append(f"{{s{e.index}}}")
        elif isinstance(e, PromptSlot):
            parts.append(f"[P_{e.index}]")
        elif isinstance(e, MaskSlot):
            parts.append("[MASK]")
        else:
            parts.append(e.text)
    return " ".join(parts)


def default_template_spec(kind: str, k: int) -> str:
    """Per-task default prompt placement.

    Single-sentence tasks split prompts around the sentence with the mask
    after it; pair tasks put a quarter before, half (straddling the mask)
    between, and a quarter after, with the mask between the sentences.
    """
    def prompts(lo: int, hi: int) -> list[str]:
        return [f"[P_{i}]" for i in range(lo, hi + 1)]

    if kind == "single_sentence":
        kb = k // 2
        parts = ["[CLS]"] + prompts(1, kb) + ["{s1}"] + prompts(kb + 1, k) + ["[MASK]", "[SEP]"]
    elif kind in ("sentence_pair", "pair_regression"):
        kb = k // 4
        ka = k // 4
        km = k - kb - ka
        m1 = km // 2
        parts = (
            ["[CLS]"] + prompts(1, kb) + ["{s1}"]
            + prompts(kb + 1, kb + m1) + ["[MASK]"] + prompts(kb + m1 + 1, kb + km)
            + ["{s2}"] + prompts(kb + km + 1, k) + ["[SEP]"]
        )
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return " ".join(parts)


def apply_template(template: Template, vocab, s1_tokens, s2_tokens=None,
                   prompt: Tensor | None = None) -> MixedInput:
    """Assemble a MixedInput, binding prompt slots to prompt tensor rows."""
    if template.num_sentences == 2 and s2_tokens is None:
        raise ValueError("sentence-pair template needs s2")
    if prompt is not None and prompt.shape[0] != template.k:
        raise ValueError(
            f"template has {template.k} prompt slots but prompt tensor has "
            f"{prompt.shape[0]} rows")
    ids: list[int] = []
    owners: list[str] = []
    prompt_slots: list[tuple[int, int]] = []
    mask_position = None
    pad = vocab.pad_id
    for e in template.elements:
        if isinstance(e, SpecialToken):
            ids.append(vocab.cls_id if e.which == "CLS" else vocab.sep_id)
            owners.append("special")
        elif isinstance(e, MaskSlot):
            mask_position = len(ids)
            ids.append(vocab.mask_id)
            owners.append("mask")
        elif isinstance(e, PromptSlot):
            prompt_slots.append((len(ids), e.index - 1))
            ids.append(pad)
            owners.append("prompt")
        elif isinstance(e, LiteralText):
            for tok in vocab.encode(e.text):
                ids.append(tok)
                owners.append("literal")
        else:
            tokens = s1_tokens if e.index == 1 else s2_tokens
            tag = f"s{e.index}"
            for tok in tokens:
                ids.append(int(tok))
                owners.append(tag)
    return MixedInput(
        token_ids=np.asarray(ids, dtype=np.int64),
        prompt_slots=prompt_slots,
        mask_position=mask_position,
        owners=owners,
        prompt=prompt,
    )


def truncate(inp: MixedInput, max_len: int) -> MixedInput:
    """Trim sentence tokens from the tail, longest sentence first.

    Prompts, the mask, specials, and literals are never removed. Each
    present sentence keeps at least one token, so max_len must cover the
    non-sentence overhead plus one token per sentence.
    """
    owners = list(inp.owners)
    if not owners:
        raise ValueError("truncate needs owner tags on the input")
    sentences = sorted({o for o in owners if o in ("s1", "s2")})
    overhead = sum(1 for o in owners if o not in ("s1", "s2"))
    min_len = overhead + len(sentences)
    if max_len < min_len:
        raise ValueError(f"max_len {max_len} below minimum feasible length {min_len}")
    if inp.length <= max_len:
        return inp
    keep = np.ones(len(owners), dtype=bool)
    counts = {s: owners.count(s) for s in sentences}
    last_index = {
        s: [i for i, o in enumerate(owners) if o == s] for s in sentences
    }
    removed = {s: 0 for s in sentences}
    total = inp.length
    while total > max_len:
        longest = max(sentences, key=lambda s: (counts[s], -sentences.index(s)))
        idx = last_index[longest][-1 - removed[longest]]
        keep[idx] = False
        removed[longest] += 1
        counts[longest] -= 1
        total -= 1
    new_positions = np.cumsum(keep) - 1
    token_ids = inp.token_ids[keep]
    new_owners = [o for o, k in zip(owners, keep) if k]
    prompt_slots = [(int(new_positions[pos]), row) for pos, row in inp.prompt_slots]
    mask_position = (
        int(new_positions[inp.mask_position]) if inp.mask_position is not None else None
    )
    return MixedInput(
        token_ids=token_ids,
        prompt_slots=prompt_slots,
        mask_position=mask_position,
        owners=new_owners,
        prompt=inp.prompt,
    )
