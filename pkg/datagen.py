"""
Data distributions for training and for refined measurements.

Three kinds of source share one interface: file-backed corpora, synthetic
corpora with planted n-gram / skip-n-gram / Dyck / induction structure, and
generators that sample from a reference model. Every batch is a pure
function of (seed, stream, index).
"""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import ParameterStore
from tokenizer import ByteTokenizer
from transformer import logits as model_logits

logger = logging.getLogger(__name__)

PATTERN_KINDS = ("ngram", "skip_ngram", "dyck", "induction")
MIN_FILLER_TOKENS = 8


@dataclass(frozen=True)
class SkipTemplate:
    head: int
    min_gap: int
    max_gap: int
    tail: Tuple[int, ...]

    def __post_init__(self):
        if self.min_gap < 1 or self.max_gap < self.min_gap:
            raise ValueError(f"skip gap range must satisfy 1 <= min <= max, got ({self.min_gap}, {self.max_gap})")
        if not self.tail:
            raise ValueError("skip template tail cannot be empty")


@dataclass(frozen=True)
class Annotation:
    """A planted pattern inside one sequence; ``end`` is exclusive."""
    kind: str
    start: int
    end: int
    detail: Dict = field(default_factory=dict)

    def shifted(self, offset: int) -> "Annotation":
        detail = dict(self.detail)
        if self.kind == "dyck":
            detail["pairs"] = [[o + offset, c + offset, d, n] for o, c, d, n in detail["pairs"]]
        elif self.kind == "skip_ngram":
            detail["head"] += offset
            detail["tail_start"] += offset
        elif self.kind == "induction":
            detail["first"] += offset
            detail["second"] += offset
        return Annotation(self.kind, self.start + offset, self.end + offset, detail)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": self.start, "end": self.end, "detail": self.detail}


@dataclass(frozen=True)
class PatternSpec:
    vocab_size: int
    filler_start: int
    ngrams: Tuple[Tuple[int, ...], ...]
    ngram_weights: Tuple[float, ...]
    skip_templates: Tuple[SkipTemplate, ...]
    brackets: Tuple[Tuple[int, int], ...]
    weights: Tuple[Tuple[str, float], ...]
    max_depth: int = 3
    min_depth: int = 1
    induction_length: Tuple[int, int] = (2, 4)
    induction_gap: Tuple[int, int] = (1, 8)
    plants: int = 3
    zipf_exponent: float = 1.1

    def __post_init__(self):
        mix = dict(self.weights)
        unknown = set(mix) - set(PATTERN_KINDS)
        if unknown:
            raise ValueError(f"unknown pattern kinds in mixture: {sorted(unknown)}")
        if any(w < 0 for w in mix.values()):
            raise ValueError(f"mixture weights must be nonnegative, got {mix}")
        if abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(mix.values())}")
        if self.vocab_size - self.filler_start < MIN_FILLER_TOKENS:
            raise ValueError(f"need at least {MIN_FILLER_TOKENS} filler tokens, "
                             f"got {self.vocab_size - self.filler_start}")
        if not 1 <= self.min_depth <= self.max_depth:
            raise ValueError(f"Dyck depths must satisfy 1 <= min <= max, got ({self.min_depth}, {self.max_depth})")
        if len(self.ngrams) != len(self.ngram_weights):
            raise ValueError("ngrams and ngram_weights must have the same length")
        for entry in self.ngrams:
            if not 2 <= len(entry) <= 4:
                raise ValueError(f"n-gram entries must have length 2-4, got {entry}")
        if mix.get("dyck", 0) > 0 and not self.brackets:
            raise ValueError("Dyck weight is positive but the bracket alphabet is empty")
        if mix.get("ngram", 0) > 0 and not self.ngrams:
            raise ValueError("n-gram weight is positive but the n-gram table is empty")
        if mix.get("skip_ngram", 0) > 0 and not self.skip_templates:
            raise ValueError("skip-n-gram weight is positive but there are no templates")
        reserved = self.reserved_tokens()
        if reserved and max(reserved) >= self.filler_start:
            raise ValueError("reserved pattern tokens must lie below filler_start")
        if self.plants < 1:
            raise ValueError(f"plants must be positive, got {self.plants}")

    @property
    def mixture(self) -> Dict[str, float]:
        return dict(self.weights)

    def reserved_tokens(self) -> List[int]:
        tokens = [t for pair in self.brackets for t in pair]
        for template in self.skip_templates:
            tokens.append(template.head)
            tokens.extend(template.tail)
        for entry in self.ngrams:
            tokens.extend(entry)
        return tokens

    @property
    def bracket_alphabet(self) -> Dict[int, Tuple[int, bool]]:
        """Token -> (kind, is_open)."""
        alphabet = {}
        for kind, (open_tok, close_tok) in enumerate(self.brackets):
            alphabet[open_tok] = (kind, True)
            alphabet[close_tok] = (kind, False)
        return alphabet

    @classmethod
    def default(cls, vocab_size: int, n_ngrams: Optional[int] = None, n_skip: Optional[int] = None,
                bracket_kinds: int = 3, max_depth: int = 3,
                weights: Optional[Mapping[str, float]] = None, plants: int = 3) -> "PatternSpec":
        """
        Planted-structure spec with disjoint reserved token ranges.

        Brackets take the lowest ids, then skip-n-gram templates, then n-gram
        entries; every remaining id is a filler token.
        """
        if n_ngrams is None:
            n_ngrams = max(2, min(16, vocab_size // 32))
        if n_skip is None:
            n_skip = max(1, min(8, vocab_size // 64))
        next_token = 0
        brackets = []
        for _ in range(bracket_kinds):
            brackets.append((next_token, next_token + 1))
            next_token += 2
        templates = []
        for i in range(n_skip):
            tail_len = 1 + i % 2
            tail = tuple(range(next_token + 1, next_token + 1 + tail_len))
            templates.append(SkipTemplate(head=next_token, min_gap=1, max_gap=4, tail=tail))
            next_token += 1 + tail_len
        ngrams = []
        for i in range(n_ngrams):
            length = 2 + i % 3
            ngrams.append(tuple(range(next_token, next_token + length)))
            next_token += length
        mix = weights or {"ngram": 0.3, "skip_ngram": 0.2, "dyck": 0.25, "induction": 0.25}
        return cls(
            vocab_size=vocab_size,
            filler_start=next_token,
            ngrams=tuple(ngrams),
            ngram_weights=tuple(1.0 / (i + 1) for i in range(n_ngrams)),
            skip_templates=tuple(templates),
            brackets=tuple(brackets),
            weights=tuple(sorted(mix.items())),
            max_depth=max_depth,
            plants=plants,
        )

    def with_weights(self, weights: Mapping[str, float]) -> "PatternSpec":
        return replace(self, weights=tuple(sorted(weights.items())))

    def code_like(self) -> "PatternSpec":
        """Alternate distribution with raised Dyck and induction mass."""
        return self.with_weights({"ngram": 0.1, "skip_ngram": 0.1, "dyck": 0.4, "induction": 0.4})

    def to_dict(self) -> dict:
        data = asdict(self)
        data["weights"] = dict(self.weights)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "PatternSpec":
        data = dict(data)
        data["ngrams"] = tuple(tuple(e) for e in data["ngrams"])
        data["ngram_weights"] = tuple(data["ngram_weights"])
        data["skip_templates"] = tuple(
            SkipTemplate(t["head"], t["min_gap"], t["max_gap"], tuple(t["tail"])) for t in data["skip_templates"]
        )
        data["brackets"] = tuple(tuple(b) for b in data["brackets"])
        data["weights"] = tuple(sorted(dict(data["weights"]).items()))
        for key in ("induction_length", "induction_gap"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "PatternSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class DataSource:
    """Base class: a replayable distribution over length-K token sequences."""
    kind = "abstract"

    def __init__(self, context_length: int, seed: int = 0):
        if context_length < 2:
            raise ValueError(f"context_length must be at least 2, got {context_length}")
        self.context_length = context_length
        self.seed = seed

    def _rng(self, index: int, stream: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, stream, index, *extra]))

    def sample_batch(self, n: int, index: int = 0, stream: int = 0) -> np.ndarray:
        return self.sample_annotated(n, index=index, stream=stream)[0]

    def sample_annotated(self, n: int, index: int = 0,
                         stream: int = 0) -> Tuple[np.ndarray, List[List[Annotation]]]:
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        return self._draw(n, index, stream), [[] for _ in range(n)]

    def _draw(self, n: int, index: int, stream: int) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "context_length": self.context_length}


class CorpusSource(DataSource):
    """Random length-K windows of a tokenized corpus."""
    kind = "corpus_file"

    def __init__(self, tokens: np.ndarray, context_length: int, seed: int = 0, path: Optional[str] = None):
        super().__init__(context_length, seed)
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.path = path
        if self.tokens.size < context_length:
            raise ValueError(f"corpus has {self.tokens.size} tokens, shorter than context length {context_length}")

    @classmethod
    def from_file(cls, path: str, context_length: int, seed: int = 0,
                  tokenizer: Optional[ByteTokenizer] = None) -> "CorpusSource":
        """Read a u16 token binary (``.bin``) or UTF-8 text tokenized on load."""
        if path.endswith(".bin"):
            tokens = np.fromfile(path, dtype="<u2")
        else:
            if tokenizer is None:
                raise ValueError(f"a tokenizer is required to read text corpus {path}")
            with open(path, encoding="utf-8") as f:
                tokens = np.array(tokenizer.encode(f.read()))
        logger.info(f"Loaded corpus {path} with {len(tokens)} tokens")
        return cls(tokens, context_length, seed, path=path)

    def _draw(self, n, index, stream):
        rng = self._rng(index, stream)
        starts = rng.integers(0, self.tokens.size - self.context_length + 1, size=n)
        return np.stack([self.tokens[s:s + self.context_length] for s in starts])

    def describe(self):
        return {**super().describe(), "path": self.path, "tokens": int(self.tokens.size)}


class SyntheticSource(DataSource):
    """Zipf filler text with planted patterns; one pattern kind per sequence."""
    kind = "synthetic"

    def __init__(self, spec: PatternSpec, context_length: int, seed: int = 0):
        super().__init__(context_length, seed)
        self.spec = spec
        self._kinds = [k for k in PATTERN_KINDS if spec.mixture.get(k, 0) > 0]
        self._kind_probs = np.array([spec.mixture[k] for k in self._kinds])
        n_filler = spec.vocab_size - spec.filler_start
        ranks = np.arange(1, n_filler + 1, dtype=np.float64)
        self._filler_probs = ranks ** -spec.zipf_exponent
        self._filler_probs /= self._filler_probs.sum()
        weights = np.asarray(spec.ngram_weights, dtype=np.float64)
        self._ngram_probs = weights / weights.sum() if weights.size else weights

    def sample_annotated(self, n, index=0, stream=0):
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        rows, notes = [], []
        for i in range(n):
            tokens, annotations = self._sequence(self._rng(index, stream, i))
            rows.append(tokens)
            notes.append(annotations)
        return np.stack(rows), notes

    def _filler(self, rng, count: int) -> List[int]:
        if count <= 0:
            return []
        draws = rng.choice(self._filler_probs.size, size=count, p=self._filler_probs)
        return list(draws + self.spec.filler_start)

    def _sequence(self, rng) -> Tuple[np.ndarray, List[Annotation]]:
        kind = self._kinds[rng.choice(len(self._kinds), p=self._kind_probs)]
        blocks = self._blocks(kind, rng)
        total = sum(len(tokens) for tokens, _ in blocks)
        while len(blocks) > 1 and total > self.context_length:
            dropped, _ = blocks.pop()
            total -= len(dropped)
        if total > self.context_length:
            raise ValueError(f"context length {self.context_length} is too short for a {kind} pattern")
        free = self.context_length - total
        cuts = np.sort(rng.integers(0, free + 1, size=len(blocks)))
        gaps = np.diff(np.concatenate([[0], cuts, [free]]))
        tokens: List[int] = []
        annotations = []
        for gap, (block, note) in zip(gaps, blocks):
            tokens.extend(self._filler(rng, int(gap)))
            annotations.append(note.shifted(len(tokens)))
            tokens.extend(block)
        tokens.extend(self._filler(rng, self.context_length - len(tokens)))
        return np.array(tokens, dtype=np.int64), annotations

    def _blocks(self, kind: str, rng) -> List[Tuple[List[int], Annotation]]:
        spec = self.spec
        if kind == "ngram":
            count = min(spec.plants, len(spec.ngrams))
            chosen = rng.choice(len(spec.ngrams), size=count, replace=False, p=self._ngram_probs)
            return [self._ngram_block(int(i)) for i in chosen]
        builders = {"skip_ngram": self._skip_block, "dyck": self._dyck_block, "induction": self._induction_block}
        return [builders[kind](rng) for _ in range(spec.plants)]

    def _ngram_block(self, entry: int):
        tokens = list(self.spec.ngrams[entry])
        return tokens, Annotation("ngram", 0, len(tokens), {"entry": entry})

    def _skip_block(self, rng):
        index = int(rng.integers(len(self.spec.skip_templates)))
        template = self.spec.skip_templates[index]
        gap = int(rng.integers(template.min_gap, template.max_gap + 1))
        tokens = [template.head] + self._filler(rng, gap) + list(template.tail)
        detail = {"template": index, "head": 0, "tail_start": 1 + gap, "gap": gap}
        return tokens, Annotation("skip_ngram", 0, len(tokens), detail)

    def _dyck_block(self, rng):
        spec = self.spec
        tokens: List[int] = []
        pairs: List[List] = []

        def emit_pair(depth: int) -> None:
            open_tok, close_tok = spec.brackets[int(rng.integers(len(spec.brackets)))]
            open_pos = len(tokens)
            tokens.append(open_tok)
            tokens.extend(self._filler(rng, int(rng.integers(1, 3))))
            has_child = depth < spec.max_depth and (depth < spec.min_depth or rng.random() < 0.5)
            if has_child:
                emit_pair(depth + 1)
                if rng.random() < 0.5:
                    tokens.extend(self._filler(rng, 1))
            pairs.append([open_pos, len(tokens), depth, bool(depth > 1 or has_child)])
            tokens.append(close_tok)

        top_level = int(rng.integers(1, 3))
        for i in range(top_level):
            emit_pair(1)
            if i < top_level - 1:
                tokens.extend(self._filler(rng, 1))
        pairs.sort()
        nested = any(depth > 1 for _, _, depth, _ in pairs)
        return tokens, Annotation("dyck", 0, len(tokens), {"pairs": pairs, "nested": nested})

    def _induction_block(self, rng):
        spec = self.spec
        length = int(rng.integers(spec.induction_length[0], spec.induction_length[1] + 1))
        gap = int(rng.integers(spec.induction_gap[0], spec.induction_gap[1] + 1))
        gram = list(rng.integers(spec.filler_start, spec.vocab_size, size=length))
        tokens = gram + self._filler(rng, gap) + gram
        detail = {"first": 0, "second": length + gap, "length": length}
        return tokens, Annotation("induction", 0, len(tokens), detail)

    def describe(self):
        return {**super().describe(), "spec": self.spec.to_dict()}


class ModelGeneratorSource(DataSource):
    """Autoregressive samples from a reference model; the first token is uniform."""
    kind = "model_generator"

    def __init__(self, params: ParameterStore, seed: int = 0, temperature: float = 1.0,
                 context_length: Optional[int] = None, name: Optional[str] = None):
        config = params.config
        super().__init__(context_length or config.context_length, seed)
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if self.context_length > config.context_length:
            raise ValueError(f"context length {self.context_length} exceeds the reference model's "
                             f"{config.context_length}")
        self.params = params
        self.temperature = temperature
        self.name = name

    def _draw(self, n, index, stream):
        rng = self._rng(index, stream)
        vocab = self.params.config.vocab_size
        seqs = np.zeros((n, self.context_length), dtype=np.int64)
        seqs[:, 0] = rng.integers(0, vocab, size=n)
        for t in range(1, self.context_length):
            out = model_logits(self.params, seqs[:, :t])[:, -1] / self.temperature
            probs = np.exp(out - out.max(axis=-1, keepdims=True))
            probs /= probs.sum(axis=-1, keepdims=True)
            u = rng.random(n)
            choice = (np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1)
            seqs[:, t] = np.minimum(choice, vocab - 1)
        return seqs

    def describe(self):
        return {**super().describe(), "reference": self.name, "temperature": self.temperature}


class RepeatedRandomSource(DataSource):
    """Uniform random halves repeated once, the probe for induction scores."""
    kind = "repeated_random"

    def __init__(self, vocab_size: int, context_length: int, seed: int = 0, low: int = 0):
        super().__init__(context_length, seed)
        if context_length % 2:
            raise ValueError(f"repeated sequences need an even context length, got {context_length}")
        self.vocab_size = vocab_size
        self.low = low

    def _draw(self, n, index, stream):
        rng = self._rng(index, stream)
        half = rng.integers(self.low, self.vocab_size, size=(n, self.context_length // 2))
        return np.concatenate([half, half], axis=1)


def sample_batch(source: DataSource, n: int, index: int = 0, stream: int = 0) -> np.ndarray:
    """``n`` sequences of length K, a pure function of (source seed, stream, index)."""
    return source.sample_batch(n, index=index, stream=stream)


def model_generator_source(reference, seed: int = 0, temperature: float = 1.0,
                           context_length: Optional[int] = None) -> ModelGeneratorSource:
    """
    Source that samples from a reference checkpoint (or ParameterStore) at
    the given temperature.
    """
    params = getattr(reference, "params", reference)
    name = f"step_{reference.step}" if hasattr(reference, "step") else None
    return ModelGeneratorSource(params, seed=seed, temperature=temperature,
                                context_length=context_length, name=name)


def nested_dyck_source(spec: PatternSpec, context_length: int, seed: int = 0) -> SyntheticSource:
    nested = replace(spec, weights=(("dyck", 1.0),), min_depth=2, max_depth=max(2, spec.max_depth))
    return SyntheticSource(nested, context_length, seed)


def unnested_dyck_source(spec: PatternSpec, context_length: int, seed: int = 0) -> SyntheticSource:
    flat = replace(spec, weights=(("dyck", 1.0),), min_depth=1, max_depth=1)
    return SyntheticSource(flat, context_length, seed)


def repeated_random_batch(vocab_size: int, n: int, context_length: int, seed: int = 0,
                          low: int = 0) -> np.ndarray:
    return RepeatedRandomSource(vocab_size, context_length, seed, low=low).sample_batch(n)


def ingest_corpus(text_path: str, tokenizer: ByteTokenizer, out_path: str) -> int:
    """Tokenize UTF-8 text and write it as a little-endian u16 binary. Returns the token count."""
    if tokenizer.vocab_size > 65536:
        raise ValueError(f"vocab of {tokenizer.vocab_size} does not fit in u16 tokens")
    with open(text_path, encoding="utf-8") as f:
        tokens = np.asarray(tokenizer.encode(f.read()), dtype="<u2")
    tokens.tofile(out_path)
    logger.info(f"Wrote {tokens.size} tokens from {text_path} to {out_path}")
    return int(tokens.size)


def annotated_positions(annotations: Sequence[Annotation], kind: str) -> List[int]:
    """
    Positions p whose next token (p + 1) completes a planted pattern of ``kind``.

    Dyck: the token before each closing bracket. Induction: every token of
    the second copy except its last. Skip-n-gram: tokens before each tail
    token. N-gram: tokens before each non-initial entry token.
    """
    positions = []
    for note in annotations:
        if note.kind != kind:
            continue
        if kind == "dyck":
            positions.extend(close - 1 for _, close, _, _ in note.detail["pairs"])
        elif kind == "induction":
            second, length = note.detail["second"], note.detail["length"]
            positions.extend(range(second, second + length - 1))
        elif kind == "skip_ngram":
            positions.extend(range(note.detail["tail_start"] - 1, note.end - 1))
        else:
            positions.extend(range(note.start, note.end - 1))
    return sorted(positions)


def dyck_close_positions(annotations: Sequence[Annotation], nested: bool) -> List[int]:
    """Predicting positions for closing brackets of nested (or unnested) pairs."""
    positions = []
    for note in annotations:
        if note.kind != "dyck":
            continue
        positions.extend(close - 1 for _, close, _, is_nested in note.detail["pairs"] if is_nested == nested)
    return sorted(positions)
