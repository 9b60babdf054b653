"""
Byte-level tokenizer with a greedy merge table learned from a corpus.
"""
import hashlib
import json
import logging
from collections import Counter
from typing import Dict, List, Sequence, Tuple

logger = logging.getLogger(__name__)

BYTE_TOKENS = 256


class ByteTokenizer:
    """
    256 byte tokens plus learned merges.

    Merge ``i`` produces token ``256 + i`` from an adjacent pair of existing
    tokens; encoding applies merges in the order they were learned.
    """

    def __init__(self, merges: Sequence[Tuple[int, int]] = ()):
        self.merges: List[Tuple[int, int]] = [tuple(pair) for pair in merges]
        self.ranks: Dict[Tuple[int, int], int] = {pair: i for i, pair in enumerate(self.merges)}
        self.pieces: Dict[int, bytes] = {i: bytes([i]) for i in range(BYTE_TOKENS)}
        for i, (a, b) in enumerate(self.merges):
            if a not in self.pieces or b not in self.pieces:
                raise ValueError(f"merge {i} refers to unknown tokens ({a}, {b})")
            self.pieces[BYTE_TOKENS + i] = self.pieces[a] + self.pieces[b]

    @property
    def vocab_size(self) -> int:
        return BYTE_TOKENS + len(self.merges)

    @classmethod
    def train(cls, text: str, vocab_size: int = 512) -> "ByteTokenizer":
        if vocab_size < BYTE_TOKENS:
            raise ValueError(f"vocab_size must be at least {BYTE_TOKENS}, got {vocab_size}")
        ids = list(text.encode("utf-8"))
        merges: List[Tuple[int, int]] = []
        while BYTE_TOKENS + len(merges) < vocab_size:
            counts = Counter(zip(ids, ids[1:]))
            if not counts:
                break
            # ties resolve to the smallest pair for determinism
            pair, count = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            if count < 2:
                break
            new_id = BYTE_TOKENS + len(merges)
            merges.append(pair)
            ids = _apply_merge(ids, pair, new_id)
        logger.info(f"Learned {len(merges)} merges from {len(text)} characters")
        return cls(merges)

    def encode(self, text: str) -> List[int]:
        ids = list(text.encode("utf-8"))
        while len(ids) >= 2:
            candidates = [(self.ranks[p], p) for p in set(zip(ids, ids[1:])) if p in self.ranks]
            if not candidates:
                break
            rank, pair = min(candidates)
            ids = _apply_merge(ids, pair, BYTE_TOKENS + rank)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        try:
            data = b"".join(self.pieces[int(i)] for i in ids)
        except KeyError as e:
            raise ValueError(f"token {e.args[0]} is outside vocab of size {self.vocab_size}") from None
        return data.decode("utf-8", errors="replace")

    def to_dict(self) -> dict:
        return {"kind": "byte_merge", "merges": [list(p) for p in self.merges]}

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
        logger.info(f"Saved tokenizer ({self.vocab_size} tokens) to {path}")

    @classmethod
    def load(cls, path: str) -> "ByteTokenizer":
        with open(path) as f:
            data = json.load(f)
        if data.get("kind") != "byte_merge":
            raise ValueError(f"unsupported tokenizer kind in {path}: {data.get('kind')}")
        return cls([tuple(p) for p in data["merges"]])


def _apply_merge(ids: List[int], pair: Tuple[int, int], new_id: int) -> List[int]:
    out = []
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out
