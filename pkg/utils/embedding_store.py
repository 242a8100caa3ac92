#!/usr/bin/env python3
"""
Word Embedding Store

Loads a pretrained word-embedding table (GloVe text layout or the binary EMB1
cache), keeps every row L2-normalized, and answers the two questions the rest
of the pipeline asks of it:

- what is the semantic vector of a concept name (multi-token names are averaged)
- which words are closest to a given semantic vector

The table is immutable after loading and safe to share between threads.
"""

import re
import struct
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from utils.errors import EmbeddingParseError, UnknownConceptError, ArtifactNotFoundError, FilterLexError

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"EMB1"
NORM_EPS = 1e-12


@dataclass(frozen=True)
class EmbeddingTable:
    """Token -> unit-norm semantic vector"""
    tokens: Tuple[str, ...]
    vectors: np.ndarray
    index: Dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.index:
            object.__setattr__(self, 'index', {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.index

    def lookup(self, token: str) -> np.ndarray:
        """Return the stored row for a single token"""
        i = self.index.get(token.lower())
        if i is None:
            raise UnknownConceptError(token, [token.lower()])
        return self.vectors[i]


def _normalize_rows(vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    keep = norms > NORM_EPS
    unit = (vectors[keep].astype(np.float64) / norms[keep, None]).astype(np.float32)
    return unit, keep


def _build_table(tokens: List[str], raw: np.ndarray, vocab_filter: Optional[Iterable[str]]) -> EmbeddingTable:
    if vocab_filter is not None:
        wanted = {t.lower() for t in vocab_filter}
        selected = [i for i, tok in enumerate(tokens) if tok in wanted]
        tokens = [tokens[i] for i in selected]
        raw = raw[selected] if selected else raw[:0]

    unit, keep = _normalize_rows(raw)
    dropped = int((~keep).sum())
    if dropped:
        logger.warning(f"Dropped {dropped} zero-norm embedding rows")
    tokens = [tok for tok, k in zip(tokens, keep) if k]

    if not tokens:
        raise FilterLexError("embedding table is empty after filtering")
    return EmbeddingTable(tokens=tuple(tokens), vectors=unit)


def _load_text(path: Path, vocab_filter: Optional[Iterable[str]]) -> EmbeddingTable:
    tokens: List[str] = []
    rows: List[np.ndarray] = []
    seen: Dict[str, int] = {}
    dim = None

    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n').rstrip('\r')
            if not line.strip():
                continue
            parts = line.split(' ')
            token, values = parts[0].lower(), parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise EmbeddingParseError("no vector values", line_number)
            if len(values) != dim:
                raise EmbeddingParseError(f"expected {dim + 1} fields, found {len(parts)}", line_number)
            if token in seen:
                raise EmbeddingParseError(
                    f"duplicate token '{token}' (first seen on line {seen[token]})", line_number)
            try:
                row = np.asarray(values, dtype=np.float64)
            except ValueError:
                raise EmbeddingParseError("non-numeric vector value", line_number)
            seen[token] = line_number
            tokens.append(token)
            rows.append(row)

    if not rows:
        raise EmbeddingParseError("file contains no embedding records")
    return _build_table(tokens, np.vstack(rows), vocab_filter)


def _load_cache(path: Path, vocab_filter: Optional[Iterable[str]]) -> EmbeddingTable:
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != CACHE_MAGIC:
        raise EmbeddingParseError(f"bad cache magic in {path}")
    count, dim = struct.unpack_from('<II', data, 4)
    offset = 12
    tokens = []
    for _ in range(count):
        (length,) = struct.unpack_from('<I', data, offset)
        offset += 4
        tokens.append(data[offset:offset + length].decode('utf-8').lower())
        offset += length
    vectors = np.frombuffer(data, dtype='<f4', count=count * dim, offset=offset).reshape(count, dim)
    if len(set(tokens)) != len(tokens):
        raise EmbeddingParseError(f"duplicate tokens in cache {path}")
    return _build_table(tokens, vectors.astype(np.float32), vocab_filter)


def load_embeddings(path: Union[str, Path], vocab_filter: Optional[Iterable[str]] = None) -> EmbeddingTable:
    """
    Load an embedding table and L2-normalize its rows

    Args:
        path: GloVe-style text file (token followed by space-separated numbers),
              or a binary cache written by write_embedding_cache
        vocab_filter: Optional set of tokens to keep

    Returns:
        EmbeddingTable with unit rows
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "embedding file")

    with open(path, 'rb') as f:
        head = f.read(4)
    if head == CACHE_MAGIC:
        table = _load_cache(path, vocab_filter)
    else:
        table = _load_text(path, vocab_filter)

    logger.info(f"Loaded {len(table)} embeddings of dimension {table.dim} from {path}")
    return table


def write_embedding_cache(table: EmbeddingTable, path: Union[str, Path]) -> Path:
    """Write the binary EMB1 cache (little-endian header, length-prefixed tokens, float32 rows)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack('<II', len(table), table.dim))
        for tok in table.tokens:
            encoded = tok.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
        f.write(np.ascontiguousarray(table.vectors, dtype='<f4').tobytes())
    return path


def write_embeddings_text(tokens: Iterable[str], vectors: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a GloVe-layout text file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for tok, row in zip(tokens, vectors):
            f.write(tok + ' ' + ' '.join(f"{v:.6f}" for v in row) + '\n')
    return path


def table_fingerprint(table: EmbeddingTable) -> str:
    """SHA-256 over tokens and vector bytes; stored in explainer checkpoints"""
    digest = hashlib.sha256()
    digest.update('\n'.join(table.tokens).encode('utf-8'))
    digest.update(np.ascontiguousarray(table.vectors, dtype='<f4').tobytes())
    return digest.hexdigest()


def split_concept_name(concept_name: str) -> List[str]:
    return [t for t in re.split(r'[\s_]+', concept_name.strip().lower()) if t]


def concept_vector(table: EmbeddingTable, concept_name: str) -> np.ndarray:
    """
    Semantic vector of a concept name

    Single tokens return their stored row; multi-token names ("tennis_racket",
    "tennis racket") return the re-normalized mean of the constituent rows.
    Constituents missing from the table are ignored unless all are missing.
    """
    parts = split_concept_name(concept_name)
    found = [table.index[t] for t in parts if t in table.index]
    if not found:
        raise UnknownConceptError(concept_name, parts or [concept_name])
    if len(found) == 1:
        return table.vectors[found[0]].copy()

    missing = [t for t in parts if t not in table.index]
    if missing:
        logger.debug(f"Concept '{concept_name}' ignores missing tokens {missing}")
    mean = table.vectors[found].astype(np.float64).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= NORM_EPS:
        raise UnknownConceptError(concept_name, parts)
    return (mean / norm).astype(np.float32)


def concept_matrix(table: EmbeddingTable, concepts: Iterable[str]) -> np.ndarray:
    """Stack concept_vector for each concept (rows in the given order)"""
    return np.vstack([concept_vector(table, c) for c in concepts])


def nearest_words(table: EmbeddingTable, query: np.ndarray, s: int) -> List[Tuple[str, float]]:
    """
    The s tokens with the highest cosine similarity to query

    Returns:
        List of (token, similarity), descending, ties broken by token
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    query = np.asarray(query, dtype=np.float64).ravel()
    norm = np.linalg.norm(query)
    if norm <= NORM_EPS:
        raise FilterLexError("nearest_words query has zero norm")

    sims = (table.vectors @ (query / norm).astype(np.float32)).astype(np.float64)
    sims = np.clip(sims, -1.0, 1.0)
    # lexsort: last key is primary
    order = np.lexsort((np.asarray(table.tokens), -sims))
    top = order[:min(s, len(table))]
    return [(table.tokens[i], float(sims[i])) for i in top]
