"""Synthetic tagged corpus and the proxy embedding set used by ORCA stage 1.

Sequences come from a seeded 3-state Markov grammar: each hidden state prefers
a disjoint block of tags, and each tag owns a token sub-range, so class-
conditional token (and embedding) distributions are distinct.  Sequences are
shorter than 32 tokens, padded to 32 for embedding, and pad positions are
excluded from the feature set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .container import DataFileError, read_container, write_container
from .transformer import TransformerModel, embed_tokens, forward_hidden

PAD_TOKEN = 0
MASK_TOKEN = 1
RESERVED_TOKENS = 2

PROXY_LENGTH = 32
MIN_SEQ_LEN, MAX_SEQ_LEN = 8, 31
N_STATES = 3


@dataclass
class SyntheticCorpus:
    """A sample of (token, tag) sequences plus the grammar that produced them."""

    vocab_size: int
    tag_count: int
    seed: int
    sequences: list[tuple[np.ndarray, np.ndarray]]  # (tokens, tags), equal length < 32
    transition: np.ndarray = field(repr=False, default=None)  # [S, S]
    state_tag_emission: np.ndarray = field(repr=False, default=None)  # [S, tag_count]

    def stationary_tag_distribution(self) -> np.ndarray:
        """Tag marginals implied by the chain's stationary state distribution."""
        vals, vecs = np.linalg.eig(self.transition.T)
        i = int(np.argmin(np.abs(vals - 1.0)))
        pi = np.real(vecs[:, i])
        pi = pi / pi.sum()
        return pi @ self.state_tag_emission


def _grammar_tables(rng: np.random.Generator, vocab_size: int, tag_count: int):
    """Seeded grammar parameters: ergodic state chain, block tag emissions,
    tag-specific token distributions over disjoint vocabulary slices."""
    transition = rng.uniform(0.2, 1.0, size=(N_STATES, N_STATES))
    transition /= transition.sum(axis=1, keepdims=True)

    emission = np.zeros((N_STATES, tag_count))
    per_state = tag_count // N_STATES
    for s in range(N_STATES):
        lo = s * per_state
        hi = tag_count if s == N_STATES - 1 else lo + per_state
        emission[s, lo:hi] = rng.uniform(0.5, 1.0, size=hi - lo)
    emission /= emission.sum(axis=1, keepdims=True)

    usable = vocab_size - RESERVED_TOKENS
    slice_width = usable // tag_count
    if slice_width < 1:
        raise ValueError("vocab too small for the requested tag count")
    token_dist = np.zeros((tag_count, vocab_size))
    for t in range(tag_count):
        lo = RESERVED_TOKENS + t * slice_width
        token_dist[t, lo: lo + slice_width] = rng.uniform(0.5, 1.0, size=slice_width)
    token_dist /= token_dist.sum(axis=1, keepdims=True)
    return transition, emission, token_dist


def gen_corpus(seed: int, n_sequences: int, vocab_size: int = 64, tag_count: int = 9) -> SyntheticCorpus:
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    rng = np.random.default_rng(seed)
    transition, emission, token_dist = _grammar_tables(rng, vocab_size, tag_count)
    sequences = []
    for _ in range(n_sequences):
        length = int(rng.integers(MIN_SEQ_LEN, MAX_SEQ_LEN + 1))
        state = int(rng.integers(N_STATES))
        tokens = np.empty(length, dtype=np.int64)
        tags = np.empty(length, dtype=np.int64)
        for i in range(length):
            state = int(rng.choice(N_STATES, p=transition[state]))
            tag = int(rng.choice(tag_count, p=emission[state]))
            tags[i] = tag
            tokens[i] = int(rng.choice(vocab_size, p=token_dist[tag]))
        sequences.append((tokens, tags))
    return SyntheticCorpus(vocab_size=vocab_size, tag_count=tag_count, seed=seed,
                           sequences=sequences, transition=transition,
                           state_tag_emission=emission)


@dataclass
class ProxyEmbeddingSet:
    features: np.ndarray  # [N, d_model] float32, one row per non-pad token
    labels: np.ndarray  # [N] int32 tags
    tag_count: int
    source_model_id: str
    source_pretrained: bool
    provenance: dict = field(default_factory=dict)


def model_id(model: TransformerModel) -> str:
    cfg = model.config
    return f"{cfg.arch}-d{cfg.d_model}h{cfg.n_heads}l{cfg.n_layers}-seed{cfg.seed}"


def build_proxy_set(model: TransformerModel, corpus: SyntheticCorpus) -> ProxyEmbeddingSet:
    """Embed every sequence (padded to 32) with the model's native mask and
    collect last-hidden vectors at non-pad positions, paired with tags."""
    if model.config.max_positions < PROXY_LENGTH:
        raise ValueError(f"model max_positions must be >= {PROXY_LENGTH}")
    feats, labels = [], []
    with T.no_grad():
        for tokens, tags in corpus.sequences:
            padded = np.full(PROXY_LENGTH, PAD_TOKEN, dtype=np.int64)
            padded[: len(tokens)] = tokens
            hidden = forward_hidden(model, embed_tokens(model, padded),
                                    model.config.mask_policy)
            feats.append(hidden.data[: len(tokens)])
            labels.append(tags)
    return ProxyEmbeddingSet(
        features=np.concatenate(feats).astype(np.float32),
        labels=np.concatenate(labels).astype(np.int32),
        tag_count=corpus.tag_count,
        source_model_id=model_id(model),
        source_pretrained=model.pretrained,
        provenance={"layer": "last_hidden", "pads_excluded": True,
                    "padded_length": PROXY_LENGTH, "corpus_seed": corpus.seed,
                    "unpretrained_source": not model.pretrained},
    )


# -- container I/O ---------------------------------------------------------


def save_corpus(corpus: SyntheticCorpus, path) -> None:
    n = len(corpus.sequences)
    lengths = np.array([len(t) for t, _ in corpus.sequences], dtype=np.int32)
    tokens = np.full((n, PROXY_LENGTH), PAD_TOKEN, dtype=np.int32)
    tags = np.full((n, PROXY_LENGTH), -1, dtype=np.int32)
    for i, (tok, tag) in enumerate(corpus.sequences):
        tokens[i, : len(tok)] = tok
        tags[i, : len(tag)] = tag
    header = {"kind": "tagged_corpus", "vocab_size": corpus.vocab_size,
              "tag_count": corpus.tag_count, "seed": corpus.seed}
    write_container(path, header, [
        ("lengths", lengths),
        ("tokens", tokens),
        ("tags", tags),
        ("transition", corpus.transition.astype(np.float32)),
        ("state_tag_emission", corpus.state_tag_emission.astype(np.float32)),
    ])


def load_corpus(path) -> SyntheticCorpus:
    header, blocks = read_container(path)
    if header.get("kind") != "tagged_corpus":
        raise DataFileError(f"{path} is not a tagged corpus container")
    lengths = blocks["lengths"]
    sequences = [(blocks["tokens"][i, : n].astype(np.int64),
                  blocks["tags"][i, : n].astype(np.int64))
                 for i, n in enumerate(lengths)]
    return SyntheticCorpus(vocab_size=header["vocab_size"], tag_count=header["tag_count"],
                           seed=header["seed"], sequences=sequences,
                           transition=blocks["transition"].astype(np.float64),
                           state_tag_emission=blocks["state_tag_emission"].astype(np.float64))


def save_proxy_set(proxy: ProxyEmbeddingSet, path) -> None:
    header = {"kind": "proxy_embedding_set", "tag_count": proxy.tag_count,
              "source_model_id": proxy.source_model_id,
              "source_pretrained": proxy.source_pretrained,
              "provenance": proxy.provenance}
    write_container(path, header, [("features", proxy.features),
                                   ("labels", proxy.labels)])


def load_proxy_set(path) -> ProxyEmbeddingSet:
    header, blocks = read_container(path)
    if header.get("kind") != "proxy_embedding_set":
        raise DataFileError(f"{path} is not a proxy embedding container")
    return ProxyEmbeddingSet(features=blocks["features"], labels=blocks["labels"],
                             tag_count=header["tag_count"],
                             source_model_id=header["source_model_id"],
                             source_pretrained=header["source_pretrained"],
                             provenance=header.get("provenance", {}))
