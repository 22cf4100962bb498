"""Tokenization, vocabulary, word embeddings and the two-layer GRU encoder.

GRU cell (gates stacked as ``[z | r | n]`` along the last axis)::

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    n = tanh(x W_n + (r * h) U_n + b_n)
    h' = (1 - z) * n + z * h

The sentence vector is the mean of the top layer's outputs over the real
(non-padding) timesteps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK, PAD = "<unk>", "<pad>"
UNK_ID, PAD_ID = 0, 1

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; typos are kept as-is."""
    tokens = _TOKEN_RE.findall(text.lower())
    return tokens or [UNK]


@dataclass(frozen=True)
class Instruction:
    raw: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("an instruction must have at least one token")


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [UNK, PAD]
        self.stoi: dict[str, int] = {UNK: UNK_ID, PAD: PAD_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        keep = sorted(t for t, c in counts.items() if c >= min_count and t not in (UNK, PAD))
        return cls(keep)

    def encode(self, text: str) -> Instruction:
        ids = tuple(self.stoi.get(tok, UNK_ID) for tok in tokenize(text))
        return Instruction(text, ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if lines[:2] != [UNK, PAD]:
            raise ValueError(f"{path}: vocabulary must start with {UNK} and {PAD}")
        return cls(lines[2:])


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = True
    oov: np.ndarray | None = None  # rows that were not found in a pretrained file

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


class EmbeddingFormatError(ValueError):
    pass


def random_embeddings(vocab: Vocabulary, dim: int, rng: np.random.Generator, scale: float = 0.1) -> EmbeddingTable:
    return EmbeddingTable(rng.normal(0.0, scale, size=(len(vocab), dim)), trainable=True)


def load_embeddings(
    path: str | Path,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
    expected_dim: int | None = 50,
    oov_scale: float = 0.1,
) -> EmbeddingTable:
    """Read a word-per-line text file (``token v1 ... vd``) into a frozen table.

    Tokens missing from the file get N(0, ``oov_scale``) rows and are marked
    in ``table.oov``.
    """
    rng = rng or np.random.default_rng(0)
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: cannot parse vector ({exc})") from None
            if len(vec) == 0:
                raise EmbeddingFormatError(f"{path}:{lineno}: token {token!r} has no vector")
            if dim is None:
                dim = len(vec)
                if expected_dim is not None and dim != expected_dim:
                    raise EmbeddingFormatError(f"{path}:{lineno}: expected {expected_dim} values, found {dim}")
            elif len(vec) != dim:
                raise EmbeddingFormatError(f"{path}:{lineno}: {len(vec)} values, earlier lines have {dim}")
            if token in vocab:
                found[token] = vec
    if dim is None:
        raise EmbeddingFormatError(f"{path}: no embedding lines")
    matrix = rng.normal(0.0, oov_scale, size=(len(vocab), dim))
    oov = np.ones(len(vocab), dtype=bool)
    for tok, vec in found.items():
        matrix[vocab.stoi[tok]] = vec
        oov[vocab.stoi[tok]] = False
    return EmbeddingTable(matrix, trainable=False, oov=oov)


def save_embeddings(words: Sequence[str], matrix: np.ndarray, path: str | Path) -> None:
    """Word-per-line text file, written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for w, row in zip(words, matrix):
            fh.write(w + " " + " ".join(f"{v:.6f}" for v in row) + "\n")
    tmp.replace(path)


def cooccurrence_embeddings(texts: Iterable[str], dim: int = 50, window: int = 2) -> tuple[list[str], np.ndarray]:
    """Count-based word vectors: positive PMI of windowed co-occurrence, then SVD.

    Used to produce a pretrained-style file when no external GloVe file is
    supplied.
    """
    sents = [tokenize(t) for t in texts]
    words = sorted({w for s in sents for w in s})
    index = {w: i for i, w in enumerate(words)}
    counts = np.zeros((len(words), len(words)))
    for s in sents:
        ids = [index[w] for w in s]
        for i, wi in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    counts[wi, ids[j]] += 1.0 / abs(i - j)
    total = counts.sum()
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
    k = min(dim, len(s))
    vecs = np.zeros((len(words), dim))
    vecs[:, :k] = u[:, :k] * np.sqrt(s[:k])
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = vecs / np.where(norms > 0, norms, 1.0)
    return words, vecs


# -- GRU ---------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_gru_layer(d_in: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(hidden)
    return {
        "W": rng.uniform(-bound, bound, size=(d_in, 3 * hidden)),
        "U": rng.uniform(-bound, bound, size=(hidden, 3 * hidden)),
        "b": np.zeros(3 * hidden),
    }


def gru_layer_forward(x: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray):
    """Run one GRU layer over ``x`` of shape (B, T, d_in) from a zero state.

    Returns the outputs (B, T, H) and a cache for the backward pass.
    """
    B, T, _ = x.shape
    H = U.shape[0]
    xa = x @ W + b  # input contributions for all steps at once
    hs = np.zeros((B, T + 1, H))
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    Uzr = U[:, : 2 * H]
    Un = U[:, 2 * H :]
    for t in range(T):
        h = hs[:, t]
        zr = sigmoid(xa[:, t, : 2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(xa[:, t, 2 * H :] + (r * h) @ Un)
        hs[:, t + 1] = (1.0 - z) * n + z * h
        zs[:, t], rs[:, t], ns[:, t] = z, r, n
    return hs[:, 1:], (x, W, U, hs, zs, rs, ns)


def gru_layer_backward(dout: np.ndarray, cache):
    """Gradients w.r.t. (x, W, U, b) given dL/d outputs of shape (B, T, H)."""
    x, W, U, hs, zs, rs, ns = cache
    B, T, H = dout.shape
    Uz, Ur, Un = U[:, :H], U[:, H : 2 * H], U[:, 2 * H :]
    da = np.empty((B, T, 3 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dout[:, t]
        h_prev = hs[:, t]
        z, r, n = zs[:, t], rs[:, t], ns[:, t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dan = dn * (1.0 - n * n)
        drh = dan @ Un.T
        daz = dz * z * (1.0 - z)
        dar = drh * h_prev * r * (1.0 - r)
        dU[:, :H] += h_prev.T @ daz
        dU[:, H : 2 * H] += h_prev.T @ dar
        dU[:, 2 * H :] += (r * h_prev).T @ dan
        dh = dh * z + drh * r + daz @ Uz.T + dar @ Ur.T
        da[:, t, :H] = daz
        da[:, t, H : 2 * H] = dar
        da[:, t, 2 * H :] = dan
    flat_da = da.reshape(B * T, 3 * H)
    dW = x.reshape(B * T, -1).T @ flat_da
    db = flat_da.sum(axis=0)
    dx = da @ W.T
    return dx, dW, dU, db


def pad_batch(instructions: Sequence[Instruction]) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded token ids (B, T) and a float mask of real positions."""
    T = max(len(i.tokens) for i in instructions)
    ids = np.full((len(instructions), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(instructions), T))
    for k, ins in enumerate(instructions):
        ids[k, : len(ins.tokens)] = ins.tokens
        mask[k, : len(ins.tokens)] = 1.0
    return ids, mask


def encode_forward(params: dict[str, np.ndarray], ids: np.ndarray, mask: np.ndarray, n_layers: int = 2):
    """Sentence vectors (B, H) for padded token ids, plus a backward cache."""
    x = params["emb"][ids]
    caches = []
    for layer in range(n_layers):
        p = f"gru{layer}_"
        x, cache = gru_layer_forward(x, params[p + "W"], params[p + "U"], params[p + "b"])
        caches.append(cache)
    lengths = mask.sum(axis=1, keepdims=True)
    out = (x * mask[:, :, None]).sum(axis=1) / lengths
    return out, (ids, mask, lengths, caches)


def encode_backward(dout: np.ndarray, cache, grads: dict[str, np.ndarray], train_embeddings: bool = True) -> None:
    """Accumulate encoder gradients into ``grads`` given dL/d sentence vector."""
    ids, mask, lengths, caches = cache
    dx = (dout / lengths)[:, None, :] * mask[:, :, None]
    for layer in range(len(caches) - 1, -1, -1):
        p = f"gru{layer}_"
        dx, dW, dU, db = gru_layer_backward(dx, caches[layer])
        grads[p + "W"] += dW
        grads[p + "U"] += dU
        grads[p + "b"] += db
    if train_embeddings:
        np.add.at(grads["emb"], ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))


def encode_instruction(instr: Instruction, emb: EmbeddingTable | np.ndarray, gru: dict[str, np.ndarray]) -> np.ndarray:
    """Encode one instruction; ``gru`` holds ``gru{k}_W/U/b`` for each layer."""
    matrix = emb.matrix if isinstance(emb, EmbeddingTable) else emb
    params = dict(gru, emb=matrix)
    n_layers = sum(1 for k in gru if k.endswith("_U"))
    ids, mask = pad_batch([instr])
    out, _ = encode_forward(params, ids, mask, n_layers)
    return out[0]
