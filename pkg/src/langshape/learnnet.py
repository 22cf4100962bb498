"""The LEARN relatedness classifier.

Architecture: frequency vector -> ReLU FC stack (width D1); instruction ->
embeddings -> 2-layer GRU -> mean over time (width D2); concatenation ->
ReLU FC stack (width D3) -> 2-way softmax over (UNRELATED, RELATED).

Everything is float64 numpy with hand-written backpropagation.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lang
from .dataset import RELATED, UNRELATED, LabeledPair
from .env import N_ACTIONS
from .lang import Instruction, Vocabulary
from .optim import Adam

log = logging.getLogger(__name__)

RNN_ONLY = "RNNOnly"
GLOVE_RNN = "GloVe+RNN"
ENCODER_MODES = (RNN_ONLY, GLOVE_RNN)
CHECKPOINT_VERSION = 1


class ModelCorruptionError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class LearnConfig:
    d1: int = 64
    d2: int = 64
    d3: int = 128
    n_action_fc_layers: int = 2
    n_fusion_fc_layers: int = 2
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    encoder_mode: str = RNN_ONLY
    d_word: int = 32
    rng_seed: int = 0
    embeddings_path: str | None = None

    def validate(self) -> None:
        for name in ("d1", "d2", "d3", "d_word", "epochs", "batch_size", "n_action_fc_layers", "n_fusion_fc_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"LearnConfig.{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("LearnConfig.lr must be positive")
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder_mode must be one of {ENCODER_MODES}, got {self.encoder_mode!r}")
        if self.encoder_mode == GLOVE_RNN and not self.embeddings_path:
            raise ValueError("GloVe+RNN mode needs embeddings_path")


@dataclass
class RelatednessScore:
    p_R: float
    p_U: float


def _fc_init(fan_in, fan_out, rng, relu=True):
    bound = np.sqrt(6.0 / fan_in) if relu else 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class LearnModel:
    config: LearnConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()
    _lang_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def init(cls, config: LearnConfig, vocab: Vocabulary, rng: np.random.Generator,
             embeddings: lang.EmbeddingTable | None = None) -> "LearnModel":
        config.validate()
        p: dict[str, np.ndarray] = {}
        width = N_ACTIONS
        for k in range(config.n_action_fc_layers):
            p[f"act{k}_W"], p[f"act{k}_b"] = _fc_init(width, config.d1, rng)
            width = config.d1
        if embeddings is None:
            embeddings = lang.random_embeddings(vocab, config.d_word, rng)
        if embeddings.matrix.shape[0] != len(vocab):
            raise ValueError("embedding table rows do not match the vocabulary")
        p["emb"] = embeddings.matrix.astype(np.float64).copy()
        d_in = p["emb"].shape[1]
        for k in range(2):
            layer = lang.init_gru_layer(d_in, config.d2, rng)
            for name, arr in layer.items():
                p[f"gru{k}_{name}"] = arr
            d_in = config.d2
        width = config.d1 + config.d2
        for k in range(config.n_fusion_fc_layers):
            p[f"fus{k}_W"], p[f"fus{k}_b"] = _fc_init(width, config.d3, rng)
            width = config.d3
        p["out_W"], p["out_b"] = _fc_init(width, 2, rng, relu=False)
        frozen = frozenset({"emb"}) if config.encoder_mode == GLOVE_RNN else frozenset()
        return cls(config, vocab, p, frozen)

    # -- helpers -----------------------------------------------------------
    @property
    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def instruction(self, text: str | Instruction) -> Instruction:
        return text if isinstance(text, Instruction) else self.vocab.encode(text)

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ModelCorruptionError(f"parameter {k} contains non-finite values")

    def invalidate_cache(self) -> None:
        self._lang_cache.clear()

    def language_vector(self, text: str | Instruction) -> np.ndarray:
        """Cached sentence encoding; valid while the parameters are unchanged."""
        instr = self.instruction(text)
        key = instr.tokens
        if key not in self._lang_cache:
            ids, mask = lang.pad_batch([instr])
            out, _ = lang.encode_forward(self.params, ids, mask)
            self._lang_cache[key] = out[0]
        return self._lang_cache[key]

    def action_encoding(self, F: np.ndarray) -> np.ndarray:
        a = np.asarray(F, dtype=np.float64)
        for k in range(self.config.n_action_fc_layers):
            a = np.maximum(a @ self.params[f"act{k}_W"] + self.params[f"act{k}_b"], 0.0)
        return a

    def logits_with_language(self, F: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Logits for a batch of frequency vectors sharing one sentence vector ``u``."""
        a = self.action_encoding(F)
        x = np.concatenate([a, np.broadcast_to(u, (a.shape[0], u.shape[-1]))], axis=1)
        for k in range(self.config.n_fusion_fc_layers):
            x = np.maximum(x @ self.params[f"fus{k}_W"] + self.params[f"fus{k}_b"], 0.0)
        return x @ self.params["out_W"] + self.params["out_b"]

    def probabilities(self, F: np.ndarray, text: str | Instruction) -> np.ndarray:
        """(N, 2) class probabilities, column index = label (UNRELATED, RELATED)."""
        F = np.atleast_2d(F)
        return np.exp(log_softmax(self.logits_with_language(F, self.language_vector(text))))

    def potential_batch(self, F: np.ndarray, text: str | Instruction) -> np.ndarray:
        p = self.probabilities(F, text)
        return p[:, RELATED] - p[:, UNRELATED]


def forward(model: LearnModel, f: np.ndarray, l: str | Instruction) -> RelatednessScore:
    model.check_finite()
    p = model.probabilities(np.asarray(f, dtype=np.float64)[None, :], l)[0]
    return RelatednessScore(p_R=float(p[RELATED]), p_U=float(p[UNRELATED]))


# -- batched training math ---------------------------------------------------

@dataclass
class Batch:
    F: np.ndarray  # (N, 18)
    labels: np.ndarray  # (N,)
    ids: np.ndarray  # (U, T) padded tokens of the distinct instructions
    mask: np.ndarray  # (U, T)
    inverse: np.ndarray  # (N,) row of each pair's instruction in ids

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(model: LearnModel, pairs: Sequence[LabeledPair]) -> Batch:
    if not pairs:
        raise ValueError("empty batch")
    texts = [p.text for p in pairs]
    uniq = sorted(set(texts))
    pos = {t: i for i, t in enumerate(uniq)}
    ids, mask = lang.pad_batch([model.vocab.encode(t) for t in uniq])
    return Batch(
        F=np.stack([p.f for p in pairs]).astype(np.float64),
        labels=np.array([p.label for p in pairs], dtype=np.int64),
        ids=ids,
        mask=mask,
        inverse=np.array([pos[t] for t in texts], dtype=np.int64),
    )


def _forward_train(params, cfg: LearnConfig, batch: Batch):
    acts = []
    a = batch.F
    for k in range(cfg.n_action_fc_layers):
        z = a @ params[f"act{k}_W"] + params[f"act{k}_b"]
        acts.append((a, z))
        a = np.maximum(z, 0.0)
    u_uniq, enc_cache = lang.encode_forward(params, batch.ids, batch.mask)
    x = np.concatenate([a, u_uniq[batch.inverse]], axis=1)
    fus = []
    for k in range(cfg.n_fusion_fc_layers):
        z = x @ params[f"fus{k}_W"] + params[f"fus{k}_b"]
        fus.append((x, z))
        x = np.maximum(z, 0.0)
    logits = x @ params["out_W"] + params["out_b"]
    return logits, (acts, enc_cache, fus, x)


def _loss_from_logits(logits, labels):
    lp = log_softmax(logits)
    return -lp[np.arange(len(labels)), labels].mean(), lp


def loss(model: LearnModel, pairs: Sequence[LabeledPair] | Batch) -> float:
    """Mean cross-entropy -mean(log p_label)."""
    batch = pairs if isinstance(pairs, Batch) else make_batch(model, pairs)
    logits, _ = _forward_train(model.params, model.config, batch)
    return float(_loss_from_logits(logits, batch.labels)[0])


def loss_and_gradient(model: LearnModel, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    cfg, params = model.config, model.params
    logits, (acts, enc_cache, fus, x_top) = _forward_train(params, cfg, batch)
    value, lp = _loss_from_logits(logits, batch.labels)
    n = len(batch.labels)
    dlogits = np.exp(lp)
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n
    grads = {k: np.zeros_like(v) for k, v in params.items() if k not in model.frozen}
    grads["out_W"] += x_top.T @ dlogits
    grads["out_b"] += dlogits.sum(axis=0)
    dx = dlogits @ params["out_W"].T
    for k in range(cfg.n_fusion_fc_layers - 1, -1, -1):
        x_in, z = fus[k]
        dz = dx * (z > 0)
        grads[f"fus{k}_W"] += x_in.T @ dz
        grads[f"fus{k}_b"] += dz.sum(axis=0)
        dx = dz @ params[f"fus{k}_W"].T
    da = dx[:, : cfg.d1]
    du_rows = dx[:, cfg.d1 :]
    du = np.zeros((batch.ids.shape[0], cfg.d2))
    np.add.at(du, batch.inverse, du_rows)
    lang.encode_backward(du, enc_cache, grads, train_embeddings="emb" not in model.frozen)
    for k in range(cfg.n_action_fc_layers - 1, -1, -1):
        a_in, z = acts[k]
        dz = da * (z > 0)
        grads[f"act{k}_W"] += a_in.T @ dz
        grads[f"act{k}_b"] += dz.sum(axis=0)
        da = dz @ params[f"act{k}_W"].T
    return float(value), grads


def gradient(model: LearnModel, pairs: Sequence[LabeledPair] | Batch) -> dict[str, np.ndarray]:
    """Analytic gradient of the mean loss for every trainable tensor."""
    batch = pairs if isinstance(pairs, Batch) else make_batch(model, pairs)
    return loss_and_gradient(model, batch)[1]


def numerical_gradient(model: LearnModel, pairs: Sequence[LabeledPair] | Batch, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of :func:`loss`, one coordinate at a time."""
    batch = pairs if isinstance(pairs, Batch) else make_batch(model, pairs)
    out = {}
    for name in model.trainable:
        arr = model.params[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss(model, batch)
            flat[i] = old - h
            down = loss(model, batch)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def evaluate(model: LearnModel, pairs: Sequence[LabeledPair], batch_size: int = 1024) -> float:
    """Fraction of pairs whose argmax class equals the label."""
    if not pairs:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(model, pairs[start : start + batch_size])
        logits, _ = _forward_train(model.params, model.config, batch)
        correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
    return correct / len(pairs)


def evaluate_loss(model: LearnModel, pairs: Sequence[LabeledPair], batch_size: int = 1024) -> float:
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        total += loss(model, chunk) * len(chunk)
    return total / len(pairs)


# -- training ----------------------------------------------------------------

def build_model(config: LearnConfig, texts: Sequence[str], rng: np.random.Generator) -> LearnModel:
    """Vocabulary from ``texts`` (plus the pretrained file's words in GloVe+RNN mode)."""
    vocab = Vocabulary.build(texts)
    embeddings = None
    if config.encoder_mode == GLOVE_RNN:
        with open(config.embeddings_path, encoding="utf-8") as fh:
            for line in fh:
                tok = line.split(" ", 1)[0]
                if tok:
                    vocab.add(tok)
        embeddings = lang.load_embeddings(config.embeddings_path, vocab, rng, expected_dim=None)
    return LearnModel.init(config, vocab, rng, embeddings)


def train(config: LearnConfig, train_pairs: Sequence[LabeledPair], val_pairs: Sequence[LabeledPair],
          rng: np.random.Generator | None = None, model: LearnModel | None = None):
    """Minibatch Adam for ``config.epochs`` epochs.

    Returns the parameters of the epoch with the best validation accuracy
    and a per-epoch log of dicts (epoch, train_loss, val_loss, val_accuracy).
    """
    config.validate()
    if not train_pairs or not val_pairs:
        raise ValueError("training and validation sets must be non-empty")
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    if model is None:
        model = build_model(config, [p.text for p in train_pairs], rng)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps, frozen=model.frozen)
    # pre-pad every distinct instruction once; batches slice into it
    all_pairs = list(train_pairs)
    full = make_batch(model, all_pairs)
    lengths = full.mask.sum(axis=1).astype(int)
    best_acc, best_params, history = -1.0, None, []
    n = len(all_pairs)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            uniq, inverse = np.unique(full.inverse[idx], return_inverse=True)
            T = int(lengths[uniq].max())
            batch = Batch(full.F[idx], full.labels[idx], full.ids[uniq, :T], full.mask[uniq, :T], inverse.reshape(-1))
            value, grads = loss_and_gradient(model, batch)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step(model.params, grads)
            losses.append(value * len(idx))
        model.invalidate_cache()
        val_acc = evaluate(model, val_pairs)
        row = {
            "epoch": epoch,
            "train_loss": sum(losses) / n,
            "val_loss": evaluate_loss(model, val_pairs),
            "val_accuracy": val_acc,
        }
        history.append(row)
        log.info("epoch %d train_loss %.4f val_acc %.4f", epoch, row["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.copy() for k, v in model.params.items()}
    model.params = best_params
    model.invalidate_cache()
    return model, history


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: LearnModel, path: str | Path, extra: dict | None = None) -> None:
    """npz container: ``__meta__`` JSON (version, kind, config, vocab) + tensors."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": "learn",
        "config": asdict(model.config),
        "vocab": model.vocab.itos,
        "frozen": sorted(model.frozen),
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "extra": extra or {},
    }
    save_arrays(path, meta, model.params)


def load_checkpoint(path: str | Path) -> LearnModel:
    meta, arrays = load_arrays(path, kind="learn")
    config = LearnConfig(**meta["config"])
    vocab = Vocabulary(meta["vocab"][2:])
    ref = LearnModel.init(copy.deepcopy(config) if config.encoder_mode != GLOVE_RNN else _no_file(config),
                          vocab, np.random.default_rng(0),
                          lang.EmbeddingTable(arrays["emb"]))
    for k, v in ref.params.items():
        if k not in arrays:
            raise ValueError(f"{path}: missing tensor {k}")
        if arrays[k].shape != v.shape:
            raise ValueError(f"{path}: tensor {k} has shape {arrays[k].shape}, config implies {v.shape}")
    extra = set(arrays) - set(ref.params)
    if extra:
        raise ValueError(f"{path}: unexpected tensors {sorted(extra)}")
    return LearnModel(config, vocab, {k: arrays[k] for k in ref.params}, frozenset(meta["frozen"]))


def _no_file(config: LearnConfig) -> LearnConfig:
    # shape reconstruction only; the embeddings come from the checkpoint itself
    c = copy.deepcopy(config)
    c.embeddings_path = c.embeddings_path or "<checkpoint>"
    return c


def save_arrays(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    tmp.replace(path)


def load_arrays(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    if meta.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r} model, expected {kind!r}")
    return meta, arrays
