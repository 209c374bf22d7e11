"""Compact three-head network over concatenated source/target tokens.

Input layout is ``[CLS] src [SEP] tgt [SEP] pad...``. A small trainable
encoder (token + learned positional embeddings, then blocks of
single-head self-attention and a two-layer feed-forward, both with
residuals) produces per-position states H. Three heads read H:

- sentence: affine regression on the [CLS] state,
- word: per-position OK/BAD softmax over source and target tokens,
- emotion: 5-way softmax over the masked max-pool of H.

All gradients are computed analytically. ``backward_per_task`` returns
the exact per-task gradients of the *shared* parameters as columns of a
single matrix, which is what the aggregators consume; the backward pass
for all tasks is fused by stacking the head seeds along a leading task
axis (the encoder backward is linear in the output gradient).

The feed-forward nonlinearity is tanh: the losses must stay smooth so
central finite differences can certify every analytic gradient.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import BAD, EMOTIONS, OK, QEInstance

TASKS = ("sentence", "word", "emotion")
PAD, CLS, SEP, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<cls>", "<sep>", "<unk>")
LOGP_FLOOR = -30.0


class SequenceTooLong(ValueError):
    """Encoded instance exceeds the configured maximum length."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    d_ff: int | None = None  # defaults to 2 * d_model
    max_len: int = 200
    n_emotions: int = 5
    pooling: str = "max"
    enabled_tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        if self.vocab_size < len(SPECIALS):
            raise ValueError("vocab_size must cover the special tokens")
        if self.d_model < 1 or self.n_layers < 0 or self.max_len < 4:
            raise ValueError("bad encoder dimensions")
        if self.n_emotions != len(EMOTIONS):
            raise ValueError(f"n_emotions must be {len(EMOTIONS)}")
        if self.pooling != "max":
            raise ValueError("only max pooling is supported")
        tasks = tuple(self.enabled_tasks)
        if not tasks or any(t not in TASKS for t in tasks):
            raise ValueError(f"enabled_tasks must be a nonempty subset of {TASKS}")
        if len(set(tasks)) != len(tasks):
            raise ValueError("enabled_tasks has duplicates")
        object.__setattr__(self, "enabled_tasks", tuple(t for t in TASKS if t in tasks))

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 2 * self.d_model


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # includes specials at the front

    def __post_init__(self):
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def index(self) -> dict:
        return self._index

    def __len__(self) -> int:
        return len(self.tokens)


def build_vocab(instances) -> Vocabulary:
    """Vocabulary from the training split; unknown tokens map to <unk>."""
    seen = set()
    for inst in instances:
        seen.update(inst.src_tokens)
        seen.update(inst.tgt_tokens)
    return Vocabulary(tokens=SPECIALS + tuple(sorted(seen)))


@dataclass(frozen=True)
class EncodedInstance:
    ids: np.ndarray  # (L,) int64
    word_mask: np.ndarray  # (L,) bool, True on src/tgt token positions
    word_labels: np.ndarray  # (L,) int8, 0=OK 1=BAD, -1 off word positions
    emotion: int
    qe_score: float


def encode_instance(inst: QEInstance, vocab: Vocabulary, max_len: int) -> EncodedInstance:
    length = len(inst.src_tokens) + len(inst.tgt_tokens) + 3
    if length > max_len:
        raise SequenceTooLong(f"encoded length {length} exceeds max_len {max_len}")
    index = vocab.index
    ids = np.empty(length, dtype=np.int64)
    word_mask = np.zeros(length, dtype=bool)
    word_labels = np.full(length, -1, dtype=np.int8)
    ids[0] = CLS
    pos = 1
    for tokens, labels in (
        (inst.src_tokens, inst.src_labels),
        (inst.tgt_tokens, inst.tgt_labels),
    ):
        for tok, lab in zip(tokens, labels):
            ids[pos] = index.get(tok, UNK)
            word_mask[pos] = True
            word_labels[pos] = 1 if lab == BAD else 0
            pos += 1
        ids[pos] = SEP
        pos += 1
    return EncodedInstance(
        ids=ids,
        word_mask=word_mask,
        word_labels=word_labels,
        emotion=EMOTIONS.index(inst.emotion),
        qe_score=inst.qe_score,
    )


@dataclass(frozen=True)
class EncodedBatch:
    ids: np.ndarray  # (B, L) int64, PAD-filled
    mask: np.ndarray  # (B, L) bool, True on real (non-pad) positions
    word_mask: np.ndarray  # (B, L) bool


@dataclass(frozen=True)
class TaskTargets:
    qe_score: np.ndarray | None = None  # (B,) regression targets
    word_labels: np.ndarray | None = None  # (B, L) int8, -1 off word positions
    emotion: np.ndarray | None = None  # (B,) int64 class ids


def make_batch(encoded: list[EncodedInstance], normalize_score=None):
    """Pad encoded instances to a common length; returns (batch, targets)."""
    b = len(encoded)
    length = max(e.ids.size for e in encoded)
    ids = np.full((b, length), PAD, dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    word_mask = np.zeros((b, length), dtype=bool)
    word_labels = np.full((b, length), -1, dtype=np.int8)
    scores = np.empty(b)
    emotions = np.empty(b, dtype=np.int64)
    for i, e in enumerate(encoded):
        n = e.ids.size
        ids[i, :n] = e.ids
        mask[i, :n] = True
        word_mask[i, :n] = e.word_mask
        word_labels[i, :n] = e.word_labels
        scores[i] = e.qe_score
        emotions[i] = e.emotion
    if normalize_score is not None:
        scores = normalize_score(scores)
    batch = EncodedBatch(ids=ids, mask=mask, word_mask=word_mask)
    targets = TaskTargets(qe_score=scores, word_labels=word_labels, emotion=emotions)
    return batch, targets


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------


@dataclass
class ParamBlock:
    """A flat float64 vector plus named reshaped views into it."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    flat: np.ndarray

    @staticmethod
    def zeros(layout) -> "ParamBlock":
        names = tuple(name for name, _ in layout)
        shapes = tuple(tuple(shape) for _, shape in layout)
        total = sum(int(np.prod(s)) for s in shapes)
        return ParamBlock(names=names, shapes=shapes, flat=np.zeros(total))

    def view(self, name: str) -> np.ndarray:
        offset = 0
        for n, s in zip(self.names, self.shapes):
            size = int(np.prod(s))
            if n == name:
                return self.flat[offset : offset + size].reshape(s)
            offset += size
        raise KeyError(name)

    def views(self) -> dict:
        out = {}
        offset = 0
        for n, s in zip(self.names, self.shapes):
            size = int(np.prod(s))
            out[n] = self.flat[offset : offset + size].reshape(s)
            offset += size
        return out

    @property
    def size(self) -> int:
        return self.flat.size


def shared_layout(cfg: ModelConfig):
    d, f = cfg.d_model, cfg.ffn_dim
    layout = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_len, d))]
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        layout += [
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "w1", (d, f)), (p + "b1", (f,)),
            (p + "w2", (f, d)), (p + "b2", (d,)),
        ]
    return layout


def head_layout(cfg: ModelConfig, task: str):
    d = cfg.d_model
    out = {"sentence": 1, "word": 2, "emotion": cfg.n_emotions}[task]
    return [("w", (d, out)), ("b", (out,))]


@dataclass
class Parameters:
    config: ModelConfig
    shared: ParamBlock
    heads: dict  # task -> ParamBlock

    @property
    def n_shared(self) -> int:
        return self.shared.size


def xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1] if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> Parameters:
    """Deterministic init: embeddings N(0, 0.02^2), linear weights
    Xavier-uniform, all biases zero."""
    rng = np.random.default_rng(seed)
    shared = ParamBlock.zeros(shared_layout(cfg))
    views = shared.views()
    views["tok_emb"][:] = rng.normal(0.0, 0.02, size=views["tok_emb"].shape)
    views["pos_emb"][:] = rng.normal(0.0, 0.02, size=views["pos_emb"].shape)
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            v = views[p + name]
            v[:] = xavier_uniform(rng, v.shape)
    heads = {}
    for task in cfg.enabled_tasks:
        block = ParamBlock.zeros(head_layout(cfg, task))
        w = block.view("w")
        w[:] = xavier_uniform(rng, w.shape)
        heads[task] = block
    return Parameters(config=cfg, shared=shared, heads=heads)


# ----------------------------------------------------------------------
# forward / losses / backward
# ----------------------------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class Predictions:
    sentence: np.ndarray | None = None  # (B,)
    word_probs: np.ndarray | None = None  # (B, L, 2)
    emotion_probs: np.ndarray | None = None  # (B, n_emotions)


@dataclass
class TaskLosses:
    sentence: float | None = None
    word: float | None = None
    emotion: float | None = None

    def enabled(self) -> dict:
        return {t: v for t, v in self.__dict__.items() if v is not None}


def forward(params: Parameters, batch: EncodedBatch):
    """Run the encoder and every enabled head; returns (Predictions, cache)."""
    cfg = params.config
    ids, mask = batch.ids, batch.mask
    b, length = ids.shape
    if length > cfg.max_len:
        raise SequenceTooLong(f"batch length {length} exceeds max_len {cfg.max_len}")
    views = params.shared.views()
    x = views["tok_emb"][ids] + views["pos_emb"][:length][None, :, :]
    scale = 1.0 / np.sqrt(cfg.d_model)
    key_bias = np.where(mask, 0.0, -1e30)[:, None, :]  # (B, 1, L)
    layers = []
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        q = x @ views[p + "wq"] + views[p + "bq"]
        k = x @ views[p + "wk"] + views[p + "bk"]
        v = x @ views[p + "wv"] + views[p + "bv"]
        scores = (q @ k.transpose(0, 2, 1)) * scale + key_bias
        probs = softmax(scores, axis=-1)
        attn = probs @ v
        x1 = x + (attn @ views[p + "wo"] + views[p + "bo"])
        hff = np.tanh(x1 @ views[p + "w1"] + views[p + "b1"])
        x2 = x1 + (hff @ views[p + "w2"] + views[p + "b2"])
        layers.append({"x": x, "q": q, "k": k, "v": v, "p": probs, "attn": attn,
                       "x1": x1, "hff": hff})
        x = x2
    h = x

    preds = Predictions()
    cache = {"batch": batch, "h": h, "layers": layers, "length": length}
    if "sentence" in cfg.enabled_tasks:
        hv = params.heads["sentence"].views()
        preds.sentence = h[:, 0, :] @ hv["w"][:, 0] + hv["b"][0]
    if "word" in cfg.enabled_tasks:
        hv = params.heads["word"].views()
        preds.word_probs = softmax(h @ hv["w"] + hv["b"], axis=-1)
    if "emotion" in cfg.enabled_tasks:
        hv = params.heads["emotion"].views()
        masked = np.where(mask[:, :, None], h, -np.inf)
        pool_idx = np.argmax(masked, axis=1)  # (B, d)
        pooled = np.take_along_axis(h, pool_idx[:, None, :], axis=1)[:, 0, :]
        preds.emotion_probs = softmax(pooled @ hv["w"] + hv["b"], axis=-1)
        cache["pool_idx"] = pool_idx
        cache["pooled"] = pooled
    return preds, cache


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.maximum(np.log(np.maximum(p, 1e-300)), LOGP_FLOOR)


def task_losses(preds: Predictions, targets: TaskTargets, batch: EncodedBatch) -> TaskLosses:
    """Batch-mean losses: MSE for the sentence score, per-instance mean
    cross entropy for word labels, cross entropy for the emotion class."""
    out = TaskLosses()
    b = batch.ids.shape[0]
    if preds.sentence is not None:
        diff = preds.sentence - targets.qe_score
        out.sentence = float(np.mean(diff * diff))
    if preds.word_probs is not None:
        wm = batch.word_mask
        labels = np.maximum(targets.word_labels, 0)
        p_true = np.take_along_axis(preds.word_probs, labels[:, :, None].astype(np.int64), axis=2)[:, :, 0]
        logp = np.where(wm, _clamped_log(p_true), 0.0)
        counts = np.maximum(wm.sum(axis=1), 1)
        out.word = float(np.mean(-logp.sum(axis=1) / counts))
    if preds.emotion_probs is not None:
        p_true = preds.emotion_probs[np.arange(b), targets.emotion]
        out.emotion = float(np.mean(-_clamped_log(p_true)))
    return out


def backward_per_task(params: Parameters, cache: dict, targets: TaskTargets):
    """Exact per-task gradients.

    Returns ``(g, head_grads)`` where ``g`` has one column per enabled
    task holding that task's loss gradient with respect to the flattened
    shared parameters, and ``head_grads`` maps each task to the gradient
    of its own head block. Head seeds are stacked on a leading task axis
    so the encoder backward runs once for all tasks.
    """
    cfg = params.config
    batch: EncodedBatch = cache["batch"]
    h = cache["h"]
    b, length, d = h.shape
    tasks = cfg.enabled_tasks
    kt = len(tasks)
    views = params.shared.views()

    dh = np.zeros((kt, b, length, d))
    head_grads = {}
    for ki, task in enumerate(tasks):
        hv = params.heads[task].views()
        hgrad = ParamBlock.zeros(head_layout(cfg, task))
        gw, gb = hgrad.view("w"), hgrad.view("b")
        if task == "sentence":
            pred = h[:, 0, :] @ hv["w"][:, 0] + hv["b"][0]
            dpred = 2.0 * (pred - targets.qe_score) / b
            gw[:, 0] = h[:, 0, :].T @ dpred
            gb[0] = dpred.sum()
            dh[ki, :, 0, :] = dpred[:, None] * hv["w"][None, :, 0]
        elif task == "word":
            probs = softmax(h @ hv["w"] + hv["b"], axis=-1)
            wm = batch.word_mask
            labels = np.maximum(targets.word_labels, 0).astype(np.int64)
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, labels[:, :, None], 1.0, axis=2)
            counts = np.maximum(wm.sum(axis=1), 1).astype(np.float64)
            dz = (probs - onehot) * wm[:, :, None] / (counts[:, None, None] * b)
            gw[:] = h.reshape(-1, d).T @ dz.reshape(-1, dz.shape[-1])
            gb[:] = dz.sum(axis=(0, 1))
            dh[ki] = dz @ hv["w"].T
        elif task == "emotion":
            pooled = cache["pooled"]
            probs = softmax(pooled @ hv["w"] + hv["b"], axis=-1)
            dz = probs.copy()
            dz[np.arange(b), targets.emotion] -= 1.0
            dz /= b
            gw[:] = pooled.T @ dz
            gb[:] = dz.sum(axis=0)
            dpool = dz @ hv["w"].T  # (B, d)
            idx = cache["pool_idx"]  # (B, d)
            # (b, idx[b, j], j) triples are unique, so fancy += is safe
            dh[ki][np.arange(b)[:, None], idx, np.arange(d)[None, :]] += dpool
        head_grads[task] = hgrad.flat

    shared_grads = {
        name: np.zeros((kt,) + shape)
        for name, shape in zip(params.shared.names, params.shared.shapes)
    }
    scale = 1.0 / np.sqrt(cfg.d_model)
    dy = dh
    for layer in range(cfg.n_layers - 1, -1, -1):
        p = f"layer{layer}."
        c = cache["layers"][layer]
        x, q, k, v, probs, attn, x1, hff = (
            c["x"], c["q"], c["k"], c["v"], c["p"], c["attn"], c["x1"], c["hff"],
        )
        f = hff.shape[-1]
        w1, w2, wo = views[p + "w1"], views[p + "w2"], views[p + "wo"]
        wq, wk, wv = views[p + "wq"], views[p + "wk"], views[p + "wv"]

        df = dy
        shared_grads[p + "w2"][:] = np.matmul(
            hff.reshape(1, -1, f).transpose(0, 2, 1), df.reshape(kt, -1, d)
        )
        shared_grads[p + "b2"][:] = df.sum(axis=(1, 2))
        dz1 = (df @ w2.T) * (1.0 - hff * hff)
        shared_grads[p + "w1"][:] = np.matmul(
            x1.reshape(1, -1, d).transpose(0, 2, 1), dz1.reshape(kt, -1, f)
        )
        shared_grads[p + "b1"][:] = dz1.sum(axis=(1, 2))
        dx1 = dy + dz1 @ w1.T

        da = dx1
        shared_grads[p + "wo"][:] = np.matmul(
            attn.reshape(1, -1, d).transpose(0, 2, 1), da.reshape(kt, -1, d)
        )
        shared_grads[p + "bo"][:] = da.sum(axis=(1, 2))
        do = da @ wo.T
        dp = np.matmul(do, v.transpose(0, 2, 1)[None])
        dv = np.matmul(probs.transpose(0, 2, 1)[None], do)
        ds = (dp - np.sum(dp * probs[None], axis=-1, keepdims=True)) * probs[None]
        dq = np.matmul(ds, k[None]) * scale
        dk = np.matmul(ds.transpose(0, 1, 3, 2), q[None]) * scale

        dx = dx1.copy()
        for name, dzed, weight in (("q", dq, wq), ("k", dk, wk), ("v", dv, wv)):
            shared_grads[p + "w" + name][:] = np.matmul(
                x.reshape(1, -1, d).transpose(0, 2, 1), dzed.reshape(kt, -1, d)
            )
            shared_grads[p + "b" + name][:] = dzed.sum(axis=(1, 2))
            dx += dzed @ weight.T
        dy = dx

    shared_grads["pos_emb"][:, :length, :] = dy.sum(axis=1)
    ids_flat = batch.ids.reshape(-1)
    for ki in range(kt):
        np.add.at(shared_grads["tok_emb"][ki], ids_flat, dy[ki].reshape(-1, d))

    g = np.empty((params.n_shared, kt))
    for ki in range(kt):
        g[:, ki] = np.concatenate(
            [shared_grads[name][ki].ravel() for name in params.shared.names]
        )
    return g, head_grads


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(params: Parameters, bin_path, manifest_path, extra: dict | None = None):
    """Flat float64 little-endian vector (shared block then heads in task
    order) plus a JSON manifest describing the layout."""
    blocks = [("shared", params.shared)] + [
        (f"head.{task}", params.heads[task]) for task in params.config.enabled_tasks
    ]
    flat = np.concatenate([blk.flat for _, blk in blocks])
    flat.astype("<f8").tofile(bin_path)
    manifest = {
        "format": 1,
        "dtype": "<f8",
        "total_size": int(flat.size),
        "blocks": [],
        "config": {
            "vocab_size": params.config.vocab_size,
            "d_model": params.config.d_model,
            "n_layers": params.config.n_layers,
            "d_ff": params.config.d_ff,
            "max_len": params.config.max_len,
            "n_emotions": params.config.n_emotions,
            "pooling": params.config.pooling,
            "enabled_tasks": list(params.config.enabled_tasks),
        },
    }
    offset = 0
    for label, blk in blocks:
        entries = []
        inner = 0
        for name, shape in zip(blk.names, blk.shapes):
            size = int(np.prod(shape))
            entries.append({"name": name, "shape": list(shape), "offset": offset + inner})
            inner += size
        manifest["blocks"].append({"block": label, "offset": offset, "size": blk.size,
                                   "params": entries})
        offset += blk.size
    if extra:
        manifest.update(extra)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(bin_path, manifest_path):
    """Rebuild Parameters (and the manifest dict) from a checkpoint pair."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfgdict = manifest["config"]
    cfg = ModelConfig(
        vocab_size=cfgdict["vocab_size"],
        d_model=cfgdict["d_model"],
        n_layers=cfgdict["n_layers"],
        d_ff=cfgdict["d_ff"],
        max_len=cfgdict["max_len"],
        n_emotions=cfgdict["n_emotions"],
        pooling=cfgdict["pooling"],
        enabled_tasks=tuple(cfgdict["enabled_tasks"]),
    )
    flat = np.fromfile(bin_path, dtype="<f8")
    if flat.size != manifest["total_size"]:
        raise ValueError(
            f"checkpoint has {flat.size} values, manifest expects {manifest['total_size']}"
        )
    params = Parameters(config=cfg, shared=ParamBlock.zeros(shared_layout(cfg)), heads={})
    for entry in manifest["blocks"]:
        chunk = flat[entry["offset"] : entry["offset"] + entry["size"]]
        if entry["block"] == "shared":
            params.shared.flat[:] = chunk
        else:
            task = entry["block"].split(".", 1)[1]
            block = ParamBlock.zeros(head_layout(cfg, task))
            block.flat[:] = chunk
            params.heads[task] = block
    return params, manifest


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
