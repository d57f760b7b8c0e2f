"""Toy windowed-attention transformer classifier, from scratch in numpy.

Long token sequences are sliced into overlapping windows. Within a window
every token attends only to tokens within a fixed local radius plus a
global classification token, which attends to everything; cost is linear
in window length instead of quadratic. Window probabilities are aggregated
by mode to a patient-level label.

Training math runs in float64 with hand-written backprop so gradients can
be verified against central finite differences. A dense full-attention
reference implementation is kept alongside the banded one; both must agree
and the benchmark in the test suite measures the asymptotic gap.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .preprocess import CleanNote

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
RESERVED = ("<pad>", "<unk>", "<cls>")

MAGIC = b"CGS1"


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Vocabulary and window slicing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenVocab:
    token_to_id: dict[str, int]

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(3, 3 + len(ids))):
            raise ValueError("token ids must be dense starting after reserved ids")

    @property
    def size(self) -> int:
        return 3 + len(self.token_to_id)

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.token_to_id.get(t, UNK_ID) for t in tokens], dtype=np.int64)


def build_vocab(texts: list[str], min_freq: int = 2) -> TokenVocab:
    counts: dict[str, int] = {}
    for text in texts:
        for tok in text.split():
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(t for t, c in counts.items() if c >= min_freq)
    return TokenVocab(token_to_id={t: 3 + i for i, t in enumerate(kept)})


@dataclass(frozen=True)
class WindowConfig:
    window_len: int = 128
    overlap_fraction: float = 0.20

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")

    @property
    def stride(self) -> int:
        return max(1, int(self.window_len * (1.0 - self.overlap_fraction)))


def slice_windows(n_tokens: int, cfg: WindowConfig) -> list[tuple[int, int]]:
    """[start, end) spans at starts 0, stride, 2*stride, ...; the last window
    always ends at the final token and consecutive full windows share exactly
    window_len - stride tokens."""
    if n_tokens < 1:
        raise ValueError("empty token sequence")
    spans = []
    start = 0
    while True:
        end = min(start + cfg.window_len, n_tokens)
        spans.append((start, end))
        if start + cfg.window_len >= n_tokens:
            break
        start += cfg.stride
    return spans


# ---------------------------------------------------------------------------
# Model configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttnConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    local_radius: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.local_radius < 1:
            raise ValueError("local_radius must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    adam_eps: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


# Full-scale fine-tuning settings, usable as a named preset.
FULL_TRAIN_PRESET = TrainConfig(learning_rate=7.09e-6, adam_eps=1e-9, epochs=4)
FULL_WINDOW_PRESET = WindowConfig(window_len=4096, overlap_fraction=0.20)
DESK_TRAIN_PRESET = TrainConfig(learning_rate=3e-4, adam_eps=1e-8, epochs=4)
DESK_WINDOW_PRESET = WindowConfig(window_len=128, overlap_fraction=0.20)

_LAYER_KEYS = ("ln1_g", "ln1_b", "Wq", "bq", "Wk", "bk", "Wv", "bv",
               "Wo", "bo", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")
_FINAL_KEYS = ("lnf_g", "lnf_b", "w_cls", "b_cls")


def _param_order(cfg: AttnConfig) -> list[str]:
    keys = ["emb"]
    for l in range(cfg.n_layers):
        keys.extend(f"L{l}.{k}" for k in _LAYER_KEYS)
    keys.extend(_FINAL_KEYS)
    return keys


@dataclass
class AttnModel:
    cfg: AttnConfig
    params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)


def init_model(cfg: AttnConfig, seed: int = 0) -> AttnModel:
    rng = np.random.default_rng([seed, 0x171])
    d, dff = cfg.d_model, cfg.d_ff
    # embeddings are scaled by sqrt(d) in the forward pass, so after scaling
    # token vectors are O(1), on par with the positional encodings
    p: dict[str, np.ndarray] = {
        "emb": rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.vocab_size, d))}
    for l in range(cfg.n_layers):
        pre = f"L{l}."
        p[pre + "ln1_g"] = np.ones(d)
        p[pre + "ln1_b"] = np.zeros(d)
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + name] = rng.normal(0.0, 0.02, (d, d))
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + name] = np.zeros(d)
        p[pre + "ln2_g"] = np.ones(d)
        p[pre + "ln2_b"] = np.zeros(d)
        p[pre + "W1"] = rng.normal(0.0, 0.02, (d, dff))
        p[pre + "b1"] = np.zeros(dff)
        p[pre + "W2"] = rng.normal(0.0, 0.02, (dff, d))
        p[pre + "b2"] = np.zeros(d)
    p["lnf_g"] = np.ones(d)
    p["lnf_b"] = np.zeros(d)
    p["w_cls"] = rng.normal(0.0, 0.02, (d,))
    p["b_cls"] = np.zeros(())
    return AttnModel(cfg=cfg, params=p)


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=float)[:, None]
    i = np.arange(d, dtype=float)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / d)
    return np.where(np.arange(d)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


def _softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-form GELU; smooth everywhere, so finite-difference gradient
    checks hold at any point. Returns (value, tanh term) so the backward
    pass can skip recomputing the tanh."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    x2 = x * x
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * x2)


def _ln_forward(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def local_attention_dense(attn_chunked: np.ndarray, seq_len: int, radius: int
                          ) -> np.ndarray:
    """Expand a chunked local-attention tensor (B,H,m,c,3c+1) into dense
    rows over the full sequence: (B,H,seq_len-1,seq_len). Used by tests and
    debugging; weights outside the band come out exactly zero."""
    B, H, m, c, _ = attn_chunked.shape
    L = seq_len - 1
    dense = np.zeros((B, H, L, seq_len))
    for il in range(L):
        j, p = divmod(il, c)
        dense[:, :, il, 0] = attn_chunked[:, :, j, p, 0]
        for q in range(3 * c):
            k_loc = (j - 1) * c + q
            if 0 <= k_loc < L:
                dense[:, :, il, 1 + k_loc] += attn_chunked[:, :, j, p, 1 + q]
    return dense


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _chunk_pad(X_loc: np.ndarray, c: int) -> np.ndarray:
    """(B,H,L,dh) -> (B,H,m,c,dh) with zero tail padding, m = ceil(L/c)."""
    B, H, L, dh = X_loc.shape
    m = -(-L // c)
    if m * c != L:
        pad = np.zeros((B, H, m * c - L, dh))
        X_loc = np.concatenate([X_loc, pad], axis=2)
    return X_loc.reshape(B, H, m, c, dh)


def _blocks_of(X_loc: np.ndarray, c: int) -> np.ndarray:
    """(B,H,L,dh) -> (B,H,m,3c,dh): for chunk j the concatenation of chunks
    j-1, j, j+1 (zero chunks beyond the ends)."""
    B, H, L, dh = X_loc.shape
    Xc = _chunk_pad(X_loc, c)
    m = Xc.shape[2]
    z = np.zeros((B, H, 1, c, dh))
    wide = np.concatenate([z, Xc, z], axis=2)  # (B,H,m+2,c,dh)
    return np.concatenate([wide[:, :, 0:m], wide[:, :, 1:m + 1],
                           wide[:, :, 2:m + 2]], axis=3)


def _unblocks_add(G_blocks: np.ndarray, c: int, L: int) -> np.ndarray:
    """Adjoint of _blocks_of: scatter-add (B,H,m,3c,dh) back to (B,H,L,dh)."""
    B, H, m, _, dh = G_blocks.shape
    acc = np.zeros((B, H, (m + 2) * c, dh))
    for r in range(3):
        acc[:, :, r * c:(r + m) * c, :] += \
            G_blocks[:, :, :, r * c:(r + 1) * c, :].reshape(B, H, m * c, dh)
    return acc[:, :, c:c + L, :]


@lru_cache(maxsize=64)
def _band_mask(c: int) -> np.ndarray:
    """(c, 3c) mask: row p may attend block column q iff |distance| <= c,
    which for chunked geometry is p <= q <= p + 2c."""
    p = np.arange(c)[:, None]
    q = np.arange(3 * c)[None, :]
    return (q >= p) & (q <= p + 2 * c)


def _attend_banded(Qh, Kh, Vh, radius, pad_valid, scale):
    """Local attention via the chunked sliding-window scheme: chunks of size
    radius attend to three consecutive chunks with batched matmuls, giving
    O(seq_len * radius) cost. Column 0 of the combined score array is the
    global CLS key."""
    B, H, S, dh = Qh.shape
    L = S - 1
    c = radius
    m = -(-L // c)

    Q_loc = Qh[:, :, 1:, :]
    Qc = _chunk_pad(Q_loc, c)                    # (B,H,m,c,dh)
    Kb = _blocks_of(Kh[:, :, 1:, :], c)          # (B,H,m,3c,dh)
    Vb = _blocks_of(Vh[:, :, 1:, :], c)

    s_band = np.matmul(Qc, Kb.swapaxes(-1, -2))  # (B,H,m,c,3c)
    s_cls_col = np.einsum("bhid,bhd->bhi", Q_loc, Kh[:, :, 0, :])

    # validity: inside the band, inside the sequence, and not PAD
    loc_valid = np.zeros((B, m * c), dtype=bool)
    loc_valid[:, :L] = pad_valid[:, 1:]
    vb = np.concatenate([np.zeros((B, 1, c), dtype=bool),
                         loc_valid.reshape(B, m, c),
                         np.zeros((B, 1, c), dtype=bool)], axis=1)
    v_blocks = np.concatenate([vb[:, 0:m], vb[:, 1:m + 1], vb[:, 2:m + 2]],
                              axis=2)            # (B,m,3c)
    band_ok = _band_mask(c)[None, None, None, :, :] & \
        v_blocks[:, None, :, None, :]

    s_band = np.where(band_ok, s_band * scale, -1e30)
    cls_col = np.pad(s_cls_col, ((0, 0), (0, 0), (0, m * c - L)))
    scores = np.concatenate(
        [cls_col.reshape(B, H, m, c, 1) * scale, s_band], axis=-1)
    attn = _softmax(scores)                      # (B,H,m,c,3c+1)

    out_band = np.matmul(attn[..., 1:], Vb)      # (B,H,m,c,dh)
    out_loc = out_band.reshape(B, H, m * c, dh)[:, :, :L, :]
    a_cls_col = attn[..., 0].reshape(B, H, m * c)[:, :, :L]
    out_loc = out_loc + a_cls_col[..., None] * Vh[:, :, 0, None, :]

    s_cls = np.einsum("bhd,bhjd->bhj", Qh[:, :, 0, :], Kh) * scale
    s_cls = np.where(pad_valid[:, None, :], s_cls, -1e30)
    a_cls = _softmax(s_cls)
    out_cls = np.einsum("bhj,bhjd->bhd", a_cls, Vh)

    out = np.concatenate([out_cls[:, :, None, :], out_loc], axis=2)
    return out, (attn, a_cls, Kb, Vb, Qc)


def _attend_banded_backward(dout, Qh, Kh, Vh, radius, scale, cache):
    attn, a_cls, Kb, Vb, Qc = cache
    B, H, S, dh = Qh.shape
    L = S - 1
    c = radius
    m = attn.shape[2]
    dout_cls = dout[:, :, 0, :]
    dout_loc = dout[:, :, 1:, :]
    dout_pad = np.concatenate(
        [dout_loc, np.zeros((B, H, m * c - L, dh))], axis=2)
    dout_chunks = dout_pad.reshape(B, H, m, c, dh)

    a_cls_col = attn[..., 0]                      # (B,H,m,c)
    dattn_band = np.matmul(dout_chunks, Vb.swapaxes(-1, -2))
    dattn_cls_col = np.einsum("bhmcd,bhd->bhmc", dout_chunks, Vh[:, :, 0, :])
    dattn = np.concatenate([dattn_cls_col[..., None], dattn_band], axis=-1)

    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dscores *= scale

    dVb = np.matmul(attn[..., 1:].swapaxes(-1, -2), dout_chunks)
    dQc = np.matmul(dscores[..., 1:], Kb)
    dQc += dscores[..., 0, None] * Kh[:, :, 0, :][:, :, None, None, :]
    dKb = np.matmul(dscores[..., 1:].swapaxes(-1, -2), Qc)

    dQh = np.zeros_like(Qh)
    dKh = np.zeros_like(Kh)
    dVh = np.zeros_like(Vh)
    dQh[:, :, 1:, :] = dQc.reshape(B, H, m * c, dh)[:, :, :L, :]
    dKh[:, :, 1:, :] = _unblocks_add(dKb, c, L)
    dVh[:, :, 1:, :] = _unblocks_add(dVb, c, L)
    dKh[:, :, 0, :] = np.einsum("bhmc,bhmcd->bhd", dscores[..., 0], Qc)
    dVh[:, :, 0, :] = np.einsum("bhmc,bhmcd->bhd", a_cls_col, dout_chunks)

    dattn_cls = np.einsum("bhd,bhjd->bhj", dout_cls, Vh)
    dVh += a_cls[..., None] * dout_cls[:, :, None, :]
    dscores_cls = a_cls * (dattn_cls - np.sum(dattn_cls * a_cls, axis=-1, keepdims=True))
    dQh[:, :, 0, :] = np.einsum("bhj,bhjd->bhd", dscores_cls, Kh) * scale
    dKh += dscores_cls[..., None] * Qh[:, :, 0, :][:, :, None, :] * scale
    return dQh, dKh, dVh


def _attend_dense(Qh, Kh, Vh, allowed, scale):
    """Quadratic full-score reference with the same mask semantics."""
    scores = np.einsum("bhid,bhjd->bhij", Qh, Kh) * scale
    scores = np.where(allowed[:, None, :, :], scores, -1e30)
    attn = _softmax(scores)
    out = np.einsum("bhij,bhjd->bhid", attn, Vh)
    return out, attn


def _allowed_mask(seq_len: int, radius: int, pad_valid: np.ndarray) -> np.ndarray:
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    local = np.abs(i - j) <= radius
    local[0, :] = True   # CLS attends everywhere
    local[:, 0] = True   # everyone attends CLS
    return local[None, :, :] & pad_valid[:, None, :]


def prepare_batch(windows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Prepend CLS and right-pad with PAD to the longest window."""
    s = 1 + max(len(w) for w in windows)
    ids = np.full((len(windows), s), PAD_ID, dtype=np.int64)
    for r, w in enumerate(windows):
        ids[r, 0] = CLS_ID
        ids[r, 1:1 + len(w)] = w
    return ids, ids != PAD_ID


def _forward(model: AttnModel, ids: np.ndarray, pad_valid: np.ndarray,
             dense: bool = False, dropout_rng: np.random.Generator | None = None,
             collect_attn: bool = False):
    """Returns (logits, caches, attn_maps). caches is None-free only when
    needed for backprop; attn_maps holds per-layer attention when asked."""
    cfg = model.cfg
    p = model.params
    B, S = ids.shape
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / np.sqrt(dh)
    rate = cfg.dropout if dropout_rng is not None else 0.0

    allowed = _allowed_mask(S, cfg.local_radius, pad_valid) if dense else None

    pe = sinusoidal_encoding(S, cfg.d_model)
    x = p["emb"][ids] * np.sqrt(cfg.d_model) + pe[None, :, :]
    caches: list[dict] = [{"ids": ids, "x0": x}]
    attn_maps: list[dict] = []

    for l in range(cfg.n_layers):
        pre = f"L{l}."
        c: dict = {"x_in": x}
        u, c["ln1"] = _ln_forward(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        c["u"] = u
        qkv = u @ np.concatenate(
            [p[pre + "Wq"], p[pre + "Wk"], p[pre + "Wv"]], axis=1)
        d = cfg.d_model
        Q = qkv[:, :, :d] + p[pre + "bq"]
        K = qkv[:, :, d:2 * d] + p[pre + "bk"]
        V = qkv[:, :, 2 * d:] + p[pre + "bv"]
        Qh, Kh, Vh = (_split_heads(t, H) for t in (Q, K, V))
        c["Qh"], c["Kh"], c["Vh"] = Qh, Kh, Vh
        if dense:
            out_h, attn_full = _attend_dense(Qh, Kh, Vh, allowed, scale)
            if collect_attn:
                attn_maps.append({"full": attn_full})
        else:
            out_h, att_cache = _attend_banded(Qh, Kh, Vh, cfg.local_radius,
                                              pad_valid, scale)
            c["att"] = att_cache
            if collect_attn:
                attn_maps.append({
                    "local_chunked": att_cache[0], "cls": att_cache[1],
                    "radius": cfg.local_radius, "seq_len": S,
                })
        merged = _merge_heads(out_h)
        c["merged"] = merged
        a = merged @ p[pre + "Wo"] + p[pre + "bo"]
        if rate > 0.0:
            mask = (dropout_rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
            c["drop_a"] = mask
        x = x + a
        c["x_mid"] = x
        u2, c["ln2"] = _ln_forward(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        c["u2"] = u2
        h1 = u2 @ p[pre + "W1"] + p[pre + "b1"]
        act, tanh_term = _gelu_forward(h1)
        c["h1"], c["act"], c["gelu_t"] = h1, act, tanh_term
        f = act @ p[pre + "W2"] + p[pre + "b2"]
        if rate > 0.0:
            mask = (dropout_rng.random(f.shape) >= rate) / (1.0 - rate)
            f = f * mask
            c["drop_f"] = mask
        x = x + f
        caches.append(c)

    uf, lnf_cache = _ln_forward(x, p["lnf_g"], p["lnf_b"])
    caches.append({"lnf": lnf_cache, "uf": uf})
    logits = uf[:, 0, :] @ p["w_cls"] + p["b_cls"]
    return logits, caches, attn_maps


def _backward(model: AttnModel, dlogits: np.ndarray, caches: list[dict]
              ) -> dict[str, np.ndarray]:
    cfg = model.cfg
    p = model.params
    ids = caches[0]["ids"]
    B, S = ids.shape
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / np.sqrt(dh)

    grads = {k: np.zeros_like(v) for k, v in p.items()}

    final = caches[-1]
    uf = final["uf"]
    duf = np.zeros_like(uf)
    duf[:, 0, :] = dlogits[:, None] * p["w_cls"][None, :]
    grads["w_cls"] = uf[:, 0, :].T @ dlogits
    grads["b_cls"] = np.asarray(dlogits.sum())
    dx, grads["lnf_g"], grads["lnf_b"] = _ln_backward(duf, final["lnf"])

    emb_scale = np.sqrt(cfg.d_model)

    for l in range(cfg.n_layers - 1, -1, -1):
        pre = f"L{l}."
        c = caches[1 + l]
        df = dx.copy()
        if "drop_f" in c:
            df = df * c["drop_f"]
        grads[pre + "W2"] = c["act"].reshape(-1, cfg.d_ff).T @ df.reshape(-1, cfg.d_model)
        grads[pre + "b2"] = df.reshape(-1, cfg.d_model).sum(axis=0)
        dact = df @ p[pre + "W2"].T
        dh1 = dact * _gelu_backward(c["h1"], c["gelu_t"])
        grads[pre + "W1"] = c["u2"].reshape(-1, cfg.d_model).T @ dh1.reshape(-1, cfg.d_ff)
        grads[pre + "b1"] = dh1.reshape(-1, cfg.d_ff).sum(axis=0)
        du2 = dh1 @ p[pre + "W1"].T
        dx_mid, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _ln_backward(du2, c["ln2"])
        dx = dx + dx_mid

        da = dx.copy()
        if "drop_a" in c:
            da = da * c["drop_a"]
        grads[pre + "Wo"] = c["merged"].reshape(-1, cfg.d_model).T @ da.reshape(-1, cfg.d_model)
        grads[pre + "bo"] = da.reshape(-1, cfg.d_model).sum(axis=0)
        dmerged = da @ p[pre + "Wo"].T
        dout_h = _split_heads(dmerged, H)
        dQh, dKh, dVh = _attend_banded_backward(
            dout_h, c["Qh"], c["Kh"], c["Vh"], cfg.local_radius, scale, c["att"])
        dQ, dK, dV = (_merge_heads(t) for t in (dQh, dKh, dVh))
        u = c["u"]
        u2d = u.reshape(-1, cfg.d_model)
        grads[pre + "Wq"] = u2d.T @ dQ.reshape(-1, cfg.d_model)
        grads[pre + "bq"] = dQ.reshape(-1, cfg.d_model).sum(axis=0)
        grads[pre + "Wk"] = u2d.T @ dK.reshape(-1, cfg.d_model)
        grads[pre + "bk"] = dK.reshape(-1, cfg.d_model).sum(axis=0)
        grads[pre + "Wv"] = u2d.T @ dV.reshape(-1, cfg.d_model)
        grads[pre + "bv"] = dV.reshape(-1, cfg.d_model).sum(axis=0)
        du = dQ @ p[pre + "Wq"].T + dK @ p[pre + "Wk"].T + dV @ p[pre + "Wv"].T
        dx_in, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _ln_backward(du, c["ln1"])
        dx = dx + dx_in

    np.add.at(grads["emb"], ids, dx * emb_scale)
    return grads


def batch_loss_and_grads(model: AttnModel, windows: list[np.ndarray],
                         labels: np.ndarray,
                         dropout_rng: np.random.Generator | None = None
                         ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy over the batch plus gradients."""
    ids, pad_valid = prepare_batch(windows)
    y = np.asarray(labels, dtype=float)
    logits, caches, _ = _forward(model, ids, pad_valid, dropout_rng=dropout_rng)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    probs = _sigmoid(logits)
    dlogits = (probs - y) / len(windows)
    grads = _backward(model, dlogits, caches)
    return loss, grads


def forward_window(model: AttnModel, window_ids: np.ndarray,
                   dense: bool = False, collect_attn: bool = False):
    """Probability for one window (CLS prepended internally) plus optional
    per-layer attention maps. Unknown ids must be mapped to UNK upstream;
    any id outside the vocabulary range is treated as UNK here."""
    w = np.asarray(window_ids, dtype=np.int64)
    w = np.where((w < 0) | (w >= model.cfg.vocab_size), UNK_ID, w)
    ids, pad_valid = prepare_batch([w])
    logits, _, attn_maps = _forward(model, ids, pad_valid, dense=dense,
                                    collect_attn=collect_attn)
    prob = float(_sigmoid(logits)[0])
    return prob, attn_maps


def train(model: AttnModel, windows: list[np.ndarray], labels: list[int],
          cfg: TrainConfig) -> AttnModel:
    """Adam on mean BCE; deterministic given cfg.seed. Raises
    TrainingDiverged when the loss goes non-finite or runs away."""
    y_all = np.asarray(labels, dtype=float)
    if len(np.unique(y_all)) < 2:
        raise ValueError("training windows must include both classes")
    rng = np.random.default_rng([cfg.seed, 0xA77])
    drop_rng = np.random.default_rng([cfg.seed, 0xD607]) if model.cfg.dropout > 0 else None

    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v_) for k, v_ in model.params.items()}
    t = 0
    n = len(windows)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for bs in range(0, n, cfg.batch_size):
            sel = order[bs:bs + cfg.batch_size]
            batch = [windows[i] for i in sel]
            loss, grads = batch_loss_and_grads(model, batch, y_all[sel],
                                               dropout_rng=drop_rng)
            if not np.isfinite(loss) or loss > 1e8:
                raise TrainingDiverged(
                    "training diverged (loss not finite or runaway); "
                    "lower the learning rate")
            t += 1
            for key, g in grads.items():
                m[key] = cfg.adam_beta1 * m[key] + (1 - cfg.adam_beta1) * g
                v[key] = cfg.adam_beta2 * v[key] + (1 - cfg.adam_beta2) * (g * g)
                mhat = m[key] / (1 - cfg.adam_beta1 ** t)
                vhat = v[key] / (1 - cfg.adam_beta2 ** t)
                model.params[key] = model.params[key] - cfg.learning_rate * mhat / (
                    np.sqrt(vhat) + cfg.adam_eps)
            epoch_loss += loss
            n_batches += 1
        model.history.append(epoch_loss / max(n_batches, 1))
    return model


# ---------------------------------------------------------------------------
# Patient-level prediction and highlights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatientTokens:
    """Concatenated token ids for a patient with per-token provenance
    (note index, token index within the note)."""
    ids: np.ndarray
    provenance: tuple[tuple[int, int], ...]


def tokenize_patient(notes: list[CleanNote], vocab: TokenVocab) -> PatientTokens:
    ids: list[int] = []
    prov: list[tuple[int, int]] = []
    for ni, note in enumerate(notes):
        toks = note.text.split()
        for ti, tok in enumerate(toks):
            ids.append(vocab.token_to_id.get(tok, UNK_ID))
            prov.append((ni, ti))
    return PatientTokens(ids=np.array(ids, dtype=np.int64), provenance=tuple(prov))


@dataclass(frozen=True)
class WindowPrediction:
    start: int
    end: int
    probability: float
    label: int


@dataclass(frozen=True)
class PatientPrediction:
    label: int
    probability: float
    windows: tuple[WindowPrediction, ...]


def aggregate_windows(window_probs: list[float]) -> tuple[int, float]:
    """Mode of per-window hard labels at 0.5; ties fall back to the mean
    window probability compared against 0.5."""
    if not window_probs:
        raise ValueError("no windows to aggregate")
    hard = [1 if p >= 0.5 else 0 for p in window_probs]
    # summing in sorted order keeps the mean permutation-invariant
    mean_p = float(sum(sorted(window_probs)) / len(window_probs))
    pos, neg = hard.count(1), hard.count(0)
    if pos > neg:
        label = 1
    elif neg > pos:
        label = 0
    else:
        label = 1 if mean_p >= 0.5 else 0
    return label, mean_p


def predict_patient(model: AttnModel, notes: list[CleanNote], vocab: TokenVocab,
                    wcfg: WindowConfig) -> PatientPrediction:
    pt = tokenize_patient(notes, vocab)
    if len(pt.ids) == 0:
        raise ValueError("patient has no tokens")
    return predict_many(model, [pt.ids], wcfg)[0]


def predict_many(model: AttnModel, token_seqs: list[np.ndarray],
                 wcfg: WindowConfig, batch_size: int = 64
                 ) -> list[PatientPrediction]:
    """Window-slice every sequence, run the forward passes in shared padded
    batches, and aggregate per sequence."""
    flat: list[np.ndarray] = []
    owner: list[int] = []
    spans_per: list[list[tuple[int, int]]] = []
    for si, ids in enumerate(token_seqs):
        if len(ids) == 0:
            raise ValueError("empty token sequence")
        spans = slice_windows(len(ids), wcfg)
        spans_per.append(spans)
        for s, e in spans:
            flat.append(np.asarray(ids[s:e], dtype=np.int64))
            owner.append(si)

    probs = np.empty(len(flat))
    for start in range(0, len(flat), batch_size):
        chunk = flat[start:start + batch_size]
        ids, pad_valid = prepare_batch(chunk)
        logits, _, _ = _forward(model, ids, pad_valid)
        probs[start:start + len(chunk)] = _sigmoid(logits)

    out: list[PatientPrediction] = []
    pos = 0
    for si, spans in enumerate(spans_per):
        details = []
        for s, e in spans:
            p = float(probs[pos])
            pos += 1
            details.append(WindowPrediction(start=s, end=e, probability=p,
                                            label=1 if p >= 0.5 else 0))
        label, mean_p = aggregate_windows([d.probability for d in details])
        out.append(PatientPrediction(label=label, probability=mean_p,
                                     windows=tuple(details)))
    return out


@dataclass(frozen=True)
class HighlightToken:
    note_index: int
    token_index: int
    weight: float


def window_highlights(model: AttnModel, window_ids: np.ndarray,
                      top_k: int | None = None) -> list[tuple[int, float]]:
    """(position within window, weight) ranked by final-layer CLS attention
    averaged over heads; weights are drawn from one softmax row so they sum
    to at most 1."""
    _, attn_maps = forward_window(model, window_ids, collect_attn=True)
    a_cls = attn_maps[-1]["cls"]            # (1, H, S)
    weights = a_cls.mean(axis=1)[0]         # (S,)
    n = len(window_ids)
    pairs = [(i, float(weights[1 + i])) for i in range(n)]
    pairs.sort(key=lambda t: (-t[1], t[0]))
    if top_k is not None:
        pairs = pairs[:top_k]
    return pairs


def attention_highlights(model: AttnModel, notes: list[CleanNote],
                         vocab: TokenVocab, wcfg: WindowConfig,
                         top_k: int = 10) -> list[HighlightToken]:
    """Patient-level highlights: per window take the top tokens by CLS
    attention, then merge across windows keeping each token's max weight."""
    pt = tokenize_patient(notes, vocab)
    if len(pt.ids) == 0:
        return []
    best: dict[tuple[int, int], float] = {}
    for s, e in slice_windows(len(pt.ids), wcfg):
        for pos, w in window_highlights(model, pt.ids[s:e], top_k=top_k):
            key = pt.provenance[s + pos]
            if w > best.get(key, -1.0):
                best[key] = w
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return [HighlightToken(note_index=ni, token_index=ti, weight=w)
            for (ni, ti), w in ranked]


# ---------------------------------------------------------------------------
# Artifact: versioned binary container + JSON sidecar
# ---------------------------------------------------------------------------

def save_attn(model: AttnModel, vocab: TokenVocab, wcfg: WindowConfig,
              path: str | Path) -> None:
    """Magic "CGS1", u32 dimension header, then row-major float64 little-
    endian parameter blocks in a fixed order; configs and vocab go to a
    .json sidecar next to the binary."""
    path = Path(path)
    cfg = model.cfg
    header = struct.pack(
        "<4s7I", MAGIC, 1, cfg.vocab_size, cfg.d_model, cfg.n_heads,
        cfg.n_layers, cfg.local_radius, cfg.d_ff)
    with path.open("wb") as fh:
        fh.write(header)
        for key in _param_order(cfg):
            arr = np.ascontiguousarray(model.params[key], dtype="<f8")
            fh.write(arr.tobytes())
    sidecar = {
        "attn_config": {
            "vocab_size": cfg.vocab_size, "d_model": cfg.d_model,
            "n_heads": cfg.n_heads, "n_layers": cfg.n_layers,
            "local_radius": cfg.local_radius, "dropout": cfg.dropout,
        },
        "window_config": {
            "window_len": wcfg.window_len,
            "overlap_fraction": wcfg.overlap_fraction,
        },
        "vocab": vocab.token_to_id,
    }
    with path.with_suffix(path.suffix + ".json").open("w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def _param_shapes(cfg: AttnConfig) -> dict[str, tuple[int, ...]]:
    d, dff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"emb": (cfg.vocab_size, d)}
    layer = {
        "ln1_g": (d,), "ln1_b": (d,), "Wq": (d, d), "bq": (d,), "Wk": (d, d),
        "bk": (d,), "Wv": (d, d), "bv": (d,), "Wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,), "W1": (d, dff), "b1": (dff,),
        "W2": (dff, d), "b2": (d,),
    }
    for l in range(cfg.n_layers):
        for k, shp in layer.items():
            shapes[f"L{l}.{k}"] = shp
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_cls": (d,), "b_cls": ()})
    return shapes


def load_attn(path: str | Path) -> tuple[AttnModel, TokenVocab, WindowConfig]:
    path = Path(path)
    with path.with_suffix(path.suffix + ".json").open("r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    acfg = AttnConfig(**sidecar["attn_config"])
    wcfg = WindowConfig(**sidecar["window_config"])
    vocab = TokenVocab(token_to_id=sidecar["vocab"])

    with path.open("rb") as fh:
        head = fh.read(struct.calcsize("<4s7I"))
        magic, version, vsz, d, h, nl, radius, dff = struct.unpack("<4s7I", head)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a model container (bad magic)")
        if version != 1:
            raise ValueError(f"{path}: unsupported container version {version}")
        if (vsz, d, h, nl, radius, dff) != (acfg.vocab_size, acfg.d_model,
                                            acfg.n_heads, acfg.n_layers,
                                            acfg.local_radius, acfg.d_ff):
            raise ValueError(f"{path}: header disagrees with sidecar config")
        shapes = _param_shapes(acfg)
        params = {}
        for key in _param_order(acfg):
            shp = shapes[key]
            count = int(np.prod(shp)) if shp else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated parameter block {key}")
            params[key] = np.frombuffer(buf, dtype="<f8").reshape(shp).copy()
    return AttnModel(cfg=acfg, params=params), vocab, wcfg
