"""Attention-based glyph-sequence recognizer.

Pipeline: a windowed column MLP turns each image column (with its two
neighbours) into a feature vector, a bidirectional LSTM encodes the column
sequence (forward and backward hidden states are summed), and an LSTM decoder
with additive attention emits one token per step under teacher forcing.
Training loss is the sum over steps of per-step cross-entropy; greedy decoding
feeds back argmax tokens and reports a sequence confidence.

Every layer exists in two equivalent forms: a composition of autodiff
primitives (reference) and a fused kernel with hand-written backward (fast);
``RecognizerConfig.fused`` selects, and the test suite asserts they agree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class Charset:
    """Dense token ids: glyphs 0..K-1, then GO, EOS, PAD."""

    glyph_count: int

    def __post_init__(self):
        if self.glyph_count < 2:
            raise ValueError("charset needs at least 2 glyphs")

    @property
    def go_id(self) -> int:
        return self.glyph_count

    @property
    def eos_id(self) -> int:
        return self.glyph_count + 1

    @property
    def pad_id(self) -> int:
        return self.glyph_count + 2

    @property
    def vocab_size(self) -> int:
        return self.glyph_count + 3

    def is_glyph(self, token: int) -> bool:
        return 0 <= token < self.glyph_count


@dataclass(frozen=True)
class RecognizerConfig:
    image_height: int = 7
    enc_hidden: int = 24
    enc_out: int = 16
    rnn_hidden: int = 20
    attn_dim: int = 14
    dec_hidden: int = 20
    embed_dim: int = 10
    window: int = 3
    confidence_mode: str = "product"  # or "min"
    fused: bool = True

    def __post_init__(self):
        if self.window != 3:
            raise ValueError("column window is fixed at 3")
        if self.confidence_mode not in ("product", "min"):
            raise ValueError(f"unknown confidence_mode {self.confidence_mode!r}")
        for name in ("image_height", "enc_hidden", "enc_out", "rnn_hidden",
                     "attn_dim", "dec_hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


PARAM_GROUPS = {
    "encoder": ("enc_w1", "enc_b1", "enc_w2", "enc_b2"),
    "bi_rnn": ("fw_w", "fw_b", "bw_w", "bw_b"),
    "attention": ("attn_ws", "attn_wh", "attn_v"),
    "dec_lstm": ("dec_w", "dec_b"),
    "embed": ("embed",),
    "out_proj": ("out_w", "out_b"),
}

PARAM_ORDER = tuple(n for names in PARAM_GROUPS.values() for n in names)


class ModelParams:
    """All learnable tensors of the recognizer as one flat, ordered collection."""

    def __init__(self, cfg: RecognizerConfig, charset: Charset, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.charset = charset
        missing = [n for n in PARAM_ORDER if n not in tensors]
        if missing:
            raise ValueError(f"missing parameter tensors: {missing}")
        for name in PARAM_ORDER:
            setattr(self, name, tensors[name])

    @classmethod
    def init(cls, cfg: RecognizerConfig, charset: Charset, seed: int) -> "ModelParams":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E3779B9)))
        win_in = cfg.window * cfg.image_height
        vocab = charset.vocab_size
        dec_in = cfg.embed_dim + cfg.rnn_hidden

        def w(shape):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        tensors = {
            "enc_w1": w((win_in, cfg.enc_hidden)),
            "enc_b1": zeros((cfg.enc_hidden,)),
            "enc_w2": w((cfg.enc_hidden, cfg.enc_out)),
            "enc_b2": zeros((cfg.enc_out,)),
            "fw_w": w((cfg.enc_out + cfg.rnn_hidden, 4 * cfg.rnn_hidden)),
            "fw_b": zeros((4 * cfg.rnn_hidden,)),
            "bw_w": w((cfg.enc_out + cfg.rnn_hidden, 4 * cfg.rnn_hidden)),
            "bw_b": zeros((4 * cfg.rnn_hidden,)),
            "attn_ws": w((cfg.dec_hidden, cfg.attn_dim)),
            "attn_wh": w((cfg.rnn_hidden, cfg.attn_dim)),
            "attn_v": w((cfg.attn_dim, 1)),
            "dec_w": w((dec_in + cfg.dec_hidden, 4 * cfg.dec_hidden)),
            "dec_b": zeros((4 * cfg.dec_hidden,)),
            "embed": w((vocab, cfg.embed_dim)),
            "out_w": w((cfg.dec_hidden, vocab)),
            "out_b": zeros((vocab,)),
        }
        return cls(cfg, charset, tensors)

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in PARAM_ORDER]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in PARAM_ORDER]

    def groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        return {g: [(n, getattr(self, n)) for n in names] for g, names in PARAM_GROUPS.items()}

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def clone(self) -> "ModelParams":
        tensors = {n: Tensor(getattr(self, n).data.copy(), requires_grad=True)
                   for n in PARAM_ORDER}
        return ModelParams(self.cfg, self.charset, tensors)

    def with_tensors(self, tensors: Sequence[Tensor]) -> "ModelParams":
        if len(tensors) != len(PARAM_ORDER):
            raise ValueError("wrong tensor count")
        return ModelParams(self.cfg, self.charset, dict(zip(PARAM_ORDER, tensors)))


@dataclass
class EncodedSequence:
    """Per-column hidden states of a single image: features has shape (T, h)."""

    features: Tensor


@dataclass
class BatchEncoding:
    """Step-major encoder output for a batch: hcat rows [t*B:(t+1)*B] = step t."""

    hcat: Tensor     # (T*B, rnn_hidden)
    whh: Tensor      # (T*B, attn_dim), precomputed hcat @ attn_wh
    steps: int
    batch: int


@dataclass
class DecoderState:
    h: Tensor  # (B, dec_hidden)
    c: Tensor  # (B, dec_hidden)


def _window_columns(images: np.ndarray, window: int) -> np.ndarray:
    """(B, H, W) -> (W*B, window*H) step-major, zero-padded at the edges."""
    b, h, w = images.shape
    pad = np.zeros((b, h, 1))
    ext = np.concatenate([pad, images, pad], axis=2)      # (B, H, W+2)
    cols = np.empty((w, b, window * h))
    for t in range(w):
        cols[t] = ext[:, :, t:t + window].transpose(0, 2, 1).reshape(b, window * h)
    return cols.reshape(w * b, window * h)


def _lstm_cell_prim(x, h_prev, c_prev, w, b, hidden):
    z = ad.add(ad.matmul(ad.concat([x, h_prev], axis=1), w), b)
    i = ad.sigmoid(ad.narrow(z, 1, 0, hidden))
    f = ad.sigmoid(ad.narrow(z, 1, hidden, hidden))
    o = ad.sigmoid(ad.narrow(z, 1, 2 * hidden, hidden))
    g = ad.tanh(ad.narrow(z, 1, 3 * hidden, hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def _lstm_seq_prim(xcat, w, b, steps, batch, hidden, reverse):
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    hs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        x = ad.narrow(xcat, 0, t * batch, batch)
        h, c = _lstm_cell_prim(x, h, c, w, b, hidden)
        hs[t] = h
    return ad.concat(hs, axis=0)


def encode_batch(images: np.ndarray, params: ModelParams) -> BatchEncoding:
    """Encode a batch of images (B, H, W) into step-major column features."""
    cfg = params.cfg
    if images.ndim != 3 or images.shape[1] != cfg.image_height:
        raise ShapeError(
            f"encode: expected (B, {cfg.image_height}, W) image batch, got {images.shape}"
        )
    b, _, w = images.shape
    if w < 1:
        raise ShapeError("encode: image has no columns")
    xwin = Tensor._make(_window_columns(images, cfg.window))
    z1 = ad.relu(ad.add(ad.matmul(xwin, params.enc_w1), params.enc_b1))
    feats = ad.add(ad.matmul(z1, params.enc_w2), params.enc_b2)   # (T*B, enc_out)
    if cfg.fused:
        hcat = kernels.bilstm_sequence(feats, params.fw_w, params.fw_b,
                                       params.bw_w, params.bw_b, w, b)
    else:
        fw = _lstm_seq_prim(feats, params.fw_w, params.fw_b, w, b, cfg.rnn_hidden, False)
        bw = _lstm_seq_prim(feats, params.bw_w, params.bw_b, w, b, cfg.rnn_hidden, True)
        hcat = ad.add(fw, bw)
    whh = ad.matmul(hcat, params.attn_wh)
    return BatchEncoding(hcat=hcat, whh=whh, steps=w, batch=b)


def encode(image: np.ndarray, params: ModelParams) -> EncodedSequence:
    """Encode one (H, W) image; features row t is the summed BiLSTM state h_t."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"encode: expected a 2-D image, got shape {image.shape}")
    enc = encode_batch(image[None, :, :], params)
    return EncodedSequence(features=enc.hcat)


def attend_batch(s_prev: Tensor, enc: BatchEncoding, params: ModelParams):
    """Additive attention over encoder states for a batch of decoder states.

    Returns (context (B, h), alpha (B, T)).
    """
    cfg = params.cfg
    t_steps, b = enc.steps, enc.batch
    if cfg.fused:
        return kernels.attend_step(s_prev, enc.hcat, enc.whh, params.attn_ws,
                                   params.attn_v, t_steps, b)
    u = ad.matmul(s_prev, params.attn_ws)                          # (B, a)
    e = ad.tanh(ad.add(enc.whh, ad.tile_rows(u, t_steps)))          # (T*B, a)
    sc = ad.matmul(e, params.attn_v)                                # (T*B, 1)
    sc = ad.transpose(ad.reshape(sc, (t_steps, b)))                 # (B, T)
    alpha = ad.softmax(sc, axis=1)
    acol = ad.reshape(ad.transpose(alpha), (t_steps * b, 1))
    weighted = ad.mul(enc.hcat, acol)                               # (T*B, h)
    ctx = ad.reshape(ad.tsum(ad.reshape(weighted, (t_steps, b * cfg.rnn_hidden)), axis=0),
                     (b, cfg.rnn_hidden))
    return ctx, alpha


def attend(s_prev: Tensor, enc: EncodedSequence, params: ModelParams):
    """Single-sample attention: returns (context (1, h), alpha (T,))."""
    cfg = params.cfg
    if s_prev.ndim != 2 or s_prev.shape != (1, cfg.dec_hidden):
        raise ShapeError(
            f"attend: decoder state must be (1, {cfg.dec_hidden}), got {s_prev.shape}"
        )
    feats = enc.features
    if feats.ndim != 2 or feats.shape[1] != cfg.rnn_hidden:
        raise ShapeError(f"attend: encoded features must be (T, {cfg.rnn_hidden})")
    batch_enc = BatchEncoding(hcat=feats, whh=ad.matmul(feats, params.attn_wh),
                              steps=feats.shape[0], batch=1)
    ctx, alpha = attend_batch(s_prev, batch_enc, params)
    return ctx, ad.reshape(alpha, (feats.shape[0],))


def decode_cell(x: Tensor, state: DecoderState, params: ModelParams) -> DecoderState:
    cfg = params.cfg
    if cfg.fused:
        h, c = kernels.lstm_step(x, state.h, state.c, params.dec_w, params.dec_b)
    else:
        h, c = _lstm_cell_prim(x, state.h, state.c, params.dec_w, params.dec_b, cfg.dec_hidden)
    return DecoderState(h=h, c=c)


def decode_step(g_prev: int, state: DecoderState, ctx: Tensor, params: ModelParams):
    """One teacher-forced decoder step for a single sample.

    Returns (logits (1, vocab), new DecoderState).
    """
    charset = params.charset
    if not (0 <= g_prev < charset.vocab_size):
        raise ValueError(f"decode_step: invalid token id {g_prev}")
    emb = ad.gather_rows(params.embed, np.array([g_prev]))
    x = ad.concat([emb, ctx], axis=1)
    new_state = decode_cell(x, state, params)
    logits = ad.add(ad.matmul(new_state.h, params.out_w), params.out_b)
    return logits, new_state


def initial_decoder_state(batch: int, params: ModelParams) -> DecoderState:
    d = params.cfg.dec_hidden
    return DecoderState(h=Tensor(np.zeros((batch, d))), c=Tensor(np.zeros((batch, d))))


def masked_sequence_nll(logprob_steps: Sequence[Tensor], targets: np.ndarray,
                        mask: np.ndarray) -> Tensor:
    """Mean over samples of the masked per-step negative log likelihood.

    logprob_steps[t] is (B, vocab) log-probabilities at step t; targets and
    mask are (B, L) arrays. Per-sample loss is the sum over unmasked steps.
    """
    b = targets.shape[0]
    total = None
    for t, lp in enumerate(logprob_steps):
        nll = ad.scale(ad.pick(lp, targets[:, t]), -1.0)          # (B, 1)
        m = mask[:, t]
        if not m.all():
            nll = ad.mul(nll, Tensor._make(m.reshape(-1, 1).astype(np.float64)))
        step_sum = ad.tsum(nll)
        total = step_sum if total is None else ad.add(total, step_sum)
    return ad.scale(total, 1.0 / b)


def _teacher_arrays(labels: Sequence[Sequence[int]], charset: Charset):
    """Pad EOS-terminated labels into (B, L) teacher-input/target/mask arrays."""
    if not labels:
        raise ValueError("sequence_loss: empty batch")
    lens = [len(lab) for lab in labels]
    if min(lens) == 0:
        raise ValueError("sequence_loss: empty label")
    lmax = max(lens)
    b = len(labels)
    gin = np.full((b, lmax), charset.pad_id, dtype=np.int64)
    targets = np.full((b, lmax), charset.pad_id, dtype=np.int64)
    mask = np.zeros((b, lmax), dtype=bool)
    for r, lab in enumerate(labels):
        lab = list(lab)
        if lab[-1] != charset.eos_id:
            raise ValueError("sequence_loss: label must end with EOS")
        for tok in lab[:-1]:
            if not charset.is_glyph(tok):
                raise ValueError(f"sequence_loss: invalid glyph id {tok}")
        n = len(lab)
        gin[r, 0] = charset.go_id
        gin[r, 1:n] = lab[:-1]
        targets[r, :n] = lab
        mask[r, :n] = True
    return gin, targets, mask


def batch_sequence_loss(images: np.ndarray, labels: Sequence[Sequence[int]],
                        params: ModelParams) -> Tensor:
    """Mean teacher-forced sequence loss over a batch.

    Labels are EOS-terminated glyph-id sequences; per-sample loss is the sum
    over steps of cross-entropy, so the batch value is the mean of per-sample
    sequence losses.
    """
    charset = params.charset
    gin, targets, mask = _teacher_arrays(labels, charset)
    enc = encode_batch(images, params)
    state = initial_decoder_state(enc.batch, params)
    logprobs = []
    for t in range(targets.shape[1]):
        ctx, _ = attend_batch(state.h, enc, params)
        emb = ad.gather_rows(params.embed, gin[:, t])
        x = ad.concat([emb, ctx], axis=1)
        state = decode_cell(x, state, params)
        logits = ad.add(ad.matmul(state.h, params.out_w), params.out_b)
        logprobs.append(ad.log_softmax(logits, axis=1))
    return masked_sequence_nll(logprobs, targets, mask)


def sequence_loss(image: np.ndarray, label: Sequence[int], params: ModelParams) -> Tensor:
    """Teacher-forced loss of one sample; label is EOS-terminated."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"sequence_loss: expected a 2-D image, got {image.shape}")
    return batch_sequence_loss(image[None, :, :], [label], params)


def greedy_decode_batch(images: np.ndarray, params: ModelParams, max_steps: int):
    """Greedy decode a batch. Returns (labels, confidences).

    Labels are glyph-id tuples without the terminating EOS. Confidence is the
    product (or min, per config) of the per-step max probability over glyphs
    and EOS, including the EOS step itself.
    """
    if max_steps < 1:
        raise ValueError("greedy_decode: max_steps must be >= 1")
    charset = params.charset
    cfg = params.cfg
    enc = encode_batch(images, params)
    b = enc.batch
    state = initial_decoder_state(b, params)
    prev = np.full(b, charset.go_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    conf = np.ones(b)
    out = [[] for _ in range(b)]
    ban = np.zeros(charset.vocab_size)
    ban[charset.go_id] = -1e30
    ban[charset.pad_id] = -1e30
    for _ in range(max_steps):
        ctx, _ = attend_batch(state.h, enc, params)
        emb = ad.gather_rows(params.embed, prev)
        x = ad.concat([emb, ctx], axis=1)
        state = decode_cell(x, state, params)
        logits = state.h.data @ params.out_w.data + params.out_b.data + ban
        shifted = logits - logits.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        probs = ex / ex.sum(axis=1, keepdims=True)
        tok = probs.argmax(axis=1)
        pmax = probs[np.arange(b), tok]
        active = ~done
        if cfg.confidence_mode == "product":
            conf[active] *= pmax[active]
        else:
            conf[active] = np.minimum(conf[active], pmax[active])
        for r in np.nonzero(active)[0]:
            if tok[r] == charset.eos_id:
                done[r] = True
            else:
                out[r].append(int(tok[r]))
        if done.all():
            break
        prev = np.where(done, charset.eos_id, tok)
    return [tuple(lab) for lab in out], conf


def greedy_decode(image: np.ndarray, params: ModelParams, max_steps: int):
    """Greedy decode one image. Returns (label tuple without EOS, confidence)."""
    image = np.asarray(image, dtype=np.float64)
    labels, conf = greedy_decode_batch(image[None, :, :], params, max_steps)
    return labels[0], float(conf[0])


def sequence_accuracy(predictions: Sequence[Sequence[int]],
                      truths: Sequence[Sequence[int]]) -> float:
    """Exact-match fraction over aligned prediction/truth lists."""
    if len(predictions) != len(truths):
        raise ValueError(
            f"sequence_accuracy: {len(predictions)} predictions vs {len(truths)} truths"
        )
    if not predictions:
        return 0.0
    hits = sum(1 for p, t in zip(predictions, truths) if tuple(p) == tuple(t))
    return hits / len(predictions)


def strip_eos(label: Sequence[int], charset: Charset) -> tuple:
    lab = tuple(label)
    if lab and lab[-1] == charset.eos_id:
        return lab[:-1]
    return lab
