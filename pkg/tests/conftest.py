import numpy as np
import pytest

from metasl import recognizer as R


def tiny_config(**overrides):
    base = dict(image_height=6, enc_hidden=8, enc_out=7, rnn_hidden=8,
                attn_dim=6, dec_hidden=8, embed_dim=5, fused=True)
    base.update(overrides)
    return R.RecognizerConfig(**base)


@pytest.fixture
def tiny_charset():
    return R.Charset(8)


@pytest.fixture
def tiny_model(tiny_charset):
    cfg = tiny_config()
    return R.ModelParams.init(cfg, tiny_charset, seed=7)


def random_labels(rng, charset, n, lo=1, hi=5):
    out = []
    for _ in range(n):
        k = int(rng.integers(lo, hi + 1))
        lab = tuple(int(t) for t in rng.integers(0, charset.glyph_count, k))
        out.append(lab + (charset.eos_id,))
    return out
