"""Shared builders: tiny geometries, toy models, synthetic corpora."""

import numpy as np
import pytest

from kvlatent.attention import HeadGeometry
from kvlatent.model import Model, ModelConfig, init_model
from kvlatent.rope import RopeConfig

WORDS = [
    "stone", "river", "cloud", "ember", "frost", "grove", "spark", "tide",
    "moss", "cliff", "wind", "shade", "root", "flame", "dust", "rain",
]


def make_corpus_text(seed: int = 0, n_sentences: int = 3000) -> str:
    """Predictable word-soup prose: low byte entropy, quick for a toy LM."""
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(n_sentences):
        a, b = WORDS[rng.integers(16)], WORDS[rng.integers(16)]
        verb = ("meets", "holds", "turns")[rng.integers(3)]
        parts.append(f"the {a} {verb} the {b} .")
    return " ".join(parts) + "\n"


def windows(text: str, seq_len: int) -> list[np.ndarray]:
    tokens = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    width = seq_len + 1
    n = len(tokens) // width
    return [tokens[i * width:(i + 1) * width] for i in range(n)]


def tiny_config(d_qk=8, d_vo=8, n_heads=2, n_kv_heads=1, d_model=16, n_layers=2,
                vocab=32, d_ffn=24, max_seq=32, rope_mode="standard",
                layout="half_split") -> ModelConfig:
    geom = HeadGeometry(d_model=d_model, n_heads=n_heads, n_kv_heads=n_kv_heads,
                        d_qk=d_qk, d_vo=d_vo)
    rope = RopeConfig(dim=d_qk, mode=rope_mode, layout=layout)
    return ModelConfig(vocab=vocab, n_layers=n_layers, geom=geom, d_ffn=d_ffn,
                       max_seq=max_seq, rope=rope)


def tiny_model(seed=0, dtype=np.float32, **kw) -> Model:
    return init_model(tiny_config(**kw), seed=seed, dtype=dtype)


@pytest.fixture(scope="session")
def corpus_text() -> str:
    return make_corpus_text(seed=7)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory, corpus_text) -> str:
    path = tmp_path_factory.mktemp("corpus") / "toy.txt"
    path.write_text(corpus_text, encoding="utf-8")
    return str(path)
