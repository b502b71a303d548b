import pytest
import torch

from mel.config import ClipConfig, DecodingConfig, FeatureSpec, ReplayConfig, TrainConfig
from mel.taskenv import make_query
from mel.vocab import ANSWER_MARKER, BOS, DIGITS, EOS, HINT_CLOSE, HINT_OPEN, MODCHAIN_VOCAB, NEWLINE, Vocabulary


@pytest.fixture
def small_vocab():
    return Vocabulary((BOS, EOS, ANSWER_MARKER, HINT_OPEN, HINT_CLOSE, *DIGITS, NEWLINE))


@pytest.fixture
def small_spec():
    return FeatureSpec(window=3, phase_cap=4)


@pytest.fixture
def random_weights():
    def build(rows, cols, seed=0, scale=0.5):
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(rows, cols, generator=gen, dtype=torch.float64) * scale

    return build


@pytest.fixture
def chain_query():
    # 4 + 3 - 2 mod 5: values 2, 0
    return make_query("modchain-t-00000", "modchain", (4, 3, 2), ("+", "-"), 5, MODCHAIN_VOCAB)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        group_size=4,
        queries_per_step=4,
        total_steps=2,
        checkpoint_interval=1,
        lambda_mel=1.0,
        pair_cap=2,
        seed=3,
        warmup_steps=8,
        warmup_learning_rate=0.5,
        warmup_demos=8,
        policy=FeatureSpec(window=4, phase_cap=5),
        decoding=DecodingConfig(temperature=1.0, max_tokens=14, seed=0),
        clip=ClipConfig(learning_rate=0.05),
        replay=ReplayConfig(attempts=1, temperature=0.0, max_tokens=14),
    )
