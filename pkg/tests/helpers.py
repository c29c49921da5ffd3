"""Small builders shared by the model, trainer and acceptance tests."""

import numpy as np

from mhred.data import BOS, EOS, EncodedExample, collate
from mhred.model import ModelConfig, ModelParams


def toy_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=11, emb_dim=8, hid_dim=8, img_dim=12, max_images=2, context_size=2)
    base.update(overrides)
    return ModelConfig(**base)


def random_items(rng, n, config, min_len=2, max_len=5, empty_prob=0.0):
    """Random encoded examples with 1..K images per turn and random text."""
    items = []
    for _ in range(n):
        ctx = []
        for _ in range(config.context_size):
            if rng.random() < empty_prob:
                ctx.append([])
            else:
                ctx.append(rng.integers(4, config.vocab_size, int(rng.integers(min_len, max_len + 1))).tolist())
        counts = rng.integers(0, config.max_images + 1, config.context_size)
        images = np.zeros((config.context_size, config.max_images, config.img_dim))
        for t, c in enumerate(counts):
            images[t, :c] = rng.normal(size=(c, config.img_dim))
        body = rng.integers(4, config.vocab_size, int(rng.integers(1, 4))).tolist()
        items.append(EncodedExample(ctx, images, counts.tolist(), [BOS] + body + [EOS]))
    return items


def toy_batch(seed=0, n=3, config=None, **kw):
    config = config or toy_config()
    rng = np.random.default_rng(seed)
    return collate(random_items(rng, n, config, **kw))


def toy_model(config=None, seed=0, scale=0.5):
    config = config or toy_config()
    return config, ModelParams.init(config, seed=seed, scale=scale)


def gradcheck_batch(seed=0):
    """Three examples at the toy gradient-check dims, all image slots filled."""
    config = toy_config()
    rng = np.random.default_rng(100 + seed)
    items = []
    for _ in range(3):
        ctx = [rng.integers(4, 11, int(rng.integers(2, 6))).tolist() for _ in range(2)]
        images = rng.normal(size=(2, 2, 12))
        target = [BOS] + rng.integers(4, 11, int(rng.integers(1, 4))).tolist() + [EOS]
        items.append(EncodedExample(ctx, images, [2, 2], target))
    return config, collate(items)
