from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from rris.config import ModelConfig
from rris.logging import logger
from rris.toy.layers import leaf_grads, lift, named_leaves
from rris.toy.model import ToyModelParams, init_params, model_loss

SYNTHETIC_TEXT_LEN = 6


@dataclass
class Batch:
    images: np.ndarray
    token_ids: np.ndarray
    gt: np.ndarray
    exists: np.ndarray


def synthetic_batch(config: ModelConfig, pairs: int = 2, seed: int = 0) -> Batch:
    """Random images, each used once with a describing and once with a non-matching expression.

    Positives carry a random box as ground truth; negatives an empty mask.
    """
    rng = np.random.default_rng(seed)
    size = config.image_size
    length = min(SYNTHETIC_TEXT_LEN, config.max_text_len)

    images, ids, gt, exists = [], [], [], []
    for _ in range(pairs):
        image = rng.random((size, size, config.in_channels))
        top, left = rng.integers(0, size // 2, 2)
        bottom, right = top + rng.integers(size // 4, size // 2 + 1), left + rng.integers(size // 4, size // 2 + 1)
        box = np.zeros((size, size), dtype=bool)
        box[top:bottom, left:right] = True

        images += [image, image]
        ids += [rng.integers(0, config.vocab_size, length), rng.integers(0, config.vocab_size, length)]
        gt += [box, np.zeros_like(box)]
        exists += [1.0, 0.0]

    return Batch(
        images=np.stack(images),
        token_ids=np.stack(ids),
        gt=np.stack(gt),
        exists=np.array(exists),
    )


def batch_loss(params, config: ModelConfig, batch: Batch):
    return model_loss(params, config, batch.images, batch.token_ids, batch.gt, batch.exists)


def train(
    config: ModelConfig,
    steps: int,
    lr: float = 0.5,
    seed: int = 0,
    params: Optional[ToyModelParams] = None,
    progress: bool = False,
) -> List[float]:
    """Full-batch gradient descent on a synthetic batch; returns the loss before each step."""
    params = params or init_params(config)
    batch = synthetic_batch(config, seed=seed)

    losses = []
    for step in tqdm(range(steps), desc="training", disable=not progress):
        lifted = lift(params)
        loss = batch_loss(lifted, config, batch)
        loss.backward()
        grads = leaf_grads(lifted)
        for name, leaf in named_leaves(params):
            leaf -= lr * grads[name]
        losses.append(float(loss.value))
        logger.info(f"step {step}: loss {losses[-1]:.6f}")
    return losses
