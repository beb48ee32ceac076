from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import ContractError
from ..tensor import Tensor
from .augment import augment
from .imageio import load_image


class ImageStore:
    """Decoded-image cache keyed by path."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._cache = {}

    def load(self, path):
        key = str(path)
        img = self._cache.get(key)
        if img is None:
            img = load_image(path, dtype=np.float64).astype(self.dtype)
            self._cache[key] = img
        return img


def epoch_order(n, split, seed, epoch):
    if split == "train":
        return np.random.default_rng([seed, epoch]).permutation(n)
    return np.arange(n)


def sample_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index, 0xA06])


def batch_iterator(manifest, split, batch_size, seed=0, epoch=0, policy=None, store=None, workers=0):
    """Yield ``(images, labels)`` batches for one epoch of ``split``.

    Train order is a permutation drawn from ``(seed, epoch)``; other splits
    keep manifest order.  Augmentation (train only) draws from a stream
    seeded by ``(seed, epoch, sample index)``, so results do not depend on
    ``workers``.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    samples = manifest.samples(split)
    if not samples:
        raise ContractError(f"split {split!r} has no images")
    store = store or ImageStore()
    order = epoch_order(len(samples), split, seed, epoch)
    use_aug = split == "train" and policy is not None and policy.enabled

    def prepare(i):
        img = store.load(samples[i][0])
        if use_aug:
            img = augment(img, policy, sample_rng(seed, epoch, int(i)))
        return img

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            imgs = list(pool.map(prepare, idx)) if pool else [prepare(i) for i in idx]
            labels = np.array([samples[i][1] for i in idx], dtype=np.int64)
            yield Tensor(np.stack(imgs).astype(store.dtype, copy=False)), labels
    finally:
        if pool:
            pool.shutdown()
