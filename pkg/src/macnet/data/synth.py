"""Procedural stand-in for a private egocentric food-places photo-stream dataset.

Every class is a texture family (palette, stripe orientation, stripe
frequency) fixed by the class index and ``family_seed`` only, so datasets
drawn with different ``seed`` values share their classes and can serve as
held-out events for each other.  An event is one base sample of its family;
its frames are small perturbations of that sample, like consecutive shots of
one visit.
"""

import colorsys
import math
from pathlib import Path

import numpy as np

from .imageio import save_image, to_uint8
from .manifest import DEFAULT_RATIOS, UNASSIGNED, DatasetManifest, EventRecord, event_split, write_manifest, write_stats

FOOD_PLACES = (
    "bakery_shop", "banquet_hall", "bar", "beer_hall", "butchers_shop", "cafeteria", "candy_store",
    "coffee_shop", "delicatessen", "dining_room", "fastfood_restaurant", "food_court",
    "ice_cream_parlor", "kitchen", "market_indoor", "market_outdoor", "picnic_area", "pizzeria",
    "pub_indoor", "restaurant", "supermarket", "sushi_bar",
)


def class_names_for(num_classes):
    if num_classes <= len(FOOD_PLACES):
        return list(FOOD_PLACES[:num_classes])
    return [f"class_{i:03d}" for i in range(num_classes)]


def class_family(index, num_classes, family_seed=0):
    rng = np.random.default_rng([family_seed, index])
    hue = (index / num_classes + rng.uniform(-0.02, 0.02)) % 1.0
    primary = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))
    secondary = np.array(colorsys.hsv_to_rgb((hue + 0.1) % 1.0, 0.55, 0.35))
    return {
        "primary": primary,
        "secondary": secondary,
        "angle": math.pi * index / num_classes + rng.uniform(-0.1, 0.1),
        "frequency": 2.0 + 4.0 * ((index * 0.618034) % 1.0),
    }


def _render(family, size, phase, angle, freq, tint, blob, rng=None, shift=(0.0, 0.0), noise=0.0):
    h, w = size
    yy, xx = np.meshgrid(np.arange(h) + shift[0], np.arange(w) + shift[1], indexing="ij")
    u = (xx * math.cos(angle) + yy * math.sin(angle)) / max(h, w)
    t = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + phase)
    img = family["secondary"][:, None, None] * (1 - t) + family["primary"][:, None, None] * t
    img = img + tint[:, None, None]
    cy, cx, r, col = blob
    mask = ((yy - cy * h) ** 2 + (xx - cx * w) ** 2) < (r * min(h, w)) ** 2
    img = np.where(mask[None], 0.7 * img + 0.3 * col[:, None, None], img)
    if noise and rng is not None:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(out_dir, num_classes=4, events_per_class=5, images_per_event=(4, 4),
                               image_size=(64, 64), seed=0, family_seed=0, split=None, split_seed=0):
    """Write PPM images, ``manifest.csv`` and ``stats.csv`` under ``out_dir``.

    ``split`` is None (events left unassigned), a split name for every
    event, or a (train, val, test) ratio triple passed to the event splitter.
    """
    if min(num_classes, events_per_class, *images_per_event, *image_size) < 1:
        raise ValueError("all counts and extents must be positive")
    lo, hi = images_per_event
    if lo > hi:
        raise ValueError(f"images_per_event range {images_per_event} is reversed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 1])
    names = class_names_for(num_classes)
    events = []
    for k, name in enumerate(names):
        family = class_family(k, num_classes, family_seed)
        (out_dir / "images" / name).mkdir(parents=True, exist_ok=True)
        for e in range(events_per_class):
            event_id = f"{name}_s{seed}_e{e:03d}"
            phase = rng.uniform(0, 2 * math.pi)
            angle = family["angle"] + rng.uniform(-0.15, 0.15)
            freq = family["frequency"] * rng.uniform(0.85, 1.15)
            tint = rng.uniform(-0.05, 0.05, 3)
            blob = (rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.25), rng.uniform(0, 1, 3))
            frames = int(rng.integers(lo, hi + 1))
            refs = []
            for f in range(frames):
                shift = rng.uniform(-2.0, 2.0, 2)
                img = _render(family, image_size, phase, angle, freq, tint + rng.uniform(-0.02, 0.02, 3),
                              blob, rng, shift=shift, noise=0.03)
                rel = Path("images") / name / f"{event_id}_f{f:03d}.ppm"
                save_image(out_dir / rel, to_uint8(img))
                refs.append(rel.as_posix())
            events.append(EventRecord(event_id, name, refs, UNASSIGNED))
    manifest = DatasetManifest(names, events, out_dir)
    if isinstance(split, str):
        manifest = manifest.with_split(split)
    elif split is not None:
        manifest = event_split(manifest, split, split_seed)
    write_manifest(manifest, out_dir / "manifest.csv")
    write_stats(manifest, out_dir / "stats.csv")
    return manifest


__all__ = ["DEFAULT_RATIOS", "FOOD_PLACES", "class_family", "class_names_for", "generate_synthetic_dataset"]
