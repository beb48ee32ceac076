"""Dataset manifests and event-level splitting.

A manifest groups images into events (one visit to one place).  Splitting
always moves whole events, so near-duplicate frames of one visit never end
up on both sides of a train/test boundary.
"""

import copy
import csv
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ManifestError

SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
MANIFEST_HEADER = ["image_path", "class_name", "event_id", "split"]

# image-level split fractions of the reference food-places dataset (train, val, test)
DEFAULT_RATIOS = (0.72, 0.09, 0.19)


@dataclass
class EventRecord:
    event_id: str
    class_label: str
    image_refs: list
    split: str = UNASSIGNED

    def __post_init__(self):
        if not self.image_refs:
            raise ManifestError(f"event {self.event_id!r} has no images")
        if self.split not in SPLITS + (UNASSIGNED,):
            raise ManifestError(f"event {self.event_id!r}: unknown split {self.split!r}")

    def __len__(self):
        return len(self.image_refs)


@dataclass
class DatasetManifest:
    class_names: list
    events: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        known = set(self.class_names)
        for ev in self.events:
            if ev.event_id in seen:
                raise ManifestError(f"duplicate event id {ev.event_id!r}")
            seen.add(ev.event_id)
            if ev.class_label not in known:
                raise ManifestError(f"event {ev.event_id!r} has unknown class {ev.class_label!r}")

    def class_index(self, name):
        return self.class_names.index(name)

    def resolve(self, ref):
        return self.root / ref

    def events_in(self, split):
        return [ev for ev in self.events if ev.split == split]

    def samples(self, split):
        """``(path, label index, event id)`` for every image of ``split`` in manifest order."""
        index = {name: i for i, name in enumerate(self.class_names)}
        return [
            (self.resolve(ref), index[ev.class_label], ev.event_id)
            for ev in self.events_in(split)
            for ref in ev.image_refs
        ]

    def num_images(self, split=None):
        return sum(len(ev) for ev in self.events if split is None or ev.split == split)

    def counts(self):
        """Per split: ``{"images": n, "events": m}``, recomputed from the events."""
        out = OrderedDict((s, {"images": 0, "events": 0}) for s in SPLITS + (UNASSIGNED,))
        for ev in self.events:
            out[ev.split]["images"] += len(ev)
            out[ev.split]["events"] += 1
        return out

    def class_counts(self, split):
        index = {name: i for i, name in enumerate(self.class_names)}
        counts = np.zeros(len(self.class_names), dtype=np.int64)
        for ev in self.events_in(split):
            counts[index[ev.class_label]] += len(ev)
        return counts

    def with_split(self, split):
        """Copy with every event assigned to ``split``."""
        out = copy.deepcopy(self)
        for ev in out.events:
            ev.split = split
        return out


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    events = OrderedDict()
    class_names = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            image, cls, event_id, split = (v.strip() for v in row)
            if split not in SPLITS + (UNASSIGNED,):
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if cls not in class_names:
                class_names.append(cls)
            ev = events.get(event_id)
            if ev is None:
                events[event_id] = EventRecord(event_id, cls, [image], split)
            else:
                if ev.class_label != cls or ev.split != split:
                    raise ManifestError(
                        f"{path}:{lineno}: event {event_id!r} mixes classes or splits "
                        f"({ev.class_label}/{ev.split} vs {cls}/{split})"
                    )
                ev.image_refs.append(image)
    return DatasetManifest(class_names, list(events.values()), path.parent)


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for ev in manifest.events:
            for ref in ev.image_refs:
                target = manifest.resolve(ref).resolve()
                rel = Path(os.path.relpath(target, base)).as_posix()
                w.writerow([rel, ev.class_label, ev.event_id, ev.split])
    return path


def merge_manifests(*manifests):
    """Concatenate manifests from different roots (image refs become absolute)."""
    names, events = [], []
    for m in manifests:
        for name in m.class_names:
            if name not in names:
                names.append(name)
        for ev in m.events:
            refs = [str(m.resolve(r).resolve()) for r in ev.image_refs]
            events.append(EventRecord(ev.event_id, ev.class_label, refs, ev.split))
    return DatasetManifest(names, events, Path("/"))


# splitting


def _validate_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    return ratios


def greedy_assign(sizes, ratios):
    """Assign events (already in processing order) to split indices 0/1/2.

    Each event goes to the split with the largest remaining image deficit
    ``ratio * total - assigned`` (ties: train, val, test).  With fewer than
    three events the first one is forced into train.
    """
    total = float(sum(sizes))
    targets = [r * total for r in ratios]
    filled = [0.0, 0.0, 0.0]
    out = []
    for i, size in enumerate(sizes):
        if i == 0 and len(sizes) < 3:
            s = 0
        else:
            deficits = [t - f for t, f in zip(targets, filled)]
            s = int(np.argmax(deficits))
        filled[s] += size
        out.append(s)
    return out


def event_split(manifest, ratios=DEFAULT_RATIOS, seed=0):
    """Split-assigned copy of ``manifest``; whole events per split, balanced per class.

    Within a class, events are processed largest first; equal-sized events
    are ordered by a permutation drawn from ``seed``.
    """
    ratios = _validate_ratios(ratios)
    rng = np.random.default_rng(seed)
    out = copy.deepcopy(manifest)
    for name in out.class_names:
        events = [ev for ev in out.events if ev.class_label == name]
        if not events:
            raise ManifestError(f"class {name!r} has no events to split")
        perm = rng.permutation(len(events))
        ordered = sorted((events[i] for i in perm), key=len, reverse=True)
        for ev, s in zip(ordered, greedy_assign([len(e) for e in ordered], ratios)):
            ev.split = SPLITS[s]
    return out


# per-class split statistics


def split_table(manifest):
    """Rows of (class, train images, train events, val images, val events, test images, test events, unassigned images, unassigned events)."""
    rows = []
    for name in manifest.class_names:
        row = [name]
        for split in SPLITS + (UNASSIGNED,):
            evs = [ev for ev in manifest.events if ev.class_label == name and ev.split == split]
            row += [sum(len(e) for e in evs), len(evs)]
        rows.append(row)
    return rows


STATS_HEADER = ["class", "train_images", "train_events", "val_images", "val_events",
                "test_images", "test_events", "unassigned_images", "unassigned_events"]


def write_stats(manifest, path):
    rows = split_table(manifest)
    totals = ["TOTAL"] + [sum(r[i] for r in rows) for i in range(1, len(STATS_HEADER))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        w.writerows(rows)
        w.writerow(totals)
    return path


def format_stats(manifest):
    rows = split_table(manifest)
    widths = [max(len(STATS_HEADER[0]), *(len(r[0]) for r in rows))] + [len(h) for h in STATS_HEADER[1:]]
    lines = ["  ".join(h.ljust(w) for h, w in zip(STATS_HEADER, widths))]
    for r in rows:
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)
