from .augment import AugmentationPolicy, augment
from .batches import ImageStore, batch_iterator
from .imageio import load_image, save_image
from .manifest import (
    DEFAULT_RATIOS,
    SPLITS,
    DatasetManifest,
    EventRecord,
    event_split,
    merge_manifests,
    read_manifest,
    write_manifest,
    write_stats,
)
from .synth import generate_synthetic_dataset

__all__ = [
    "AugmentationPolicy", "DEFAULT_RATIOS", "DatasetManifest", "EventRecord", "ImageStore", "SPLITS",
    "augment", "batch_iterator", "event_split", "generate_synthetic_dataset", "load_image",
    "merge_manifests", "read_manifest", "save_image", "write_manifest", "write_stats",
]
