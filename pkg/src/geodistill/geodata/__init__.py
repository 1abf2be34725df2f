from .manifest import DatasetManifest, ManifestRecord, load_manifest, save_manifest
from .augment import augment
from .entropy import EntropyReport, dataset_entropy_report, image_entropy
from .synth import SynthSpec, downscale_u8, synth_proxy_generate

__all__ = [
    "DatasetManifest",
    "ManifestRecord",
    "load_manifest",
    "save_manifest",
    "augment",
    "EntropyReport",
    "dataset_entropy_report",
    "image_entropy",
    "SynthSpec",
    "downscale_u8",
    "synth_proxy_generate",
]
