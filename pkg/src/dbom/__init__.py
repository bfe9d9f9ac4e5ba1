"""Dataset vetting for backdoor triggers.

Poisons image corpora with configurable trigger patterns and trains a
disentangled trigger/object detector over frozen encoders, flagging
poisoned samples and naming trigger and object even for pairings never
seen in training.
"""

from dbom.config import DetectorConfig, load_config, save_config
from dbom.corpus import make_clean_corpus, make_paired_corpus, separable_trigger_set
from dbom.metrics import (
    CzslMetrics,
    PoisonMetrics,
    bias_curve,
    czsl_metrics,
    harmonic_mean,
    poison_metrics,
    trigger_confusion,
)
from dbom.model import DetectorModel, load_checkpoint, save_checkpoint
from dbom.pairs import PairSpace, PairSplit, build_pair_space, load_split, save_split, split_pairs
from dbom.poisoning import (
    PoisonManifest,
    SampleRecord,
    Split,
    TriggerKind,
    TriggerSpec,
    apply_trigger,
    default_trigger_set,
    expand_pairing_space,
    load_manifest,
    poison_dataset,
    save_manifest,
)
from dbom.reporting import report
from dbom.trainer import ScanResult, Verdict, fit, predict, scan, scan_images

__all__ = [
    "CzslMetrics",
    "DetectorConfig",
    "DetectorModel",
    "PairSpace",
    "PairSplit",
    "PoisonManifest",
    "PoisonMetrics",
    "SampleRecord",
    "ScanResult",
    "Split",
    "TriggerKind",
    "TriggerSpec",
    "Verdict",
    "apply_trigger",
    "bias_curve",
    "build_pair_space",
    "czsl_metrics",
    "default_trigger_set",
    "expand_pairing_space",
    "fit",
    "harmonic_mean",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "load_split",
    "make_clean_corpus",
    "make_paired_corpus",
    "poison_dataset",
    "poison_metrics",
    "predict",
    "report",
    "save_checkpoint",
    "save_config",
    "save_manifest",
    "save_split",
    "scan",
    "scan_images",
    "separable_trigger_set",
    "split_pairs",
    "trigger_confusion",
]
