"""Self-supervised representation learning for check-in sequences."""

__version__ = "0.1.0"

from .ingest import (  # noqa: F401
    CheckInRecord,
    CheckInSequence,
    DatasetBundle,
    SocialGraph,
    build_bundle,
    filter_and_segment,
    load_bundle,
    parse_checkins,
    save_bundle,
)
from .geocode import GeohashCode, geohash_decode, geohash_encode, time_slot  # noqa: F401
from .losses import LossWeights, PrototypeBank, RepresentationQueue  # noqa: F401
from .encoders import ModelConfig  # noqa: F401
from .pretrain import PretrainConfig, TrainState, export_representations  # noqa: F401
from .finetune import FinetuneConfig, finetune_classify, finetune_tp  # noqa: F401
from .metrics import RankedPrediction, acc_at_k, mrr, tp_metrics  # noqa: F401
from .synth import SynthSpec, generate  # noqa: F401

# the pretrain/finetune entry points live in their submodules
# (re-exporting them here would shadow the submodules on the package object)
