"""trainharness: desk-scale CNN training over vergepipe dataset manifests."""

from .augment import AugmentationPolicy, augment, deterministic_group
from .data import Manifest, VergeDataset, balanced_order, iter_batches, read_manifest
from .model import BaselineVergeNet, build_model
from .predict import export_embeddings, predict
from .train import TrainSchedule, load_checkpoint, train

__version__ = "0.1.0"
