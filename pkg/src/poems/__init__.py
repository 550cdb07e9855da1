"""Gated product-of-experts VAE for multi-omics subtyping with a
spike-and-slab lasso sparse decoder, written in plain numpy."""

from .errors import ContractError, IngestionError, NumericError, PoemsError, ShapeError
from .model import encode, gate, poe_fuse, reparameterize, sparse_decode, sparse_decode_reference
from .objective import TrainConfig, elbo_step, fused_posterior, train
from .data import SynthSpec, align, load_labels, load_omics_csv, split, standardize, synth_generate
from .evaluation import evaluate, hungarian_acc, kmeans, knn_acc, nmi
from .persist import load_model, save_model

__version__ = "0.1.0"
