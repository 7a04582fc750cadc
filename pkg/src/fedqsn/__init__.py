"""Federated learning with masked, quantized proxy models.

The server keeps its full model private: clients only ever train on a
proxy built by random column masking plus blockwise quantization, and the
server restores the hidden columns once training ends.
"""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, default_config, parse_config
from .data import ClientDataset, Dataset, PartitionSpec, gen_synthetic, load_csv, partition
from .masking import MaskRecord, MaskSpec, apply_mask, compose_masks, draw_mask
from .metrics import RoundReport, cosine_similarity, evaluate, gap_report
from .models import Batch, ModelSpec, init_model, local_train, loss_and_grad, sgd_step
from .protocol import (
    ClientUpdate,
    FedConfig,
    ServerState,
    aggregate,
    fedavg,
    make_proxy,
    reconstruct_final,
    run_round,
    secure_aggregate,
    select_clients,
    server_init,
)
from .quantization import QuantConfig, QuantizedModel, dequantize, quantization_error_bound, quantize
from .runner import RunSummary, compare, run_experiment, sweep, with_axis, with_seed
from .tensor import ModelState, axpy, clone_structure, flatten

__version__ = "0.1.0"
