"""Graph classification with a moment-based graph encoder trained against graph kernels.

The encoder turns a graph into a fixed-width embedding; decoders reconstruct
the adjacency matrix and WL / shortest-path / spectral-distance kernel
similarities, and a small head classifies graphs.
"""
from .graph import (ConvergenceError, Graph, GraphError, complete_graph, conv_filter, cycle_graph, disjoint_union,
                    eigendecompose, gaussian_features, laplacian, make_rng, normalized_adjacency,
                    normalized_laplacian, path_graph, permute, random_graph, spectral_node_features)
from .kernels import KINDS, KernelConfig, KernelMatrix, dataset_kernels, kernel_matrix
from .model import EncoderConfig, Model
from .encoder import encode, encode_batch, embed_dataset, make_batch, prepare_graphs
from .losses import FINETUNE, PRETRAIN, LossWeights, total_loss
from .data import (Dataset, DataFormatError, load_checkpoint, load_tu, model_from_checkpoint, save_checkpoint,
                   synth_cycles_vs_cliques, synth_sparse_vs_dense, write_tu)
from .training import (FoldResult, TrainConfig, cross_validate, finetune, lr_at, prepare_dataset, pretrain,
                       stratified_folds)

__version__ = "0.1.0"
