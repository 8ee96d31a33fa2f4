"""Time-aware graph convolution for sequential recommendation, on plain numpy."""
from .config import ModelConfig, load_config
from .convolution import embed_batch, embed_node
from .evaluation import evaluate, ndcg_at_k, popularity_baseline, rank_items, recall_at_k
from .graph import (Interaction, InteractionLog, build_graph, build_node_flow, chronological_split,
                    ingest, k_core_filter, leave_last_out_split, read_canonical, write_canonical)
from .model import init_model
from .synthetic import GeneratorSpec, generate
from .training import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
