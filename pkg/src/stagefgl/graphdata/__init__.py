from .io import decode, decode_with_hash, encode, export_jsonl, load, load_with_hash, save
from .model import ClientPartition, FederatedGraph, MultimodalGraph, SynthConfig
from .partition import cut_size, partition_communities, partition_edgecut
from .perturb import (TEST, TRAIN, VAL, apply_feature_drift, apply_modality_noise,
                      drift_vectors, sample_non_edges, split_edges, split_train_val_test)
from .synth import client_modality_dims, encode_clients, generate_synthetic_mag

__all__ = [
    "ClientPartition", "FederatedGraph", "MultimodalGraph", "SynthConfig",
    "apply_feature_drift", "apply_modality_noise", "client_modality_dims", "cut_size",
    "decode", "decode_with_hash", "drift_vectors", "encode", "encode_clients", "export_jsonl",
    "generate_synthetic_mag", "load", "load_with_hash",
    "partition_communities", "partition_edgecut", "sample_non_edges", "save",
    "split_edges", "split_train_val_test", "TRAIN", "VAL", "TEST",
]
