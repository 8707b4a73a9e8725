"""Distributed stratified locality sensitive hashing for K-NN prediction."""
from .lsh_hash import ComposedHash, Family, HashSpec, derive_composed_hash, hash_point
from .orchestrator import ClusterConfig, Orchestrator, VotingConfig, in_process_cluster, weighted_vote
from .points import KnnEntry, LabeledPoint, PointSet, read_dataset, write_dataset
from .slsh_index import QueryStats, SlshConfig, SlshIndex, merge_topk

__version__ = "0.1.0"
