from .bow import BagOfWords, build_bow, tokenize
from .cluster import NOISE, ClusterAssignment, cluster_hdbscan, cluster_kmeans
from .mapping import ClusterClassMap, evaluate_discovery, map_clusters
from .reduce import ReductionConfig, reduce_dimensions

__all__ = [
    "NOISE",
    "BagOfWords",
    "ClusterAssignment",
    "ClusterClassMap",
    "ReductionConfig",
    "build_bow",
    "cluster_hdbscan",
    "cluster_kmeans",
    "evaluate_discovery",
    "map_clusters",
    "reduce_dimensions",
    "tokenize",
]
