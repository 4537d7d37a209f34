"""Tractable probabilistic circuits over attributed, variable-size graphs."""
from .graphdata import (MASK, DataError, DatasetMeta, GraphInstance, PaddedGraph, Permutation,
                        load_dataset, pad, permute, split_dataset, tri_index)
from .model import PgcModel, QuerySpec, new_model
from .regiongraph import RegionGraphSpec

__all__ = [
    "MASK", "DataError", "DatasetMeta", "GraphInstance", "PaddedGraph", "Permutation",
    "load_dataset", "pad", "permute", "split_dataset", "tri_index",
    "PgcModel", "QuerySpec", "new_model", "RegionGraphSpec",
]
