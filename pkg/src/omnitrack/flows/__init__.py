"""Pairwise flow collection, filtering and the supervision set."""

from .correspondences import (
    CHAINED,
    RESCUED,
    CorrespondenceSet,
    EmptySupervisionError,
    FlowConfig,
    build_correspondence_set,
    filter_flows,
    prepare_correspondences,
)
from .fields import FeatureMap, FlowField, bilinear_sample, read_flow, write_flow
from .filtering import appearance_filter, chain_augment, cycle_error, cycle_filter, occlusion_rescue
from .providers import FlowCollectionError, ImportProvider, collect_pairwise_flows, patch_features

__all__ = [
    "CHAINED",
    "RESCUED",
    "CorrespondenceSet",
    "EmptySupervisionError",
    "FeatureMap",
    "FlowCollectionError",
    "FlowConfig",
    "FlowField",
    "ImportProvider",
    "appearance_filter",
    "bilinear_sample",
    "build_correspondence_set",
    "chain_augment",
    "collect_pairwise_flows",
    "cycle_error",
    "cycle_filter",
    "filter_flows",
    "occlusion_rescue",
    "patch_features",
    "prepare_correspondences",
    "read_flow",
    "write_flow",
]
