"""Predict Lightning channel balances from public graph data and route on the predictions."""

from .errors import (CorruptModelError, DataError, InsufficientDataError, InvariantError,
                     LnBalanceError, SchemaMismatchError, SnapshotParseError, ValidationError)
from .graph import ChannelGraph, DirectedEdge, load_labels, load_snapshot, parse_snapshot
from .datagen import SynthConfig, generate_synthetic
from .features import FeatureSchema, build_rows, make_schema
from .spectral import PositionalTable, laplacian_encodings
from .forest import ForestConfig, RandomForestModel, fit
from .models import Estimator, predict_edge, train_variant
from .evaluation import SplitSpec, compute_metrics, run_benchmark, split
from .routing import RouteQuery, RoutingResult, find_path, simulate

__version__ = "0.1.0"
