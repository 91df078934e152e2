"""Knowledge graph embeddings with influential-example explanations."""

from .calibration import Calibrator, calibrate, reliability, reliability_table
from .calibration import fit as fit_calibrator
from .explain import (ExampleTriple, ExplainConfig, Explanation, IndexPair, explain, explain_batch,
                      explain_random_baseline, select_target)
from .graph import ExplanationGraph, PrototypeGraph, aggregate_prototype, assemble, explanation_graph, export
from .models import EarlyStopping, EmbeddingModel, ModelConfig, RankReport, rank_filtered, score, train
from .neighbors import NeighbourIndex
from .store import Dictionary, NeighbourhoodSlice, TripleStore, load_tsv

__version__ = "0.1.0"
