"""Distributed linear learning over a tree AllReduce."""
from .comm import (Collective, Coordinator, LazySession, LocalCollective, ReduceOp, TreeSession,
                   tree_reduce_serial)
from .data import Dataset, SparseExample, hash_feature, load_dataset, make_logistic, parse_example, shard_dataset
from .lbfgs import lbfgs_optimize
from .model import LossKind, Objective
from .online import Invariance, ModelState, OnlineConfig, sgd_pass
from .strategies import Kind, RunReport, Strategy, load_model, run_strategy, save_model

__version__ = "0.1.0"
