"""Sequential copying of black-box hard-label classifiers into small neural networks."""

from .copynet import CopyNet, EpsilonSchedule, CapacityBudget, OptimizerState
from .datagen import LabeledDataset, Sampler, make_moons, make_spirals, make_yinyang, standardize, split_stratified
from .engine import RunConfig, RunRecord, SyntheticSet, run_online, run_pure_sequential, run_sequential, run_single_pass
from .oracle import AnalyticOracle, GridOracle, NearestNeighborOracle, make_nn_oracle

__version__ = "0.1.0"
