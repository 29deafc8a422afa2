"""Event-driven online vertical federated learning simulator.

Clients hold disjoint feature slices of each streamed sample, the server
holds the label.  Participants train online with plain OGD, a static window
of losses re-evaluated at current parameters (SLR), or an exponentially
smoothed window of their own past gradients (DLR).
"""

from .events import ActivationSet, EventActivation, FullActivation, RandomActivation
from .metrics import MetricsSink, PrequentialWindow, SessionSummary, summarize
from .models import ClientModel, ParamStore, ServerModel, SumLogisticServer
from .optimizers import GradBuffer, OptimizerSpec
from .protocol import Simulation, Transport, build_simulation, dry_run_accounting
from .regret_audit import GradientTrace, RegretSeries, empirical_dlr, sublinearity_slope
from .streams import ClassSampler, DataStream, FeaturePartition, LabeledDataset

__all__ = [
    "ActivationSet", "EventActivation", "FullActivation", "RandomActivation",
    "MetricsSink", "PrequentialWindow", "SessionSummary", "summarize",
    "ClientModel", "ParamStore", "ServerModel", "SumLogisticServer",
    "GradBuffer", "OptimizerSpec",
    "Simulation", "Transport", "build_simulation", "dry_run_accounting",
    "GradientTrace", "RegretSeries", "empirical_dlr", "sublinearity_slope",
    "ClassSampler", "DataStream", "FeaturePartition", "LabeledDataset",
]
__version__ = "0.1.0"
