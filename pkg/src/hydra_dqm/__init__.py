"""Near-real-time data-quality monitoring for streamed detector plots.

A staged inference pipeline (feeder -> load balancer -> predict workers
-> keeper) over a relational store, with analytics and an operator API.
"""

from .balancer import LoadBalancer, WorkerRegistry
from .classifier import ClassifierBackend, ReferenceClassifier, train_reference
from .feeder import Feeder
from .gradcam import gradcam
from .keeper import AlarmBus, CollectionPolicy, Keeper, confirm, decide_collection
from .model import (
    AlarmEvent,
    AlarmKind,
    CollectReason,
    ImageRecord,
    InferenceOrder,
    LabelAssignment,
    LabelDef,
    ModelRecord,
    PlotType,
    Report,
    RunHistoryEntry,
    RunTimeEntry,
    Severity,
    ThresholdConfig,
    TrainingSet,
)
from .naming import FileNameFields, format_filename, parse_filename
from .simulate import FailureEvent, FailureKind, FailureSchedule, generate_stream
from .store import MemoryStore, SqliteStore, Store, init_schema
from .transport import Channel
from .worker import PredictWorker

__version__ = "0.1.0"

__all__ = [
    "AlarmBus", "AlarmEvent", "AlarmKind", "Channel", "ClassifierBackend",
    "CollectReason", "CollectionPolicy", "FailureEvent", "FailureKind",
    "FailureSchedule", "Feeder", "FileNameFields", "ImageRecord",
    "InferenceOrder", "Keeper", "LabelAssignment", "LabelDef", "LoadBalancer",
    "MemoryStore", "ModelRecord", "PlotType", "PredictWorker",
    "ReferenceClassifier", "Report", "RunHistoryEntry", "RunTimeEntry",
    "Severity", "SqliteStore", "Store", "ThresholdConfig", "TrainingSet",
    "WorkerRegistry", "confirm", "decide_collection", "format_filename",
    "generate_stream", "gradcam", "init_schema", "parse_filename",
    "train_reference",
]
