"""Self-paced pseudo labeling for 3D detection from 2D supervision."""

from .boxlabel import BoxLabel, LabelSet, read_labels, write_labels
from .config import default_config, load_config
from .geom import Box3D, CameraModel, PointCloud, Rect2D, RigidTransform
from .ingest import Detection2D, FrameBundle, load_sequence
from .pipeline import eval_labels, generate_labels, train_pipeline
from .pointlabel import PointLabel
from .proto import MemoryBank, PrototypeBank, load_checkpoint, save_checkpoint
from .synth import SynthObject, SynthSceneSpec, synth_scene, write_scene

__version__ = "0.1.0"

__all__ = [
    "Box3D", "BoxLabel", "CameraModel", "Detection2D", "FrameBundle",
    "LabelSet", "MemoryBank", "PointCloud", "PointLabel", "PrototypeBank",
    "Rect2D", "RigidTransform", "SynthObject", "SynthSceneSpec",
    "default_config", "eval_labels", "generate_labels", "load_checkpoint",
    "load_config", "load_sequence", "read_labels", "save_checkpoint",
    "synth_scene", "train_pipeline", "write_labels", "write_scene",
    "__version__",
]
