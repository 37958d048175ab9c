"""Full-body motion reconstruction from sparse VR sensors (headset + two
hand controllers) via a 22-node body pose graph network."""

from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, load_run_config
from .skeleton import (
    NUM_JOINTS,
    PoseEstimate,
    SkeletonModel,
    bone_lengths,
    default_skeleton,
    forward_kinematics,
    load_skeleton,
)
from .sensorio import (
    MotionSequence,
    SensorFrame,
    SensorWindow,
    extract_sensors,
    load_motion,
    make_windows,
    save_motion,
    split_sequences,
    synth_generate,
)
from .bpgnet import BpgNet, PoseModel, bpg_forward, compose_adjacency, static_adjacency, vanilla_gcn_forward
from .featinit import FeatureInit, assemble_features
from .learning import (
    LossBreakdown,
    MetricReport,
    build_dataset,
    evaluate,
    evaluate_dataset,
    gradcheck,
    gradcheck_all,
    loss_bone,
    loss_pos,
    loss_rot,
    total_loss,
    train,
)

__version__ = "0.1.0"
