"""Motion data ingestion, sensor extraction, windowing and synthesis.

Motion file format (text, LF newlines): header line ``fps <float> joints 22``
followed by one line per frame holding 3 root-translation floats and 66
axis-angle floats (joints 0..21, x y z each), space separated. Floats are
written with ``repr`` so save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .skeleton import NUM_JOINTS, SkeletonModel, forward_kinematics

# SMPL indices of the sensed joints, in stream order.
HEAD_JOINT = 15
LEFT_HAND_JOINT = 20
RIGHT_HAND_JOINT = 21
SENSOR_JOINTS = (HEAD_JOINT, LEFT_HAND_JOINT, RIGHT_HAND_JOINT)
NUM_SENSORS = 3


class MotionParseError(ValueError):
    """Raised for malformed motion files; carries the offending line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class MotionSequence:
    """Ground-truth full-body motion at a fixed frame rate."""

    fps: float
    root_pos: np.ndarray  # (T, 3) meters
    local_rot: np.ndarray  # (T, 22, 3) axis-angle

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.local_rot = np.asarray(self.local_rot, dtype=np.float64)
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.root_pos.ndim != 2 or self.root_pos.shape[1] != 3:
            raise ValueError("root_pos must have shape (T, 3)")
        if self.local_rot.shape != (len(self.root_pos), NUM_JOINTS, 3):
            raise ValueError("local_rot must have shape (T, 22, 3)")
        if len(self.root_pos) < 2:
            raise ValueError("a motion sequence needs at least 2 frames")
        if not (np.isfinite(self.root_pos).all() and np.isfinite(self.local_rot).all()):
            raise ValueError("motion contains non-finite values")

    def __len__(self) -> int:
        return len(self.root_pos)


@dataclass
class SensorFrame:
    """Measurements of the 3 tracked joints for one frame (order: head, left hand, right hand)."""

    pos: np.ndarray  # (3, 3) meters
    rot: np.ndarray  # (3, 3, 3) global rotation matrices


@dataclass
class SensorWindow:
    """K consecutive sensor frames ending at the target frame."""

    frames: tuple[SensorFrame, ...]
    fps: float
    target_index: int  # index of the last frame in the source stream

    def __len__(self) -> int:
        return len(self.frames)

    def positions(self) -> np.ndarray:
        """(K, 3, 3) stacked sensor positions."""
        return np.stack([f.pos for f in self.frames])

    def rotations(self) -> np.ndarray:
        """(K, 3, 3, 3) stacked sensor rotations."""
        return np.stack([f.rot for f in self.frames])


def _fmt(x: float) -> str:
    return repr(float(x))


def save_motion(seq: MotionSequence, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"fps {_fmt(seq.fps)} joints {NUM_JOINTS}\n")
        for i in range(len(seq)):
            vals = list(seq.root_pos[i]) + list(seq.local_rot[i].reshape(-1))
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def load_motion(path) -> MotionSequence:
    """Parse a motion file; raises MotionParseError naming the bad line."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise MotionParseError(path, 1, "empty file")
        parts = header.split()
        if len(parts) != 4 or parts[0] != "fps" or parts[2] != "joints":
            raise MotionParseError(path, 1, "header must be 'fps <float> joints 22'")
        try:
            fps = float(parts[1])
            joints = int(parts[3])
        except ValueError:
            raise MotionParseError(path, 1, "unparseable header numbers") from None
        if joints != NUM_JOINTS:
            raise MotionParseError(path, 1, f"expected 22 joints, file declares {joints}")
        if not (math.isfinite(fps) and fps > 0):
            raise MotionParseError(path, 1, f"fps must be a positive finite number, got {parts[1]}")

        ncols = 3 + NUM_JOINTS * 3
        root, rots = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cols = line.split()
            if len(cols) != ncols:
                raise MotionParseError(path, lineno, f"expected {ncols} columns, got {len(cols)}")
            try:
                vals = np.array([float(c) for c in cols], dtype=np.float64)
            except ValueError:
                raise MotionParseError(path, lineno, "unparseable float") from None
            if not np.isfinite(vals).all():
                raise MotionParseError(path, lineno, "non-finite value")
            root.append(vals[:3])
            rots.append(vals[3:].reshape(NUM_JOINTS, 3))
    if len(root) < 2:
        raise MotionParseError(path, 1, f"sequence has {len(root)} frames, need at least 2")
    return MotionSequence(fps=fps, root_pos=np.array(root), local_rot=np.array(rots))


def extract_sensors(seq: MotionSequence, skel: SkeletonModel) -> list[SensorFrame]:
    """Run FK over the sequence and read off the head/hand joints."""
    local = torch.as_tensor(seq.local_rot)
    root = torch.as_tensor(seq.root_pos)
    positions, global_rot = forward_kinematics(local, root, skel)
    pos = positions.numpy()
    rot = global_rot.numpy()
    idx = list(SENSOR_JOINTS)
    return [SensorFrame(pos=pos[t, idx].copy(), rot=rot[t, idx].copy()) for t in range(len(seq))]


def make_windows(sensors: list[SensorFrame], k: int, fps: float) -> list[SensorWindow]:
    """Stride-1 windows of length ``k``; one window per target frame.

    Sequences shorter than ``k`` yield an empty list.
    """
    if k < 2:
        raise ValueError("window length must be at least 2")
    out = []
    for last in range(k - 1, len(sensors)):
        out.append(SensorWindow(frames=tuple(sensors[last - k + 1 : last + 1]), fps=fps, target_index=last))
    return out


def finite_diff_velocity(p_prev, p_cur, fps: float):
    """Backward-difference velocity in m/s."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    return (np.asarray(p_cur, dtype=np.float64) - np.asarray(p_prev, dtype=np.float64)) * fps


def split_sequences(seqs, test_fraction: float = 0.1, seed: int = 0):
    """Deterministic train/test split by whole sequence (seeded shuffle)."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(seqs))
    n_test = int(round(len(seqs) * test_fraction))
    if n_test == 0 and test_fraction > 0 and len(seqs) > 1:
        n_test = 1
    test_idx = set(order[:n_test].tolist())
    train = [s for i, s in enumerate(seqs) if i not in test_idx]
    test = [s for i, s in enumerate(seqs) if i in test_idx]
    return train, test


SYNTH_KINDS = ("walk", "kick", "idle")


def synth_generate(kind: str, n_frames: int, fps: float, seed: int) -> MotionSequence:
    """Deterministic synthetic motion for desk-scale experiments.

    All joint trajectories are smooth sinusoids with per-seed randomized
    frequencies, amplitudes and phases; magnitudes stay within 2.0 rad.
    ``walk`` advances the root and swings left/right limbs in exact
    anti-phase (the right-side angle is the negated left-side angle).
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {SYNTH_KINDS}")
    if n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    if fps <= 0:
        raise ValueError("fps must be positive")

    rng = np.random.default_rng(seed)
    t = np.arange(n_frames, dtype=np.float64) / fps
    rot = np.zeros((n_frames, NUM_JOINTS, 3), dtype=np.float64)
    root = np.zeros((n_frames, 3), dtype=np.float64)

    if kind == "walk":
        stride_hz = 0.85 + 0.2 * rng.uniform(-1.0, 1.0)
        omega = 2.0 * math.pi * stride_hz
        phase = rng.uniform(0.0, 2.0 * math.pi)
        speed = 1.1 + 0.15 * rng.uniform(-1.0, 1.0)
        a_hip = 0.55 + 0.1 * rng.uniform(-1.0, 1.0)
        a_knee = 0.85 + 0.1 * rng.uniform(-1.0, 1.0)
        a_arm = 0.35 + 0.1 * rng.uniform(-1.0, 1.0)

        hip = a_hip * np.sin(omega * t + phase)
        rot[:, 1, 0] = hip
        rot[:, 2, 0] = -hip  # anti-phase: sin(x + pi) == -sin(x)
        knee = a_knee * 0.5 * (1.0 - np.cos(omega * t + phase))
        rot[:, 4, 0] = knee
        rot[:, 5, 0] = a_knee * 0.5 * (1.0 + np.cos(omega * t + phase))
        ankle = 0.15 * np.sin(omega * t + phase + 0.4)
        rot[:, 7, 0] = ankle
        rot[:, 8, 0] = -ankle
        arm = a_arm * np.sin(omega * t + phase)
        rot[:, 16, 0] = -arm  # arms swing opposite the same-side leg
        rot[:, 17, 0] = arm
        rot[:, 18, 2] = 0.25 + 0.1 * np.sin(omega * t + phase + 1.1)
        rot[:, 19, 2] = -(0.25 + 0.1 * np.sin(omega * t + phase + 1.1))
        rot[:, 3, 1] = 0.06 * np.sin(omega * t + phase)
        rot[:, 6, 1] = 0.04 * np.sin(omega * t + phase + 0.3)
        rot[:, 9, 0] = 0.03 * np.sin(2.0 * omega * t + phase)
        rot[:, 12, 0] = 0.04 * np.sin(2.0 * omega * t + phase + 0.7)
        rot[:, 15, 0] = 0.02 * np.sin(2.0 * omega * t + phase + 1.2)
        root[:, 2] = speed * t
        root[:, 1] = 0.02 * np.sin(2.0 * omega * t + phase)
        root[:, 0] = 0.015 * np.sin(omega * t + phase)
    elif kind == "kick":
        kick_hz = 0.55 + 0.1 * rng.uniform(-1.0, 1.0)
        omega = 2.0 * math.pi * kick_hz
        phase = rng.uniform(0.0, 2.0 * math.pi)
        a_kick = 1.15 + 0.15 * rng.uniform(-1.0, 1.0)

        swing = np.sin(omega * t + phase)
        rot[:, 2, 0] = -a_kick * np.clip(swing, 0.0, None) ** 2  # right hip drives the kick
        rot[:, 5, 0] = 0.9 * a_kick * np.clip(np.sin(omega * t + phase - 0.8), 0.0, None) ** 2
        rot[:, 1, 0] = 0.08 * np.sin(omega * t + phase)
        rot[:, 4, 0] = 0.10 + 0.05 * np.sin(omega * t + phase + 0.5)
        rot[:, 16, 0] = 0.3 * np.sin(omega * t + phase + math.pi)
        rot[:, 17, 0] = -0.3 * np.sin(omega * t + phase + math.pi)
        rot[:, 3, 0] = -0.12 * np.clip(swing, 0.0, None)
        rot[:, 6, 0] = -0.08 * np.clip(swing, 0.0, None)
        rot[:, 9, 0] = 0.04 * np.sin(omega * t + phase)
        root[:, 1] = 0.01 * np.sin(2.0 * omega * t + phase)
        root[:, 0] = 0.008 * np.sin(omega * t + phase)
    else:  # idle
        omega = 2.0 * math.pi * (0.25 + 0.05 * rng.uniform(-1.0, 1.0))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=NUM_JOINTS)
        amps = rng.uniform(0.005, 0.03, size=NUM_JOINTS)
        for j in range(NUM_JOINTS):
            rot[:, j, 0] = amps[j] * np.sin(omega * t + phases[j])
        root[:, 1] = 0.004 * np.sin(omega * t + phases[0])

    return MotionSequence(fps=fps, root_pos=root, local_rot=rot)
