"""22-joint kinematic tree and differentiable forward kinematics.

Joint indexing follows the SMPL convention:

====  ============  ====  ============
 0    pelvis         11   right foot
 1    left hip       12   neck
 2    right hip      13   left collar
 3    spine1         14   right collar
 4    left knee      15   head
 5    right knee     16   left shoulder
 6    spine2         17   right shoulder
 7    left ankle     18   left elbow
 8    right ankle    19   right elbow
 9    spine3         20   left wrist
10    left foot      21   right wrist
====  ============  ====  ============

Axes: y up, +x towards the body's left, +z forward. Offsets are in meters,
parent-relative, for a neutral adult body; left/right offsets mirror exactly
in x. A different body can be loaded from a config file (see
``load_skeleton``).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .rotmath import _as_f64, _rodrigues

NUM_JOINTS = 22

PARENT = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

TRUNK_JOINTS = frozenset({0, 1, 2, 3, 4, 5, 6, 9, 12, 13, 14})
LIMB_JOINTS = frozenset(range(NUM_JOINTS)) - TRUNK_JOINTS

LEFT_BONES = ((0, 1), (1, 4), (4, 7), (7, 10), (9, 13), (13, 16), (16, 18), (18, 20))
RIGHT_BONES = ((0, 2), (2, 5), (5, 8), (8, 11), (9, 14), (14, 17), (17, 19), (19, 21))

# Neutral-body offsets for the left/center joints; right-side joints are the
# x-mirror of their left counterpart (RIGHT_OF maps right index -> left index).
_LEFT_CENTER_OFFSETS = {
    0: (0.0, 0.0, 0.0),
    1: (0.0900, -0.0850, -0.0100),
    3: (0.0, 0.1150, -0.0150),
    4: (0.0350, -0.3900, 0.0050),
    6: (0.0, 0.1350, 0.0050),
    7: (-0.0150, -0.4100, -0.0300),
    9: (0.0, 0.0550, 0.0250),
    10: (0.0250, -0.0600, 0.1300),
    12: (0.0, 0.2200, -0.0300),
    13: (0.0750, 0.1150, -0.0150),
    15: (0.0, 0.0900, 0.0400),
    16: (0.1000, 0.0350, -0.0100),
    18: (0.2600, -0.0150, -0.0100),
    20: (0.2500, 0.0100, 0.0),
}
RIGHT_OF = {2: 1, 5: 4, 8: 7, 11: 10, 14: 13, 17: 16, 19: 18, 21: 20}


@dataclass(frozen=True)
class SkeletonModel:
    """Immutable kinematic-tree description."""

    parent: tuple[int, ...]
    offsets: torch.Tensor  # (22, 3) float64, parent-relative, meters
    trunk: frozenset[int] = TRUNK_JOINTS
    limb: frozenset[int] = LIMB_JOINTS
    left_bones: tuple[tuple[int, int], ...] = LEFT_BONES
    right_bones: tuple[tuple[int, int], ...] = RIGHT_BONES

    def __post_init__(self):
        if len(self.parent) != NUM_JOINTS:
            raise ValueError(f"parent table must have {NUM_JOINTS} entries")
        if self.parent[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, NUM_JOINTS):
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"parent of joint {j} must precede it in the table")
        if self.trunk | self.limb != frozenset(range(NUM_JOINTS)) or self.trunk & self.limb:
            raise ValueError("trunk and limb sets must partition the joints")
        if len(self.left_bones) != len(self.right_bones):
            raise ValueError("left/right bone lists must pair up")
        if tuple(self.offsets.shape) != (NUM_JOINTS, 3):
            raise ValueError("offsets must have shape (22, 3)")
        if not torch.isfinite(self.offsets).all():
            raise ValueError("offsets contain non-finite values")

    @property
    def bones(self) -> tuple[tuple[int, int], ...]:
        """All (parent, child) bone pairs, ordered by child index."""
        return tuple((self.parent[j], j) for j in range(1, NUM_JOINTS))


def _default_offsets() -> torch.Tensor:
    off = torch.zeros(NUM_JOINTS, 3, dtype=torch.float64)
    for j, v in _LEFT_CENTER_OFFSETS.items():
        off[j] = torch.tensor(v, dtype=torch.float64)
    for j, src in RIGHT_OF.items():
        off[j] = off[src]
        off[j, 0] = -off[j, 0]
    return off


def default_skeleton() -> SkeletonModel:
    """Built-in neutral-body skeleton."""
    return SkeletonModel(parent=PARENT, offsets=_default_offsets())


def load_skeleton(path) -> SkeletonModel:
    """Load a skeleton from a text config file.

    One line per joint: ``index parent offset_x offset_y offset_z`` (meters),
    ``#`` starts a comment. All 22 joints must be present; the parent table
    must be a tree rooted at joint 0 with parents preceding children.
    """
    parent = [None] * NUM_JOINTS
    offsets = torch.zeros(NUM_JOINTS, 3, dtype=torch.float64)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 'index parent ox oy oz', got {len(parts)} fields")
            try:
                idx, par = int(parts[0]), int(parts[1])
                vec = [float(p) for p in parts[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= idx < NUM_JOINTS:
                raise ValueError(f"{path}:{lineno}: joint index {idx} out of range")
            if parent[idx] is not None:
                raise ValueError(f"{path}:{lineno}: duplicate joint {idx}")
            parent[idx] = par
            offsets[idx] = torch.tensor(vec, dtype=torch.float64)
    missing = [j for j in range(NUM_JOINTS) if parent[j] is None]
    if missing:
        raise ValueError(f"{path}: missing joints {missing}")
    return SkeletonModel(parent=tuple(parent), offsets=offsets)


def forward_kinematics(local_rot, root_translation, skel: SkeletonModel):
    """Global joint positions and orientations from local rotations.

    Parameters
    ----------
    local_rot : (..., 22, 3) axis-angle per joint.
    root_translation : (..., 3) pelvis position in meters.
    skel : SkeletonModel.

    Returns
    -------
    positions : (..., 22, 3) tensor, ``positions[..., 0, :]`` equals the root
        translation.
    global_rot : (..., 22, 3, 3) tensor of world orientations.

    Differentiable with respect to both inputs.
    """
    local_rot = _as_f64(local_rot)
    root_translation = _as_f64(root_translation)
    rot = _rodrigues(local_rot)  # (..., 22, 3, 3)
    offsets = skel.offsets.to(local_rot.dtype)

    glob = [None] * NUM_JOINTS
    pos = [None] * NUM_JOINTS
    glob[0] = rot[..., 0, :, :]
    pos[0] = root_translation
    for j in range(1, NUM_JOINTS):
        p = skel.parent[j]
        glob[j] = glob[p] @ rot[..., j, :, :]
        pos[j] = pos[p] + (glob[p] @ offsets[j])
    return torch.stack(pos, dim=-2), torch.stack(glob, dim=-3)


def bone_lengths(positions, bones) -> torch.Tensor:
    """Euclidean lengths of (parent, child) bone pairs from joint positions.

    ``positions`` is (..., 22, 3); returns (..., len(bones)).
    """
    positions = _as_f64(positions)
    lengths = []
    for parent, child in bones:
        delta = positions[..., child, :] - positions[..., parent, :]
        lengths.append(torch.linalg.norm(delta, dim=-1))
    return torch.stack(lengths, dim=-1)


@dataclass
class PoseEstimate:
    """One full-body pose: local rotations plus derived global quantities."""

    local_rot: torch.Tensor  # (22, 3) axis-angle
    root_translation: torch.Tensor  # (3,) meters
    positions: torch.Tensor  # (22, 3) meters
    global_rot: torch.Tensor  # (22, 3, 3)

    @classmethod
    def from_local(cls, local_rot, root_translation, skel: SkeletonModel) -> "PoseEstimate":
        local_rot = _as_f64(local_rot)
        root_translation = _as_f64(root_translation)
        if local_rot.shape != (NUM_JOINTS, 3):
            raise ValueError("local_rot must have shape (22, 3)")
        if not torch.isfinite(local_rot).all():
            raise ValueError("local_rot contains non-finite values")
        positions, global_rot = forward_kinematics(local_rot, root_translation, skel)
        return cls(local_rot, root_translation, positions, global_rot)
