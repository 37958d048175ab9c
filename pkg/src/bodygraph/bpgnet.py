"""Body pose graph network: expressive edges, graph convolutions, output head.

Node relations are the sum of three 22 x 22 adjacency terms: a constant
symmetric-normalized skeleton matrix, a skeleton-masked matrix whose bone
values are regressed from the current node features, and an unconstrained
symmetric latent matrix regressed the same way. Each graph layer multiplies
node features by the composed adjacency and a weight matrix, applies a
leaky ReLU and (for width-preserving layers) a residual connection. The
output head maps final node features to one axis-angle per joint; global
joint positions follow from forward kinematics with the predicted head
joint pinned to the measured headset position.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .featinit import FeatureInit, init_parameters
from .skeleton import NUM_JOINTS, SkeletonModel, forward_kinematics
from .sensorio import HEAD_JOINT

NUM_BONES = NUM_JOINTS - 1
NUM_UPPER = NUM_JOINTS * (NUM_JOINTS + 1) // 2


def skeleton_mask(skel: SkeletonModel) -> torch.Tensor:
    """0/1 bone-connectivity matrix (both directions, no self-loops)."""
    mask = torch.zeros(NUM_JOINTS, NUM_JOINTS, dtype=torch.float64)
    for parent, child in skel.bones:
        mask[parent, child] = 1.0
        mask[child, parent] = 1.0
    return mask


def static_adjacency(skel: SkeletonModel) -> torch.Tensor:
    """Symmetric degree-normalized skeleton adjacency with self-loops."""
    a = skeleton_mask(skel) + torch.eye(NUM_JOINTS, dtype=torch.float64)
    d = a.sum(dim=1)
    inv_sqrt = d.rsqrt()
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def compose_adjacency(a_ss: torch.Tensor, a_ds: torch.Tensor, a_l: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the three edge terms."""
    return a_ss + a_ds + a_l


@dataclass
class AdjacencySet:
    """The three edge terms and their composition for one forward pass."""

    a_ss: torch.Tensor
    a_ds: torch.Tensor
    a_l: torch.Tensor
    a_h: torch.Tensor


class EdgeMlp(nn.Module):
    """Regress adjacency values from flattened node features (two-layer MLP).

    ``mode='skeleton'`` produces one value per bone, mirrored to both slots
    of the bone and zero elsewhere. ``mode='latent'`` produces one value per
    unordered node pair (incl. diagonal), mirrored to a full symmetric
    matrix. The output layer starts at zero so a fresh network has no
    dynamic or latent edges.
    """

    def __init__(self, n_features: int, hidden: int, mode: str, skel: SkeletonModel):
        super().__init__()
        if mode not in ("skeleton", "latent"):
            raise ValueError(f"unknown edge mode {mode!r}")
        self.mode = mode
        out = NUM_BONES if mode == "skeleton" else NUM_UPPER
        self.w0 = nn.Linear(NUM_JOINTS * n_features, hidden, dtype=torch.float64)
        self.w1 = nn.Linear(hidden, out, dtype=torch.float64)
        self.w1.zero_init = True
        if mode == "skeleton":
            parents = torch.tensor([p for p, _ in skel.bones])
            children = torch.tensor([c for _, c in skel.bones])
            self.register_buffer("rows", parents)
            self.register_buffer("cols", children)
        else:
            iu, ju = torch.triu_indices(NUM_JOINTS, NUM_JOINTS)
            self.register_buffer("rows", iu)
            self.register_buffer("cols", ju)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 22, f) node features -> (B, 22, 22) symmetric adjacency term."""
        if x.dim() != 3 or x.shape[1] != NUM_JOINTS:
            raise ValueError(f"expected (B, 22, f) node features, got {tuple(x.shape)}")
        b = x.shape[0]
        hidden = torch.relu(self.w0(x.reshape(b, -1)))
        raw = self.w1(hidden)
        a = torch.zeros(b, NUM_JOINTS, NUM_JOINTS, dtype=x.dtype)
        a[:, self.rows, self.cols] = raw
        if self.mode == "skeleton":
            a = a + a.transpose(-1, -2)
        else:
            diag = torch.diagonal(a, dim1=-2, dim2=-1)
            a = a + a.transpose(-1, -2) - torch.diag_embed(diag)
        return a


class GcnLayer(nn.Module):
    """One graph convolution: leaky_relu(A X W), plus residual when square."""

    def __init__(self, d_in: int, d_out: int, slope: float = 0.2, residual: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out, dtype=torch.float64))
        self.fan_in = d_in
        self.slope = slope
        self.residual = residual and d_in == d_out

    def forward(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        y = torch.nn.functional.leaky_relu(a @ x @ self.weight, negative_slope=self.slope)
        if self.residual:
            y = y + x
        return y


class PerNodeAffine(nn.Module):
    """Independent affine map per graph node."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(NUM_JOINTS, d_out, d_in, dtype=torch.float64))
        self.bias = nn.Parameter(torch.empty(NUM_JOINTS, d_out, dtype=torch.float64))
        self.fan_in = d_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("jod,bjd->bjo", self.weight, x) + self.bias


class BpgNet(nn.Module):
    """Graph-convolution stack with expressive edges and the axis-angle head."""

    def __init__(self, cfg: ModelConfig, skel: SkeletonModel):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("a_ss", static_adjacency(skel))
        self.register_buffer("bone_mask", skeleton_mask(skel))
        n_edge_sets = cfg.gcn_layers if cfg.recompute_edges else 1
        self.edge_ds = nn.ModuleList(
            [EdgeMlp(cfg.d_node, cfg.edge_hidden, "skeleton", skel) for _ in range(n_edge_sets)]
        )
        self.edge_l = nn.ModuleList(
            [EdgeMlp(cfg.d_node, cfg.edge_hidden, "latent", skel) for _ in range(n_edge_sets)]
        )
        self.layers = nn.ModuleList(
            [GcnLayer(cfg.d_node, cfg.d_node, cfg.leaky_slope, cfg.residual) for _ in range(cfg.gcn_layers)]
        )
        self.head = PerNodeAffine(cfg.d_node, 3)

    def forward(self, x: torch.Tensor, collect: bool = False):
        """(B, 22, d_node) node features -> (B, 22, 3) axis-angles.

        With ``collect=True`` also returns the per-layer AdjacencySet list.
        """
        sets = []
        for i, layer in enumerate(self.layers):
            if self.cfg.recompute_edges:
                a_ds = self.edge_ds[i](x)
                a_l = self.edge_l[i](x)
            elif i == 0:
                a_ds = self.edge_ds[0](x)
                a_l = self.edge_l[0](x)
            a_h = compose_adjacency(self.a_ss, a_ds, a_l)
            if collect:
                sets.append(AdjacencySet(a_ss=self.a_ss, a_ds=a_ds, a_l=a_l, a_h=a_h))
            x = layer(x, a_h)
        aa = self.head(x)
        return (aa, sets) if collect else aa


@dataclass
class ModelOutput:
    """Batched pose prediction (all tensors share the leading batch axis)."""

    local_rot: torch.Tensor  # (B, 22, 3)
    root_translation: torch.Tensor  # (B, 3)
    positions: torch.Tensor  # (B, 22, 3)
    global_rot: torch.Tensor  # (B, 22, 3, 3)
    adjacency: list[AdjacencySet] | None = None


def align_to_head(positions: torch.Tensor, head_pos: torch.Tensor) -> torch.Tensor:
    """Translate poses so the head joint coincides exactly with the sensor.

    Computed as ``(p - p_head) + head_pos`` per joint so the head entry is
    bitwise equal to ``head_pos``.
    """
    return (positions - positions[..., HEAD_JOINT : HEAD_JOINT + 1, :]) + head_pos[..., None, :]


def bpg_forward(net: BpgNet, x0: torch.Tensor, skel: SkeletonModel, head_pos: torch.Tensor,
                collect: bool = False) -> ModelOutput:
    """Run the graph net on initial node features and derive global positions."""
    if collect:
        aa, sets = net(x0, collect=True)
    else:
        aa, sets = net(x0), None
    zero_root = torch.zeros(aa.shape[:-2] + (3,), dtype=aa.dtype)
    positions, global_rot = forward_kinematics(aa, zero_root, skel)
    positions = align_to_head(positions, head_pos)
    return ModelOutput(
        local_rot=aa,
        root_translation=positions[..., 0, :],
        positions=positions,
        global_rot=global_rot,
        adjacency=sets,
    )


def vanilla_gcn_forward(net: BpgNet, x0: torch.Tensor, skel: SkeletonModel,
                        head_pos: torch.Tensor) -> ModelOutput:
    """Ablation bypass: the same stack driven by the static adjacency only.

    Purpose-built independent path (never touches the edge MLPs) used to
    check that zeroed dynamic/latent edges reduce the network to a vanilla
    graph convolution.
    """
    x = x0
    for layer in net.layers:
        x = layer(x, net.a_ss)
    aa = net.head(x)
    zero_root = torch.zeros(aa.shape[:-2] + (3,), dtype=aa.dtype)
    positions, global_rot = forward_kinematics(aa, zero_root, skel)
    positions = align_to_head(positions, head_pos)
    return ModelOutput(
        local_rot=aa,
        root_translation=positions[..., 0, :],
        positions=positions,
        global_rot=global_rot,
    )


class PoseModel(nn.Module):
    """End-to-end window -> pose network (feature pipeline + graph net)."""

    def __init__(self, cfg: ModelConfig, skel: SkeletonModel):
        super().__init__()
        self.cfg = cfg
        self.skel = skel
        self.featinit = FeatureInit(cfg, skel)
        self.graph = BpgNet(cfg, skel)
        init_parameters(self, cfg.seed)

    def forward(self, f_p: torch.Tensor, f_a: torch.Tensor, head_pos: torch.Tensor,
                collect: bool = False) -> ModelOutput:
        """Batched streams (B, K, S, 6/12) + head positions (B, 3) -> poses."""
        x0 = self.featinit(f_p, f_a)
        return bpg_forward(self.graph, x0, self.skel, head_pos, collect=collect)
