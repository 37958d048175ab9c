"""Initial node features for the pose graph from one sensor window.

Pipeline: raw measurements are packed into a position/velocity stream and a
rotation/angular-velocity stream (``assemble_features``), the two streams
are fused by exponential cross-gating (``DualInteractive``), a two-scale
temporal pyramid turns the window into one current-frame feature vector per
body group (``TemporalPyramid``), the limb feature is conditioned on the
trunk feature (``SpatialSplit``), and per-node affine maps distribute the
two group features over the 22 graph nodes (``NodeAssign``).

All learned blocks are float64. Interactive (gating) maps are
zero-initialized so a freshly built pipeline starts as plain per-branch
feature extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .rotmath import angular_velocity_sixd, matrix_to_sixd
from .sensorio import NUM_SENSORS, SensorWindow
from .skeleton import NUM_JOINTS, SkeletonModel

POS_CHANNELS = 6  # position + velocity
ROT_CHANNELS = 12  # 6-D rotation + 6-D angular velocity


@dataclass
class SensorFeatureBlock:
    """Per-window network input: translation and rotation feature streams."""

    f_p: torch.Tensor  # (K, S, 6)
    f_a: torch.Tensor  # (K, S, 12)


def assemble_features(window: SensorWindow) -> SensorFeatureBlock:
    """Build the raw feature streams for one window.

    Velocities are backward differences scaled by fps; the first frame
    reuses the second frame's velocity (and per-step rotation).
    """
    pos = torch.as_tensor(window.positions(), dtype=torch.float64)  # (K, S, 3)
    rot = torch.as_tensor(window.rotations(), dtype=torch.float64)  # (K, S, 3, 3)
    k = pos.shape[0]
    if k < 2:
        raise ValueError("windows must hold at least 2 frames")

    vel = torch.empty_like(pos)
    vel[1:] = (pos[1:] - pos[:-1]) * window.fps
    vel[0] = vel[1]
    f_p = torch.cat([pos, vel], dim=-1)

    theta = matrix_to_sixd(rot, validate=False)  # (K, S, 6)
    omega = torch.empty_like(theta)
    omega[1:] = angular_velocity_sixd(rot[:-1], rot[1:], validate=False)
    omega[0] = omega[1]
    f_a = torch.cat([theta, omega], dim=-1)
    return SensorFeatureBlock(f_p=f_p, f_a=f_a)


def stack_blocks(blocks: list[SensorFeatureBlock]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack per-window blocks into batched (B, K, S, C) tensors."""
    return torch.stack([b.f_p for b in blocks]), torch.stack([b.f_a for b in blocks])


class TemporalConv(nn.Module):
    """1-D convolution over the time axis with replicate same-padding.

    Input/output layout is (B, K, C). Replicate padding keeps constant-in-
    time signals constant, which the pyramid's scale-consistency relies on.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, zero_init: bool = False):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.conv = nn.Conv1d(c_in, c_out, kernel, dtype=torch.float64)
        self.conv.zero_init = zero_init
        self.pad = (kernel - 1) // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.transpose(-1, -2)
        if self.pad:
            y = nn.functional.pad(y, (self.pad, self.pad), mode="replicate")
        return self.conv(y).transpose(-1, -2)


class CausalConv(nn.Module):
    """1-D convolution that only looks backwards in time; layout (B, K, C)."""

    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, dtype=torch.float64)
        self.pad = kernel - 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.transpose(-1, -2)
        if self.pad:
            y = nn.functional.pad(y, (self.pad, 0), mode="replicate")
        return self.conv(y).transpose(-1, -2)


def _gated_exp(conv: TemporalConv, x: torch.Tensor, clamp: float) -> torch.Tensor:
    return torch.exp(conv(x).clamp(-clamp, clamp))


class DualInteractive(nn.Module):
    """Cross-gated fusion of the translation and rotation streams.

    Entry convolutions first project both streams to a common width, then

        P' = P * exp(phi(A)) - rho(A * exp(psi(P)))
        A' = A * exp(psi(P)) + eta(P * exp(phi(A)))

    with exponent inputs clamped. phi/psi/rho/eta start at zero, making the
    block an identity on the projected streams.
    """

    def __init__(self, d_mix: int, kernel: int, clamp: float):
        super().__init__()
        self.clamp = clamp
        self.proj_p = TemporalConv(POS_CHANNELS, d_mix, kernel)
        self.proj_a = TemporalConv(ROT_CHANNELS, d_mix, kernel)
        self.phi = TemporalConv(d_mix, d_mix, kernel, zero_init=True)
        self.psi = TemporalConv(d_mix, d_mix, kernel, zero_init=True)
        self.rho = TemporalConv(d_mix, d_mix, kernel, zero_init=True)
        self.eta = TemporalConv(d_mix, d_mix, kernel, zero_init=True)

    def forward(self, f_p: torch.Tensor, f_a: torch.Tensor):
        """(B, K, S, 6) and (B, K, S, 12) -> two (B, K, S, d_mix) streams."""
        if f_p.shape[:-1] != f_a.shape[:-1] or f_p.shape[-1] != POS_CHANNELS or f_a.shape[-1] != ROT_CHANNELS:
            raise ValueError(f"bad stream shapes {tuple(f_p.shape)} / {tuple(f_a.shape)}")
        b, k, s = f_p.shape[:3]
        p = self.proj_p(_fold_sensors(f_p))
        a = self.proj_a(_fold_sensors(f_a))
        gate_p = _gated_exp(self.phi, a, self.clamp)
        gate_a = _gated_exp(self.psi, p, self.clamp)
        p_new = p * gate_p - self.rho(a * gate_a)
        a_new = a * gate_a + self.eta(p * gate_p)
        return _unfold_sensors(p_new, b, s), _unfold_sensors(a_new, b, s)


def _fold_sensors(x: torch.Tensor) -> torch.Tensor:
    # (B, K, S, C) -> (B*S, K, C): sensors become batch entries for the convs.
    b, k, s, c = x.shape
    return x.permute(0, 2, 1, 3).reshape(b * s, k, c)


def _unfold_sensors(x: torch.Tensor, b: int, s: int) -> torch.Tensor:
    bs, k, c = x.shape
    return x.reshape(b, s, k, c).permute(0, 2, 1, 3)


class SciBlock(nn.Module):
    """Even/odd temporal split with exponential cross-gating.

    The sequence is split into even and odd subsequences, the two halves
    gate each other, exchange additive corrections and are re-interleaved:

        odd'  = odd * exp(phi(even));   even' = even * exp(psi(odd))
        odd'' = odd' + rho(even');      even'' = even' - eta(odd')

    Odd-length inputs are padded by repeating the last frame and trimmed
    back after re-interleaving. With zero gate parameters the block is the
    identity. A trailing projection convolution is added only when the
    output width differs from the input width.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, clamp: float):
        super().__init__()
        self.clamp = clamp
        self.phi = TemporalConv(c_in, c_in, kernel, zero_init=True)
        self.psi = TemporalConv(c_in, c_in, kernel, zero_init=True)
        self.rho = TemporalConv(c_in, c_in, kernel, zero_init=True)
        self.eta = TemporalConv(c_in, c_in, kernel, zero_init=True)
        self.proj = TemporalConv(c_in, c_out, kernel) if c_out != c_in else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = x.shape[1]
        if k % 2:
            x = torch.cat([x, x[:, -1:]], dim=1)
        even, odd = x[:, 0::2], x[:, 1::2]
        odd_g = odd * _gated_exp(self.phi, even, self.clamp)
        even_g = even * _gated_exp(self.psi, odd, self.clamp)
        odd_out = odd_g + self.rho(even_g)
        even_out = even_g - self.eta(odd_g)
        y = torch.stack([even_out, odd_out], dim=2).reshape(x.shape[0], x.shape[1], -1)
        y = y[:, :k]
        if self.proj is not None:
            y = self.proj(y)
        return y


def _downsample_avg2(x: torch.Tensor) -> torch.Tensor:
    # Stride-2 temporal average; an odd tail pairs the last frame with itself.
    if x.shape[1] % 2:
        x = torch.cat([x, x[:, -1:]], dim=1)
    return (x[:, 0::2] + x[:, 1::2]) / 2.0


def _upsample_repeat2(x: torch.Tensor, k: int) -> torch.Tensor:
    return x.repeat_interleave(2, dim=1)[:, :k]


def _interleave_channels(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # Channels alternate a0, b0, a1, b1, ...
    return torch.stack([a, b], dim=-1).reshape(*a.shape[:-1], 2 * a.shape[-1])


class TemporalPyramid(nn.Module):
    """Two-scale temporal feature extractor for the current frame.

    One SciBlock stack (shared weights) runs on the raw window (frame level)
    and on a stride-2 averaged copy that is re-upsampled by repetition (clip
    level). Sharing the extractor across scales makes the two levels agree
    exactly on time-constant input. The interleaved frame/clip channels pass
    through a second stack, and a causal convolution followed by taking the
    final time step yields the current-frame feature.
    """

    def __init__(self, c_in: int, c1: int, d_t: int, kernel: int, clamp: float, blocks: int = 1):
        super().__init__()
        if blocks < 1:
            raise ValueError("need at least one extractor block")
        self.level = nn.ModuleList(
            [SciBlock(c_in if i == 0 else c1, c1, kernel, clamp) for i in range(blocks)]
        )
        self.merge = nn.ModuleList([SciBlock(2 * c1, 2 * c1, kernel, clamp) for _ in range(blocks)])
        self.head = CausalConv(2 * c1, d_t, kernel)

    def _run(self, stack: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
        for block in stack:
            x = block(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, K, C) window features -> (B, d_t) current-frame feature."""
        k = x.shape[1]
        frame = self._run(self.level, x)
        clip = _upsample_repeat2(self._run(self.level, _downsample_avg2(x)), k)
        y = self._run(self.merge, _interleave_channels(frame, clip))
        return self.head(y)[:, -1]


class SpatialSplit(nn.Module):
    """Unidirectional conditioning of the limb feature on the trunk feature.

        L' = L * exp(phi(T)) + rho(T * exp(psi(L)))

    The trunk feature passes through unchanged. All three maps start at
    zero, leaving the limb feature untouched at init.
    """

    def __init__(self, d_t: int, clamp: float):
        super().__init__()
        self.clamp = clamp
        self.phi = nn.Linear(d_t, d_t, dtype=torch.float64)
        self.psi = nn.Linear(d_t, d_t, dtype=torch.float64)
        self.rho = nn.Linear(d_t, d_t, dtype=torch.float64)
        for lin in (self.phi, self.psi, self.rho):
            lin.zero_init = True

    def forward(self, f_t: torch.Tensor, f_l: torch.Tensor):
        gate_l = torch.exp(self.phi(f_t).clamp(-self.clamp, self.clamp))
        gate_t = torch.exp(self.psi(f_l).clamp(-self.clamp, self.clamp))
        f_l_new = f_l * gate_l + self.rho(f_t * gate_t)
        return f_t, f_l_new


class NodeAssign(nn.Module):
    """Per-node affine maps from the trunk/limb group features to node features."""

    def __init__(self, d_g: int, d_node: int, skel: SkeletonModel):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(NUM_JOINTS, d_node, d_g, dtype=torch.float64))
        self.bias = nn.Parameter(torch.empty(NUM_JOINTS, d_node, dtype=torch.float64))
        self.fan_in = d_g
        source = torch.tensor([0 if j in skel.trunk else 1 for j in range(NUM_JOINTS)])
        self.register_buffer("source", source)

    def forward(self, f_t: torch.Tensor, f_l: torch.Tensor) -> torch.Tensor:
        """Two (B, d_g) group features -> (B, 22, d_node) node features."""
        groups = torch.stack([f_t, f_l], dim=1)  # (B, 2, d_g)
        src = groups[:, self.source]  # (B, 22, d_g)
        return torch.einsum("jnd,bjd->bjn", self.weight, src) + self.bias


class FeatureInit(nn.Module):
    """Full window -> node-feature pipeline (everything before the graph net)."""

    def __init__(self, cfg: ModelConfig, skel: SkeletonModel):
        super().__init__()
        self.cfg = cfg
        self.dual = DualInteractive(cfg.d_mix, cfg.kernel_size, cfg.clamp)
        c_fused = NUM_SENSORS * cfg.d_mix
        self.pyramid_trunk = TemporalPyramid(c_fused, cfg.c1, cfg.d_t, cfg.kernel_size, cfg.clamp)
        self.pyramid_limb = TemporalPyramid(c_fused, cfg.c1, cfg.d_t, cfg.kernel_size, cfg.clamp)
        self.split = SpatialSplit(cfg.d_t, cfg.clamp)
        self.assign = NodeAssign(cfg.d_g, cfg.d_node, skel)

    def forward(self, f_p: torch.Tensor, f_a: torch.Tensor) -> torch.Tensor:
        """(B, K, S, 6) and (B, K, S, 12) -> (B, 22, d_node) node features."""
        p, a = self.dual(f_p, f_a)
        fused = (p + a).reshape(p.shape[0], p.shape[1], -1)  # parameter-free stream fusion
        f_t = self.pyramid_trunk(fused)
        f_l = self.pyramid_limb(fused)
        f_t, f_l = self.split(f_t, f_l)
        return self.assign(f_t, f_l)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic parameter init.

    Gating maps (phi/psi/rho/eta) and other modules flagged ``zero_init``
    start at zero; remaining weights are uniform in +-1/sqrt(fan_in) drawn
    from one seeded generator in registration order; biases start at zero.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        weight = getattr(m, "weight", None)
        if not isinstance(weight, nn.Parameter):
            continue
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            fan_in = weight.shape[1] * (weight.shape[2] if weight.dim() == 3 else 1)
        elif hasattr(m, "fan_in"):  # raw-parameter modules declare their fan-in
            fan_in = m.fan_in
        else:
            continue
        if getattr(m, "zero_init", False):
            nn.init.zeros_(weight)
        else:
            bound = 1.0 / fan_in**0.5
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=gen)
        bias = getattr(m, "bias", None)
        if bias is not None:
            nn.init.zeros_(bias)
