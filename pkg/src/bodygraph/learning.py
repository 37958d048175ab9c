"""Losses, evaluation metrics, the trainer and the gradient-check harness.

The training objective is the unweighted sum of a mean-absolute rotation
loss, a mean-absolute position loss and a left/right bone-length symmetry
loss. Metrics are MPJRE (geodesic distance of local rotations, degrees),
MPJPE (cm) and MPJVE (cm/s, backward differences), plus per-joint MPJPE.

Every learned block registers with the gradient-check registry; the harness
compares reverse-mode gradients against central finite differences (step
1e-6, double precision) on small randomized instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .bpgnet import EdgeMlp, GcnLayer, PerNodeAffine, PoseModel
from .config import ModelConfig, TrainConfig
from .featinit import (
    DualInteractive,
    NodeAssign,
    SciBlock,
    SpatialSplit,
    TemporalPyramid,
    assemble_features,
)
from .rotmath import _rodrigues, geodesic_deg
from .sensorio import HEAD_JOINT, MotionSequence, extract_sensors, make_windows
from .skeleton import NUM_JOINTS, PoseEstimate, SkeletonModel, forward_kinematics

# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    """The three loss terms and their sum (0-dim tensors)."""

    l_rot: torch.Tensor
    l_pos: torch.Tensor
    l_bone: torch.Tensor
    l_total: torch.Tensor


def loss_rot(pred_rot: torch.Tensor, gt_rot: torch.Tensor) -> torch.Tensor:
    """Mean absolute per-component axis-angle error."""
    if pred_rot.shape != gt_rot.shape:
        raise ValueError("rotation shapes must match")
    return (pred_rot - gt_rot).abs().mean()


def loss_pos(pred_pos: torch.Tensor, gt_pos: torch.Tensor) -> torch.Tensor:
    """Mean absolute per-component joint-position error (meters)."""
    if pred_pos.shape != gt_pos.shape:
        raise ValueError("position shapes must match")
    return (pred_pos - gt_pos).abs().mean()


def loss_bone(pred_pos: torch.Tensor, skel: SkeletonModel) -> torch.Tensor:
    """Sum over mirrored bone pairs of |left length - right length|.

    For batched input the per-pose pair sums are averaged over the batch.
    Only predicted positions enter; the loss is invariant under rigid-body
    motion of the pose.
    """
    terms = []
    for (pl, cl), (pr, cr) in zip(skel.left_bones, skel.right_bones):
        left = torch.linalg.norm(pred_pos[..., cl, :] - pred_pos[..., pl, :], dim=-1)
        right = torch.linalg.norm(pred_pos[..., cr, :] - pred_pos[..., pr, :], dim=-1)
        terms.append((left - right).abs())
    return torch.stack(terms, dim=-1).sum(dim=-1).mean()


def total_loss(pred, gt, skel: SkeletonModel) -> LossBreakdown:
    """Combine the three terms; ``pred``/``gt`` expose local_rot and positions."""
    l_r = loss_rot(pred.local_rot, gt.local_rot)
    l_p = loss_pos(pred.positions, gt.positions)
    l_b = loss_bone(pred.positions, skel)
    return LossBreakdown(l_rot=l_r, l_pos=l_p, l_bone=l_b, l_total=l_r + l_p + l_b)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    mpjre_deg: float
    mpjpe_cm: float
    mpjve_cm_s: float
    per_joint_mpjpe_cm: list[float]

    def to_dict(self) -> dict:
        return {
            "mpjre_deg": self.mpjre_deg,
            "mpjpe_cm": self.mpjpe_cm,
            "mpjve_cm_s": self.mpjve_cm_s,
            "per_joint_mpjpe_cm": list(self.per_joint_mpjpe_cm),
        }


def write_metrics_json(report: MetricReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_metrics(report: MetricReport) -> str:
    lines = [
        f"mpjre_deg: {report.mpjre_deg}",
        f"mpjpe_cm: {report.mpjpe_cm}",
        f"mpjve_cm_s: {report.mpjve_cm_s}",
    ]
    for j, v in enumerate(report.per_joint_mpjpe_cm):
        lines.append(f"per_joint_mpjpe_cm[{j}]: {v}")
    return "\n".join(lines)


class _MetricAccumulator:
    """Aggregates metric sums over one or more aligned pose sequences."""

    def __init__(self):
        self.rot_sum = 0.0
        self.rot_count = 0
        self.pos_sum = 0.0
        self.pos_count = 0
        self.vel_sum = 0.0
        self.vel_count = 0
        self.joint_sum = np.zeros(NUM_JOINTS)
        self.joint_count = 0

    def add(self, pred_rot, pred_pos, gt_rot, gt_pos, fps: float):
        if pred_rot.shape != gt_rot.shape or pred_pos.shape != gt_pos.shape:
            raise ValueError("prediction/ground-truth shapes must match")
        if pred_rot.shape[0] < 2:
            raise ValueError("need at least 2 frames for velocity metrics")
        rot_err = geodesic_deg(_rodrigues(pred_rot), _rodrigues(gt_rot), validate=False)
        self.rot_sum += float(rot_err.sum())
        self.rot_count += rot_err.numel()

        dist = torch.linalg.norm(pred_pos - gt_pos, dim=-1)  # (T, 22) meters
        self.pos_sum += float(dist.sum())
        self.pos_count += dist.numel()
        self.joint_sum += dist.sum(dim=0).numpy()
        self.joint_count += dist.shape[0]

        vel_pred = (pred_pos[1:] - pred_pos[:-1]) * fps
        vel_gt = (gt_pos[1:] - gt_pos[:-1]) * fps
        vel_err = torch.linalg.norm(vel_pred - vel_gt, dim=-1)
        self.vel_sum += float(vel_err.sum())
        self.vel_count += vel_err.numel()

    def report(self) -> MetricReport:
        if self.rot_count == 0:
            raise ValueError("no frames accumulated")
        return MetricReport(
            mpjre_deg=self.rot_sum / self.rot_count,
            mpjpe_cm=100.0 * self.pos_sum / self.pos_count,
            mpjve_cm_s=100.0 * self.vel_sum / self.vel_count,
            per_joint_mpjpe_cm=(100.0 * self.joint_sum / self.joint_count).tolist(),
        )


def _stack_poses(poses: list[PoseEstimate]):
    rot = torch.stack([p.local_rot for p in poses])
    pos = torch.stack([p.positions for p in poses])
    return rot, pos


def evaluate(preds: list[PoseEstimate], gts: list[PoseEstimate], fps: float) -> MetricReport:
    """Metrics over one aligned sequence of poses (length >= 2)."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} ground truths")
    acc = _MetricAccumulator()
    pr, pp = _stack_poses(preds)
    gr, gp = _stack_poses(gts)
    acc.add(pr, pp, gr, gp, fps)
    return acc.report()


def evaluate_tensors(pred_rot, pred_pos, gt_rot, gt_pos, fps: float) -> MetricReport:
    """Tensor fast path of ``evaluate`` for (T, 22, 3) stacks."""
    acc = _MetricAccumulator()
    acc.add(pred_rot, pred_pos, gt_rot, gt_pos, fps)
    return acc.report()


# ---------------------------------------------------------------------------
# dataset assembly and batched inference


@dataclass
class WindowDataset:
    """Stacked (window, target-frame) training pairs from motion sequences."""

    f_p: torch.Tensor  # (N, K, S, 6)
    f_a: torch.Tensor  # (N, K, S, 12)
    head_pos: torch.Tensor  # (N, 3)
    gt_rot: torch.Tensor  # (N, 22, 3)
    gt_pos: torch.Tensor  # (N, 22, 3)
    gt_root: torch.Tensor  # (N, 3)
    fps: float
    sequence_slices: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.f_p.shape[0]


@dataclass
class _Targets:
    local_rot: torch.Tensor
    positions: torch.Tensor


def build_dataset(seqs: list[MotionSequence], skel: SkeletonModel, k: int) -> WindowDataset:
    """Extract sensors, window them and pair each window with its target pose."""
    if not seqs:
        raise ValueError("no motion sequences given")
    fps = seqs[0].fps
    chunks = {key: [] for key in ("f_p", "f_a", "head", "rot", "pos", "root")}
    slices = []
    offset = 0
    for seq in seqs:
        if seq.fps != fps:
            raise ValueError("all sequences in a dataset must share one frame rate")
        positions, _ = forward_kinematics(torch.as_tensor(seq.local_rot), torch.as_tensor(seq.root_pos), skel)
        sensors = extract_sensors(seq, skel)
        windows = make_windows(sensors, k, fps)
        if not windows:
            continue
        blocks = [assemble_features(w) for w in windows]
        targets = [w.target_index for w in windows]
        chunks["f_p"].append(torch.stack([b.f_p for b in blocks]))
        chunks["f_a"].append(torch.stack([b.f_a for b in blocks]))
        chunks["head"].append(positions[targets, HEAD_JOINT])
        chunks["rot"].append(torch.as_tensor(seq.local_rot[targets]))
        chunks["pos"].append(positions[targets])
        chunks["root"].append(torch.as_tensor(seq.root_pos[targets]))
        slices.append((offset, offset + len(windows)))
        offset += len(windows)
    if offset == 0:
        raise ValueError(f"no sequence is long enough for windows of {k} frames")
    return WindowDataset(
        f_p=torch.cat(chunks["f_p"]),
        f_a=torch.cat(chunks["f_a"]),
        head_pos=torch.cat(chunks["head"]),
        gt_rot=torch.cat(chunks["rot"]),
        gt_pos=torch.cat(chunks["pos"]),
        gt_root=torch.cat(chunks["root"]),
        fps=fps,
        sequence_slices=slices,
    )


def predict_dataset(model: PoseModel, ds: WindowDataset, batch_size: int = 64):
    """Run inference over every window; returns (rot, pos, root) stacks."""
    rots, poss, roots = [], [], []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            sl = slice(start, start + batch_size)
            out = model(ds.f_p[sl], ds.f_a[sl], ds.head_pos[sl])
            rots.append(out.local_rot)
            poss.append(out.positions)
            roots.append(out.root_translation)
    return torch.cat(rots), torch.cat(poss), torch.cat(roots)


def evaluate_dataset(model: PoseModel, ds: WindowDataset, batch_size: int = 64) -> MetricReport:
    """Metrics of a model over a dataset, respecting sequence boundaries."""
    pred_rot, pred_pos, _ = predict_dataset(model, ds, batch_size)
    acc = _MetricAccumulator()
    for start, end in ds.sequence_slices:
        acc.add(pred_rot[start:end], pred_pos[start:end], ds.gt_rot[start:end], ds.gt_pos[start:end], ds.fps)
    return acc.report()


# ---------------------------------------------------------------------------
# trainer


class TrainingDiverged(RuntimeError):
    """Raised when a loss term turns non-finite; names the offending term."""


@dataclass
class TrainResult:
    steps: int
    curve: list[tuple[int, float, float, float, float]]
    final_metrics: MetricReport


def write_loss_curve(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,l_rot,l_pos,l_bone,l_total\n")
        for step, l_r, l_p, l_b, l_t in curve:
            fh.write(f"{step},{l_r!r},{l_p!r},{l_b!r},{l_t!r}\n")


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    buf: list[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch_size]
        del buf[:batch_size]


def train(
    ds: WindowDataset,
    model: PoseModel,
    cfg: TrainConfig,
    start_step: int = 0,
    optimizer: torch.optim.Adam | None = None,
    on_checkpoint=None,
    log_every: int = 0,
) -> TrainResult:
    """Adam training loop; deterministic for a fixed seed.

    Each curve row records the batch loss *before* that step's update, so
    row ``start_step`` is the loss of the incoming model on the first batch.
    ``on_checkpoint(step, optimizer)`` fires every ``cfg.checkpoint_every``
    steps and after the final step.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    optimizer = optimizer or make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    batches = _batch_stream(len(ds), cfg.batch_size, rng)
    curve = []
    for step in range(start_step, start_step + cfg.steps):
        idx = next(batches)
        out = model(ds.f_p[idx], ds.f_a[idx], ds.head_pos[idx])
        gt = _Targets(local_rot=ds.gt_rot[idx], positions=ds.gt_pos[idx])
        breakdown = total_loss(out, gt, model.skel)
        for term in ("l_rot", "l_pos", "l_bone"):
            value = getattr(breakdown, term)
            if not torch.isfinite(value):
                raise TrainingDiverged(f"non-finite loss term {term} at step {step}")
        row = (
            step,
            float(breakdown.l_rot),
            float(breakdown.l_pos),
            float(breakdown.l_bone),
            float(breakdown.l_total),
        )
        curve.append(row)
        if log_every and step % log_every == 0:
            print(f"step {step}: l_total={row[4]:.6f} (rot {row[1]:.6f} pos {row[2]:.6f} bone {row[3]:.6f})")
        optimizer.zero_grad()
        breakdown.l_total.backward()
        optimizer.step()
        done = step + 1
        if on_checkpoint is not None and (done % cfg.checkpoint_every == 0 or done == start_step + cfg.steps):
            on_checkpoint(done, optimizer)
    return TrainResult(
        steps=start_step + cfg.steps,
        curve=curve,
        final_metrics=evaluate_dataset(model, ds),
    )


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    block: str
    entries: int
    max_rel_err: float
    worst: str
    passed: bool

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{self.block:<22s} {status}  entries={self.entries}"
            f"  max_rel_err={self.max_rel_err:.3e}  worst={self.worst}"
        )


@dataclass
class BlockSpec:
    name: str
    factory: object  # callable: seed -> (loss_fn, {name: leaf tensor})
    diagnostic: bool = False  # excluded from "all" (harness self-tests)
    entry_budget: int | None = None  # total sampled entries across all tensors


REGISTRY: dict[str, BlockSpec] = {}


def register_block(name: str, factory, diagnostic: bool = False, entry_budget: int | None = None) -> None:
    REGISTRY[name] = BlockSpec(name=name, factory=factory, diagnostic=diagnostic, entry_budget=entry_budget)


def gradcheck(
    block: str,
    trials: int = 2,
    tol: float = 1e-4,
    step: float = 1e-6,
    seed: int = 0,
    max_entries: int = 24,
) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    Checks up to ``max_entries`` randomly sampled entries per tensor (all of
    them for small tensors). An entry's error is measured relative to
    ``max(|analytic|, |fd|, floor)`` where the floor is a small fraction of
    the tensor's overall gradient scale; the floor keeps finite-difference
    round-off on near-zero gradients from dominating the verdict.
    """
    if block not in REGISTRY:
        raise KeyError(f"unknown gradcheck block {block!r}")
    spec = REGISTRY[block]
    rng = np.random.default_rng(seed ^ 0x5EED)
    entries = 0
    max_rel = 0.0
    worst = "-"
    passed = True
    for trial in range(trials):
        loss_fn, tensors = spec.factory(seed + trial)
        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
        named = []
        for (name, tensor), grad in zip(tensors.items(), grads):
            grad = torch.zeros_like(tensor) if grad is None else grad
            named.append((name, tensor.detach().reshape(-1), grad.reshape(-1)))
        scale = max((float(g.abs().max()) for _, _, g in named if g.numel()), default=0.0)
        floor = 1e-2 * max(scale, 1e-12)

        pool = []
        for t_idx, (_, flat, _) in enumerate(named):
            n = flat.numel()
            picks = range(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
            pool.extend((t_idx, int(i)) for i in picks)
        if spec.entry_budget is not None and len(pool) > spec.entry_budget:
            chosen = rng.choice(len(pool), size=spec.entry_budget, replace=False)
            pool = [pool[int(c)] for c in chosen]

        for t_idx, i in pool:
            name, flat, gflat = named[t_idx]
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            analytic = float(gflat[i])
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
            entries += 1
            if rel > max_rel:
                max_rel, worst = rel, f"{name}[{i}] (trial {trial})"
            if rel > tol:
                passed = False
    return GradCheckResult(block=block, entries=entries, max_rel_err=max_rel, worst=worst, passed=passed)


def gradcheck_all(trials: int = 2, tol: float = 1e-4, step: float = 1e-6, seed: int = 0):
    """Run every registered (non-diagnostic) block; returns the result list."""
    return [
        gradcheck(name, trials=trials, tol=tol, step=step, seed=seed)
        for name, spec in REGISTRY.items()
        if not spec.diagnostic
    ]


# -- registered block factories ---------------------------------------------


def _perturb(module: torch.nn.Module, seed: int, scale: float = 0.4) -> dict[str, torch.Tensor]:
    """Randomize all parameters (seeded) so gates sit away from identity."""
    gen = torch.Generator().manual_seed(seed * 7919 + 13)
    out = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.add_(torch.empty_like(p).uniform_(-scale, scale, generator=gen))
            out[name] = p
    return out


def _randn(gen, *shape, scale=1.0, base=0.0):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) - 0.5) * 2.0 * scale + base


def _projection(gen, shape):
    return _randn(gen, *shape, scale=1.0)


def _toy_skeleton():
    from .skeleton import default_skeleton

    return default_skeleton()


def _make_dual(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = DualInteractive(d_mix=5, kernel=3, clamp=5.0)
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed)
    f_p = _randn(gen, 2, 8, 3, 6, scale=0.8).requires_grad_()
    f_a = _randn(gen, 2, 8, 3, 12, scale=0.8).requires_grad_()
    w1 = _projection(gen, (2, 8, 3, 5))
    w2 = _projection(gen, (2, 8, 3, 5))

    def loss_fn():
        p, a = mod(f_p, f_a)
        return (p * w1).sum() + (a * w2).sum()

    tensors = dict(params)
    tensors["input.f_p"] = f_p
    tensors["input.f_a"] = f_a
    return loss_fn, tensors


def _make_sci(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = SciBlock(6, 4, kernel=3, clamp=5.0)
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed)
    x = _randn(gen, 2, 9, 6, scale=0.8).requires_grad_()
    w = _projection(gen, (2, 9, 4))

    def loss_fn():
        return (mod(x) * w).sum()

    tensors = dict(params)
    tensors["input.x"] = x
    return loss_fn, tensors


def _make_pyramid(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = TemporalPyramid(c_in=6, c1=4, d_t=5, kernel=3, clamp=5.0)
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed, scale=0.3)
    x = _randn(gen, 2, 9, 6, scale=0.8).requires_grad_()
    w = _projection(gen, (2, 5))

    def loss_fn():
        return (mod(x) * w).sum()

    tensors = dict(params)
    tensors["input.x"] = x
    return loss_fn, tensors


def _make_split(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = SpatialSplit(d_t=7, clamp=5.0)
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed)
    f_t = _randn(gen, 2, 7, scale=0.8).requires_grad_()
    f_l = _randn(gen, 2, 7, scale=0.8).requires_grad_()
    w1 = _projection(gen, (2, 7))
    w2 = _projection(gen, (2, 7))

    def loss_fn():
        t, l = mod(f_t, f_l)
        return (t * w1).sum() + (l * w2).sum()

    tensors = dict(params)
    tensors["input.f_t"] = f_t
    tensors["input.f_l"] = f_l
    return loss_fn, tensors


def _make_assign(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = NodeAssign(d_g=5, d_node=4, skel=_toy_skeleton())
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed)
    f_t = _randn(gen, 2, 5, scale=0.8).requires_grad_()
    f_l = _randn(gen, 2, 5, scale=0.8).requires_grad_()
    w = _projection(gen, (2, NUM_JOINTS, 4))

    def loss_fn():
        return (mod(f_t, f_l) * w).sum()

    tensors = dict(params)
    tensors["input.f_t"] = f_t
    tensors["input.f_l"] = f_l
    return loss_fn, tensors


def _make_edge(mode: str):
    def factory(seed: int):
        gen = torch.Generator().manual_seed(seed)
        mod = EdgeMlp(n_features=4, hidden=6, mode=mode, skel=_toy_skeleton())
        from .featinit import init_parameters

        init_parameters(mod, seed)
        params = _perturb(mod, seed)
        x = _randn(gen, 2, NUM_JOINTS, 4, scale=0.8).requires_grad_()
        w = _projection(gen, (2, NUM_JOINTS, NUM_JOINTS))

        def loss_fn():
            return (mod(x) * w).sum()

        tensors = dict(params)
        tensors["input.x"] = x
        return loss_fn, tensors

    return factory


def _make_gcn(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = GcnLayer(5, 5, slope=0.2, residual=True)
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed)
    x = _randn(gen, 2, NUM_JOINTS, 5, scale=0.8).requires_grad_()
    a = _randn(gen, 2, NUM_JOINTS, NUM_JOINTS, scale=0.3).requires_grad_()
    w = _projection(gen, (2, NUM_JOINTS, 5))

    def loss_fn():
        return (mod(x, a) * w).sum()

    tensors = dict(params)
    tensors["input.x"] = x
    tensors["input.a"] = a
    return loss_fn, tensors


def _make_head(seed: int):
    gen = torch.Generator().manual_seed(seed)
    mod = PerNodeAffine(5, 3)
    from .featinit import init_parameters

    init_parameters(mod, seed)
    params = _perturb(mod, seed)
    x = _randn(gen, 2, NUM_JOINTS, 5, scale=0.8).requires_grad_()
    w = _projection(gen, (2, NUM_JOINTS, 3))

    def loss_fn():
        return (mod(x) * w).sum()

    tensors = dict(params)
    tensors["input.x"] = x
    return loss_fn, tensors


def _make_loss(kind: str):
    def factory(seed: int):
        gen = torch.Generator().manual_seed(seed)
        skel = _toy_skeleton()
        pred = _randn(gen, 2, NUM_JOINTS, 3, scale=0.7).requires_grad_()
        gt = _randn(gen, 2, NUM_JOINTS, 3, scale=0.7)

        if kind == "rot":

            def loss_fn():
                return loss_rot(pred, gt)

        elif kind == "pos":

            def loss_fn():
                return loss_pos(pred, gt)

        else:

            def loss_fn():
                return loss_bone(pred, skel)

        return loss_fn, {"input.pred": pred}

    return factory


def _make_rotation(seed: int):
    gen = torch.Generator().manual_seed(seed)
    axis = _randn(gen, 2, 5, 3, scale=1.0)
    axis = axis / torch.linalg.norm(axis, dim=-1, keepdim=True)
    angle = _randn(gen, 2, 5, 1, scale=1.2, base=1.4)  # away from 0 and pi
    aa = (axis * angle).requires_grad_()
    w = _projection(gen, (2, 5, 3, 3))

    def loss_fn():
        return (_rodrigues(aa) * w).sum()

    return loss_fn, {"input.axis_angle": aa}


def _make_fk(seed: int):
    gen = torch.Generator().manual_seed(seed)
    skel = _toy_skeleton()
    aa = _randn(gen, 2, NUM_JOINTS, 3, scale=0.6).requires_grad_()
    root = _randn(gen, 2, 3, scale=0.5).requires_grad_()
    w = _projection(gen, (2, NUM_JOINTS, 3))

    def loss_fn():
        positions, _ = forward_kinematics(aa, root, skel)
        return (positions * w).sum()

    return loss_fn, {"input.local_rot": aa, "input.root": root}


def _make_full_model(seed: int):
    gen = torch.Generator().manual_seed(seed)
    cfg = ModelConfig(k_window=8, d_mix=4, c1=4, d_t=8, d_g=8, d_node=6, kernel_size=3, seed=seed,
                      gcn_layers=2, edge_hidden=8)
    skel = _toy_skeleton()
    model = PoseModel(cfg, skel)
    params = _perturb(model, seed, scale=0.15)
    f_p = _randn(gen, 2, 8, 3, 6, scale=0.5).requires_grad_()
    f_a = _randn(gen, 2, 8, 3, 12, scale=0.5).requires_grad_()
    head = _randn(gen, 2, 3, scale=0.4)
    gt = _Targets(
        local_rot=_randn(gen, 2, NUM_JOINTS, 3, scale=0.5),
        positions=_randn(gen, 2, NUM_JOINTS, 3, scale=0.5),
    )

    def loss_fn():
        out = model(f_p, f_a, head)
        return total_loss(out, gt, skel).l_total

    tensors = dict(params)
    tensors["input.f_p"] = f_p
    tensors["input.f_a"] = f_a
    return loss_fn, tensors


class _CorruptedMatmul(torch.autograd.Function):
    """Linear map whose weight gradient is deliberately off by 1 percent."""

    @staticmethod
    def forward(ctx, x, w):
        ctx.save_for_backward(x, w)
        return x @ w

    @staticmethod
    def backward(ctx, grad_out):
        x, w = ctx.saved_tensors
        return grad_out @ w.T, 1.01 * (x.T @ grad_out)


def _make_corrupted(seed: int):
    gen = torch.Generator().manual_seed(seed)
    x = _randn(gen, 4, 5, scale=0.8)
    w = _randn(gen, 5, 3, scale=0.8).requires_grad_()
    proj = _projection(gen, (4, 3))

    def loss_fn():
        return (_CorruptedMatmul.apply(x, w) * proj).sum()

    return loss_fn, {"corrupted.weight": w}


register_block("dual_interactive", _make_dual)
register_block("sci_block", _make_sci)
register_block("temporal_pyramid", _make_pyramid)
register_block("spatial_split", _make_split)
register_block("node_assign", _make_assign)
register_block("edge_mlp_skeleton", _make_edge("skeleton"))
register_block("edge_mlp_latent", _make_edge("latent"))
register_block("gcn_layer", _make_gcn)
register_block("output_head", _make_head)
register_block("loss_rot", _make_loss("rot"))
register_block("loss_pos", _make_loss("pos"))
register_block("loss_bone", _make_loss("bone"))
register_block("rotation_map", _make_rotation)
register_block("forward_kinematics", _make_fk)
register_block("full_model", _make_full_model, entry_budget=24)
register_block("selftest_corrupted", _make_corrupted, diagnostic=True)


_BLOCK_OF_PARAM_PATTERNS = (
    ("featinit.dual.", "dual_interactive"),
    ("featinit.pyramid_trunk.level.", "sci_block"),
    ("featinit.pyramid_trunk.merge.", "sci_block"),
    ("featinit.pyramid_trunk.head.", "temporal_pyramid"),
    ("featinit.pyramid_limb.level.", "sci_block"),
    ("featinit.pyramid_limb.merge.", "sci_block"),
    ("featinit.pyramid_limb.head.", "temporal_pyramid"),
    ("featinit.split.", "spatial_split"),
    ("featinit.assign.", "node_assign"),
    ("graph.edge_ds.", "edge_mlp_skeleton"),
    ("graph.edge_l.", "edge_mlp_latent"),
    ("graph.layers.", "gcn_layer"),
    ("graph.head.", "output_head"),
)


def block_of_param(name: str) -> str | None:
    """Map a PoseModel parameter name to its gradcheck block (None if unknown)."""
    for prefix, block in _BLOCK_OF_PARAM_PATTERNS:
        if name.startswith(prefix):
            return block
    return None
