"""Recurrent multi-task architecture: shared conv backbone, per-task label
encoders/decoders, and two integrator variants.

Iteration schedule: at t=0 the shared map holds image features only (task
channels start at zero for the stacking integrator) and each head makes an
ordinary multi-task prediction. For t >= 1 the previous predictions are
re-encoded into spatial maps, integrated with the image features, and all
heads decode again. Decoder weights are tied across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops
from .nnops import ConvLayer, FCLayer, SppGrid
from .tensor import (
    ParamGroup,
    Tensor,
    TensorError,
    make_op,
    reshape,
    rng_tensor,
    seed_rng,
)

__all__ = ["TaskConfig", "MultinetOutput", "Multinet", "encode_cls", "encode_det", "MODES"]

MODES = ("independent", "shared", "update1", "update2")

# Modes whose decoders read the stacked (image + task channel) layout.
_STACKED_MODES = ("independent", "shared", "update1")


@dataclass
class TaskConfig:
    c_cls: int = 5
    c_part: int = 10  # 0 disables the part task entirely
    m: int = 64  # region proposals per image
    t: int = 2  # recursion depth
    mode: str = "update1"
    canvas: int = 64
    channels: int = 32  # backbone output channels C
    cls_hidden: int = 64
    region_hidden: int = 64
    spp_grid: int = 6
    stride: int = 8  # fixed by the 3 pooling stages of the backbone
    truncate_feedback: bool = False  # stop gradients at label re-encoding

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.c_cls < 1 or self.c_part < 0 or self.m < 1 or self.t < 0:
            raise ValueError("invalid task configuration")
        if self.canvas % self.stride != 0:
            raise ValueError(f"canvas {self.canvas} not divisible by stride {self.stride}")

    @property
    def has_part(self) -> bool:
        return self.c_part > 0

    @property
    def task_channels(self) -> int:
        """Channels contributed by re-encoded task labels."""
        n = self.c_cls + (self.c_cls + 1)
        if self.has_part:
            n += self.c_part + 1
        return n

    @property
    def stacked_channels(self) -> int:
        """C + 2*C_cls + C_part + 2 with all three tasks enabled."""
        return self.channels + self.task_channels

    @property
    def decoder_channels(self) -> int:
        """Channel count decoders consume: the full stacked layout for the
        stacking integrator (task channels zeroed at t=0), C for the
        bottleneck integrator."""
        return self.stacked_channels if self.mode in _STACKED_MODES else self.channels

    @property
    def feature_size(self) -> int:
        return self.canvas // self.stride


@dataclass
class MultinetOutput:
    t: int
    x_cls: Tensor  # (C_cls,) sigmoid probabilities
    x_det: Tensor  # (M, C_cls + 1) row-stochastic
    det_deltas: Tensor  # (M, 4 * (C_cls + 1))
    x_part: Tensor | None = None  # (M, C_part + 1)
    part_deltas: Tensor | None = None


def encode_cls(x_cls: Tensor, h: int, w: int) -> Tensor:
    """Broadcast class probabilities to every spatial cell: (H, W, C_cls)."""
    c = x_cls.data.shape[0]
    data = np.broadcast_to(x_cls.data, (h, w, c)).copy()

    def bwd(g):
        return (g.sum(axis=(0, 1)),)

    return make_op(data, (x_cls,), bwd, "encode_cls")


def encode_det(x: Tensor, boxes, h: int, w: int, stride: int) -> Tensor:
    """Heat map of region scores: each cell takes the channelwise max over
    the scores of regions whose feature footprint covers it, or 0 when no
    region does. Gradient routes to the first covering region attaining the
    max (strictly positive maxima only)."""
    m, k1 = x.data.shape
    data = np.zeros((h, w, k1))
    winner = np.full((h, w, k1), -1, dtype=np.int64)
    fps = nnops.feature_footprints(boxes, stride, h, w)
    for i, (r0, r1, c0, c1) in enumerate(fps):
        row = x.data[i]
        cur = data[r0:r1, c0:c1]
        upd = row[None, None, :] > cur  # strict: earlier regions win ties
        np.copyto(cur, np.where(upd, row[None, None, :], cur))
        wslice = winner[r0:r1, c0:c1]
        np.copyto(wslice, np.where(upd, i, wslice))

    def bwd(g):
        gx = np.zeros((m, k1))
        for i, (r0, r1, c0, c1) in enumerate(fps):
            sel = winner[r0:r1, c0:c1] == i
            gx[i] = (g[r0:r1, c0:c1] * sel).sum(axis=(0, 1))
        return (gx,)

    return make_op(data, (x,), bwd, "encode_det")


def _he_conv(rng, k, cin, cout):
    std = np.sqrt(2.0 / (k * k * cin))
    return rng_tensor(rng, (k, k, cin, cout), "gaussian", std=std)


def _he_fc(rng, din, dout):
    std = np.sqrt(2.0 / din)
    return rng_tensor(rng, (din, dout), "gaussian", std=std)


class Multinet:
    """The full network for one task configuration.

    Parameters are created once and shared across all recurrent iterations,
    so the parameter count is independent of the recursion depth.
    """

    def __init__(self, cfg: TaskConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamGroup()
        self.grid = SppGrid(cfg.spp_grid, cfg.stride)
        rng = seed_rng(seed, 0xC0FFEE)
        c = cfg.channels
        c1 = max(c // 2, 4)
        self._conv_defs = [(3, 3, c1, True), (3, c1, c, True), (3, c, c, True), (3, c, c, False)]
        self.backbone = []
        for i, (k, cin, cout, pool) in enumerate(self._conv_defs):
            f = self.params.add(f"backbone.conv{i + 1}.filters", _he_conv(rng, k, cin, cout), 1.0)
            b = self.params.add(f"backbone.conv{i + 1}.bias", Tensor(np.zeros(cout)), 2.0)
            self.backbone.append((ConvLayer(f, b, stride=1, padding=1), pool))

        dc = cfg.decoder_channels
        # Image-classification head: global max pool, two hidden FCs, a
        # sigmoid output layer (final layer Gaussian std 0.01).
        hc = cfg.cls_hidden
        self.cls_fc1 = self._fc(rng, "cls.fc1", dc, hc, he=True)
        self.cls_fc2 = self._fc(rng, "cls.fc2", hc, hc, he=True)
        self.cls_out = self._fc(rng, "cls.out", hc, cfg.c_cls, std=0.01)

        # Region heads (shared structure for objects and parts): SPP,
        # two hidden FCs, softmax scores (std 0.01) + box deltas (std 0.001).
        din = cfg.spp_grid * cfg.spp_grid * dc
        hr = cfg.region_hidden
        self.det_head = self._region_head(rng, "det", din, hr, cfg.c_cls + 1)
        self.part_head = (
            self._region_head(rng, "part", din, hr, cfg.c_part + 1) if cfg.has_part else None
        )

        if cfg.mode == "update2":
            cin = c + cfg.stacked_channels  # h_prev stacked with image + task maps
            f = self.params.add(
                "bottleneck.filters", rng_tensor(rng, (1, 1, cin, c), "gaussian", std=0.01), 1.0
            )
            b = self.params.add("bottleneck.bias", Tensor(np.zeros(c)), 2.0)
            self.bottleneck = ConvLayer(f, b, stride=1, padding=0)
        else:
            self.bottleneck = None

    def _fc(self, rng, name, din, dout, he=False, std=0.01):
        w = _he_fc(rng, din, dout) if he else rng_tensor(rng, (din, dout), "gaussian", std=std)
        weight = self.params.add(f"{name}.weight", w, 1.0)
        bias = self.params.add(f"{name}.bias", Tensor(np.zeros(dout)), 2.0)
        return FCLayer(weight, bias)

    def _region_head(self, rng, name, din, hidden, k1):
        return {
            "fc1": self._fc(rng, f"{name}.fc1", din, hidden, he=True),
            "fc2": self._fc(rng, f"{name}.fc2", hidden, hidden, he=True),
            "score": self._fc(rng, f"{name}.score", hidden, k1, std=0.01),
            "delta": self._fc(rng, f"{name}.delta", hidden, 4 * k1, std=0.001),
        }

    # ---- encoders -------------------------------------------------------

    def encode_image(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image)
        hin, win = x.data.shape[:2]
        if hin % self.cfg.stride or win % self.cfg.stride:
            raise TensorError(
                f"image dims {hin}x{win} not divisible by stride {self.cfg.stride}"
            )
        for layer, pool in self.backbone:
            x = nnops.relu(nnops.conv2d(x, layer))
            if pool:
                x = nnops.max_pool2d(x, 2, 2)
        return x

    # ---- decoders -------------------------------------------------------

    def decode_cls(self, h: Tensor) -> Tensor:
        v = nnops.global_max_pool(h)
        v = nnops.relu(nnops.fully_connected(v, self.cls_fc1))
        v = nnops.relu(nnops.fully_connected(v, self.cls_fc2))
        return nnops.sigmoid(nnops.fully_connected(v, self.cls_out))

    def decode_regions(self, h: Tensor, boxes, head: str):
        hd = self.det_head if head == "det" else self.part_head
        pooled = nnops.spp_pool_regions(h, [b.as_tuple() for b in boxes], self.grid)
        m = pooled.data.shape[0]
        feat = reshape(pooled, (m, pooled.data.size // m))
        feat = nnops.relu(nnops.fully_connected(feat, hd["fc1"]))
        feat = nnops.relu(nnops.fully_connected(feat, hd["fc2"]))
        scores = nnops.softmax_rows(nnops.fully_connected(feat, hd["score"]))
        deltas = nnops.fully_connected(feat, hd["delta"])
        return scores, deltas

    def _decode_all(self, h: Tensor, boxes, t: int, tasks) -> MultinetOutput:
        x_cls = self.decode_cls(h) if "cls" in tasks else None
        x_det = det_d = x_part = part_d = None
        if "det" in tasks:
            x_det, det_d = self.decode_regions(h, boxes, "det")
        if self.cfg.has_part and "part" in tasks:
            x_part, part_d = self.decode_regions(h, boxes, "part")
        return MultinetOutput(t, x_cls, x_det, det_d, x_part, part_d)

    # ---- integrators ----------------------------------------------------

    def integrate_stack(self, r_img, r_cls, r_det, r_part=None) -> Tensor:
        maps = [r_img, r_cls, r_det]
        if r_part is not None:
            maps.append(r_part)
        return nnops.stack_channels(maps)

    def integrate_bottleneck(self, h_prev, r_img, r_cls, r_det, r_part=None) -> Tensor:
        maps = [h_prev, r_img, r_cls, r_det]
        if r_part is not None:
            maps.append(r_part)
        stacked = nnops.stack_channels(maps)
        return nnops.relu(nnops.conv2d(stacked, self.bottleneck))

    def _zero_task_maps(self, hh, ww):
        cfg = self.cfg
        zc = Tensor(np.zeros((hh, ww, cfg.c_cls)))
        zd = Tensor(np.zeros((hh, ww, cfg.c_cls + 1)))
        zp = Tensor(np.zeros((hh, ww, cfg.c_part + 1))) if cfg.has_part else None
        return zc, zd, zp

    # ---- iteration schedule ---------------------------------------------

    def forward(self, image, boxes, ground=None, n_iters=None, decode_tasks=None) -> list:
        """Run the recurrent schedule; returns T+1 per-iteration outputs.

        `ground` optionally maps a task name ("cls" | "det" | "part") to a
        ground-truth label array; that task is then re-encoded from the
        truth instead of its prediction at every iteration (the label is
        treated as an input). Modes without recurrence return outputs[0]
        only. `decode_tasks` restricts which heads run when there is no
        recurrence (recurrent iterations always decode every task since the
        feedback loop needs all labels).
        """
        cfg = self.cfg
        if len(boxes) != cfg.m:
            raise TensorError(f"expected {cfg.m} regions, got {len(boxes)}")
        ground = ground or {}
        for task in ground:
            if task not in ("cls", "det", "part"):
                raise ValueError(f"cannot ground unknown task {task!r}")
        r_img = self.encode_image(image)
        hh, ww = r_img.data.shape[:2]
        n_iters = cfg.t if n_iters is None else n_iters
        if cfg.mode in ("independent", "shared"):
            n_iters = 0
        all_tasks = ("cls", "det", "part")
        tasks = all_tasks if n_iters > 0 or decode_tasks is None else tuple(decode_tasks)

        if cfg.mode in _STACKED_MODES:
            zc, zd, zp = self._zero_task_maps(hh, ww)
            h = self.integrate_stack(r_img, zc, zd, zp)
        else:
            h = r_img
        outputs = [self._decode_all(h, boxes, 0, tasks)]

        for t in range(1, n_iters + 1):
            prev = outputs[-1]
            x_cls = self._feedback("cls", prev.x_cls, ground, (cfg.c_cls,))
            x_det = self._feedback("det", prev.x_det, ground, (cfg.m, cfg.c_cls + 1))
            r_cls = encode_cls(x_cls, hh, ww)
            r_det = encode_det(x_det, boxes, hh, ww, cfg.stride)
            if cfg.has_part:
                x_part = self._feedback("part", prev.x_part, ground, (cfg.m, cfg.c_part + 1))
                r_part = encode_det(x_part, boxes, hh, ww, cfg.stride)
            else:
                r_part = None
            if cfg.mode == "update1":
                h = self.integrate_stack(r_img, r_cls, r_det, r_part)
            else:
                h = self.integrate_bottleneck(h, r_img, r_cls, r_det, r_part)
            outputs.append(self._decode_all(h, boxes, t, all_tasks))
        return outputs

    def _feedback(self, task, pred: Tensor, ground, expect_shape):
        if task in ground:
            truth = np.asarray(ground[task], dtype=np.float64)
            if truth.shape != expect_shape:
                raise TensorError(
                    f"grounded {task} label has shape {truth.shape}, expected {expect_shape}"
                )
            return Tensor(truth)
        return pred.detach() if self.cfg.truncate_feedback else pred

    def ground_label(self, image, boxes, task: str, truth, n_iters=None) -> list:
        """Forward pass with one task's label grounded to the given truth."""
        return self.forward(image, boxes, ground={task: truth}, n_iters=n_iters)
