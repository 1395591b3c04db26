"""Training loop, configuration, checkpointing, and experiment runners.

Everything is deterministic given (config, seed, dataset): parameter init,
epoch shuffling, and region proposals all derive from fixed seed streams,
and checkpoints restore training bit-exactly from any epoch boundary.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import synthdata, tasks
from .model import Multinet, MultinetOutput, TaskConfig
from .synthdata import SceneSpec, propose_regions
from .tasks import ScenePrediction, assign_regions
from .tensor import ParamGroup, Tape, Tensor, TensorError, backward, seed_rng, sgd_step

__all__ = [
    "RunConfig",
    "ConfigError",
    "TrainingError",
    "parse_config",
    "load_config",
    "build_task_config",
    "train",
    "TrainState",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "evaluate_model",
    "compare_modes",
    "ground_experiment",
    "recurrence_sweep",
    "write_metrics_csv",
]

CKPT_MAGIC = b"MNCKPT\x00"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """Malformed run configuration."""


class TrainingError(RuntimeError):
    """Aborted training run (with epoch/scene context)."""


@dataclass
class RunConfig:
    version: int = 1
    mode: str = "update1"
    iterations: int = 2
    lr_phase1: float = 1e-3
    epochs_phase1: int = 12
    lr_phase2: float = 1e-4
    epochs_phase2: int = 12
    weight_cls: float = 1.0
    weight_det: float = 1.0
    weight_part: float = 1.0
    weight_bbox: float = 1.0
    seed: int = 0
    seeds: str = "0,1,2"  # used by the mode-comparison runner
    proposals: int = 64
    channels: int = 32
    cls_hidden: int = 64
    region_hidden: int = 64
    spp_grid: int = 6
    truncate_feedback: bool = False

    def __post_init__(self):
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.epochs_phase1 < 1 or self.epochs_phase2 < 0:
            raise ConfigError("epoch counts invalid")

    @property
    def total_epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2

    def lr_for_epoch(self, epoch: int) -> float:
        return self.lr_phase1 if epoch < self.epochs_phase1 else self.lr_phase2

    def seed_list(self):
        return [int(s) for s in self.seeds.split(",") if s.strip() != ""]


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    """Flat `key = value` format; unknown keys and a missing/unsupported
    version key are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    if "version" not in values:
        raise ConfigError("config is missing the 'version' key")
    if values["version"] != 1:
        raise ConfigError(f"unsupported config version {values['version']}")
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def build_task_config(config: RunConfig, spec: SceneSpec, scenes) -> TaskConfig:
    has_parts = any(s.parts for s in scenes)
    return TaskConfig(
        c_cls=spec.n_classes,
        c_part=spec.n_part_classes if has_parts else 0,
        m=config.proposals,
        t=config.iterations,
        mode=config.mode,
        canvas=spec.canvas,
        channels=config.channels,
        cls_hidden=config.cls_hidden,
        region_hidden=config.region_hidden,
        spp_grid=config.spp_grid,
        truncate_feedback=config.truncate_feedback,
    )


@dataclass
class SceneBatch:
    """Precomputed per-scene training inputs (proposals are fixed across
    iterations and derived only from the dataset, not the training seed)."""

    scene: synthdata.Scene
    proposals: list
    det_labels: np.ndarray
    det_delta_targets: np.ndarray  # (M, 4*(C_cls+1))
    det_delta_mask: np.ndarray
    part_labels: np.ndarray | None
    part_delta_targets: np.ndarray | None
    part_delta_mask: np.ndarray | None


def _delta_matrix(targets: tasks.RegionTargets, k: int):
    m = targets.labels.shape[0]
    mat = np.zeros((m, 4 * (k + 1)))
    mask = np.zeros((m, 4 * (k + 1)))
    for i in range(m):
        lab = targets.labels[i]
        if lab >= 1:
            mat[i, 4 * lab : 4 * lab + 4] = targets.deltas[i]
            mask[i, 4 * lab : 4 * lab + 4] = 1.0
    return mat, mask


def prepare_scene(scene, spec: SceneSpec, cfg: TaskConfig, index: int) -> SceneBatch:
    props = propose_regions(scene, spec, cfg.m, seed=index)
    det_t = assign_regions(props, scene.objects)
    det_mat, det_mask = _delta_matrix(det_t, cfg.c_cls)
    if cfg.has_part:
        part_gt = [(cls, box) for cls, box, _parent in scene.parts]
        part_t = assign_regions(props, part_gt)
        part_mat, part_mask = _delta_matrix(part_t, cfg.c_part)
        return SceneBatch(scene, props, det_t.labels, det_mat, det_mask,
                          part_t.labels, part_mat, part_mask)
    return SceneBatch(scene, props, det_t.labels, det_mat, det_mask, None, None, None)


def _region_loss(scores, deltas, labels, delta_t, delta_mask, w_cls, w_bbox):
    from .tensor import take_rows

    terms = []
    keep = np.nonzero(labels >= 0)[0]
    if w_cls > 0 and keep.size:
        ce = tasks.softmax_ce(take_rows(scores, keep), labels[keep])
        terms.append(ce * w_cls)
    if w_bbox > 0 and delta_mask.any():
        terms.append(tasks.smooth_l1(deltas, delta_t, delta_mask) * w_bbox)
    return terms


def scene_loss(model: Multinet, batch: SceneBatch, config: RunConfig, decode_tasks=None):
    """Total loss: every iteration's outputs are supervised."""
    outputs = model.forward(batch.scene.image, batch.proposals, decode_tasks=decode_tasks)
    terms = []
    gt_label = batch.scene.img_label.astype(np.float64)
    for out in outputs:
        if out.x_cls is not None and config.weight_cls > 0:
            terms.append(tasks.bce_multilabel(out.x_cls, gt_label) * config.weight_cls)
        if out.x_det is not None:
            terms.extend(
                _region_loss(out.x_det, out.det_deltas, batch.det_labels,
                             batch.det_delta_targets, batch.det_delta_mask,
                             config.weight_det, config.weight_bbox)
            )
        if out.x_part is not None and batch.part_labels is not None:
            terms.extend(
                _region_loss(out.x_part, out.part_deltas, batch.part_labels,
                             batch.part_delta_targets, batch.part_delta_mask,
                             config.weight_part, config.weight_bbox if config.weight_part > 0 else 0.0)
            )
    if not terms:
        return Tensor(0.0), outputs
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, outputs


def _active_decode_tasks(config: RunConfig, cfg: TaskConfig):
    # Heads with zero loss weight are skipped in non-recurrent runs.
    active = []
    if config.weight_cls > 0:
        active.append("cls")
    if config.weight_det > 0 or config.weight_bbox > 0:
        active.append("det")
    if cfg.has_part and config.weight_part > 0:
        active.append("part")
    return tuple(active) if active else ("cls", "det", "part")


@dataclass
class TrainState:
    model: Multinet
    config: RunConfig
    epoch: int
    rng_state: dict
    history: list = field(default_factory=list)  # per-epoch mean loss


def train(
    config: RunConfig,
    spec: SceneSpec,
    scenes,
    resume: TrainState | None = None,
    stop_after_epoch: int | None = None,
    log=None,
) -> TrainState:
    """SGD training with the two-phase learning-rate schedule.

    `resume` continues a previous run bit-exactly from its epoch boundary;
    `stop_after_epoch` halts after the given (1-based) epoch count.
    """
    cfg = build_task_config(config, spec, scenes)
    if resume is not None:
        model = resume.model
        start_epoch = resume.epoch
        shuffle_rng = seed_rng(config.seed, 1)
        shuffle_rng.bit_generator.state = resume.rng_state
        history = list(resume.history)
    else:
        model = Multinet(cfg, seed=config.seed)
        start_epoch = 0
        shuffle_rng = seed_rng(config.seed, 1)
        history = []

    batches = [prepare_scene(s, spec, cfg, i) for i, s in enumerate(scenes)]
    decode_tasks = _active_decode_tasks(config, cfg)
    end = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)

    for epoch in range(start_epoch, end):
        lr = config.lr_for_epoch(epoch)
        order = shuffle_rng.permutation(len(batches))
        losses = []
        for i in order:
            try:
                with Tape() as tape:
                    loss, _ = scene_loss(model, batches[i], config, decode_tasks)
                    backward(loss, tape)
                if lr > 0:
                    sgd_step(model.params, lr)
                model.params.zero_grads()
            except TensorError as e:
                raise TrainingError(f"epoch {epoch}, scene {int(i)}: {e}") from e
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch + 1}/{config.total_epochs} lr={lr:g} loss={history[-1]:.4f}")
    return TrainState(model, config, end, shuffle_rng.bit_generator.state, history)


# ---- checkpoints ---------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    header = {
        "run_config": dataclasses.asdict(state.config),
        "task_config": dataclasses.asdict(state.model.cfg),
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "optimizer": {},  # plain SGD carries no state
        "history": state.history,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    items = state.model.params.items()
    chunks.append(struct.pack("<I", len(items)))
    for name, tensor, mult in items:
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<d", mult))
        chunks.append(struct.pack("<I", tensor.data.ndim))
        chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 8 + 32:
        raise TrainingError("truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise TrainingError("checkpoint checksum mismatch")
    r = synthdata._Reader(body)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise TrainingError("bad checkpoint magic")
    if r.u32() != CKPT_VERSION:
        raise TrainingError("unsupported checkpoint version")
    header = json.loads(r.take(r.u32()).decode())
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        (mult,) = struct.unpack("<d", r.take(8))
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        data = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8").reshape(shape).copy()
        params[name] = (data, mult)
    header["params"] = params
    return header


def restore_model(ckpt: dict) -> TrainState:
    config = RunConfig(**ckpt["run_config"])
    cfg = TaskConfig(**ckpt["task_config"])
    model = Multinet(cfg, seed=config.seed)
    for name, tensor, _mult in model.params.items():
        data, _ = ckpt["params"][name]
        if data.shape != tensor.data.shape:
            raise TrainingError(f"checkpoint parameter {name!r} has wrong shape")
        tensor.data[...] = data
    rng_state = ckpt["rng_state"]
    return TrainState(model, config, ckpt["epoch"], rng_state, list(ckpt.get("history", [])))


# ---- evaluation ----------------------------------------------------------


def _predictions(model: Multinet, spec, scenes, at_iter=None, ground_task=None):
    cfg = model.cfg
    preds = []
    for i, scene in enumerate(scenes):
        props = propose_regions(scene, spec, cfg.m, seed=i)
        ground = None
        if ground_task == "cls":
            ground = {"cls": scene.img_label.astype(np.float64)}
        elif ground_task is not None:
            raise ValueError(f"grounding not supported for task {ground_task!r}")
        outs = model.forward(scene.image, props, ground=ground, n_iters=at_iter)
        out = outs[-1]
        preds.append(
            ScenePrediction(
                cls_scores=out.x_cls.data.copy(),
                det_scores=out.x_det.data.copy(),
                det_deltas=out.det_deltas.data.copy(),
                part_scores=None if out.x_part is None else out.x_part.data.copy(),
                part_deltas=None if out.part_deltas is None else out.part_deltas.data.copy(),
                proposals=props,
            )
        )
    return preds


def evaluate_model(model: Multinet, spec, scenes, at_iter=None, ground_task=None,
                   eleven_point=False) -> dict:
    """Run the model over held-out scenes and score all enabled tasks."""
    preds = _predictions(model, spec, scenes, at_iter, ground_task)
    return tasks.evaluate(
        preds,
        scenes,
        n_classes=model.cfg.c_cls,
        n_part_classes=model.cfg.c_part,
        eleven_point=eleven_point,
        canvas=model.cfg.canvas,
    )


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(tasks.METRIC_CSV_COLUMNS)
        w.writerows(rows)


# ---- experiment runners --------------------------------------------------

COMPARE_MODES = ("independent", "shared", "update1", "update2")


def _train_independent(config: RunConfig, spec, train_scenes, log=None) -> dict:
    """One single-task network per task; returns their evaluation models."""
    nets = {}
    zeroed = {
        "cls": dict(weight_det=0.0, weight_part=0.0, weight_bbox=0.0),
        "det": dict(weight_cls=0.0, weight_part=0.0),
        "part": dict(weight_cls=0.0, weight_det=0.0),
    }
    has_parts = any(s.parts for s in train_scenes)
    for task, overrides in zeroed.items():
        if task == "part" and not has_parts:
            continue
        c = dataclasses.replace(config, mode="independent", **overrides)
        nets[task] = train(c, spec, train_scenes, log=log).model
    return nets


def train_and_eval_mode(mode: str, config: RunConfig, spec, train_scenes, val_scenes,
                        seed: int, log=None):
    """Train one comparison row and evaluate it on the validation scenes."""
    config = dataclasses.replace(config, seed=seed, mode=mode)
    if mode == "independent":
        nets = _train_independent(config, spec, train_scenes, log=log)
        m_cls = evaluate_model(nets["cls"], spec, val_scenes)
        m_det = evaluate_model(nets["det"], spec, val_scenes)
        metrics = {
            "cls_map": m_cls["cls_map"],
            "cls_ap_per_class": m_cls["cls_ap_per_class"],
            "det_ap": m_det["det_ap"],
            "det_ap_per_class": m_det["det_ap_per_class"],
            "part_ap": None,
            "part_ap_per_class": None,
        }
        if "part" in nets:
            m_part = evaluate_model(nets["part"], spec, val_scenes)
            metrics["part_ap"] = m_part["part_ap"]
            metrics["part_ap_per_class"] = m_part["part_ap_per_class"]
        return metrics, None
    state = train(config, spec, train_scenes, log=log)
    return evaluate_model(state.model, spec, val_scenes), state


def compare_modes(config: RunConfig, spec, train_scenes, val_scenes, seeds=None,
                  modes=COMPARE_MODES, log=None):
    """Train all comparison rows across seeds; returns
    {mode: {seed: metrics}} plus per-mode medians."""
    seeds = list(seeds) if seeds is not None else config.seed_list()
    results = {mode: {} for mode in modes}
    for mode in modes:
        for seed in seeds:
            if log:
                log(f"--- mode={mode} seed={seed}")
            metrics, _state = train_and_eval_mode(
                mode, config, spec, train_scenes, val_scenes, seed, log=log
            )
            results[mode][seed] = metrics
    medians = {}
    for mode in modes:
        vals = results[mode]
        medians[mode] = {
            key: (
                float(np.median([v[key] for v in vals.values()]))
                if all(v[key] is not None for v in vals.values())
                else None
            )
            for key in ("cls_map", "det_ap", "part_ap")
        }
    return results, medians


def comparison_table(results, medians, seeds) -> str:
    """Markdown table shaped like the paper-style mode comparison."""
    names = {
        "independent": "Independent",
        "shared": "Multi-task",
        "update1": "Ours (stack)",
        "update2": "Ours (with bottleneck)",
    }
    lines = ["| Method | cls mAP | det AP@0.5 | part AP@0.4 |", "|---|---|---|---|"]
    for mode, med in medians.items():
        cells = [
            "-" if med[k] is None else f"{med[k]:.3f}"
            for k in ("cls_map", "det_ap", "part_ap")
        ]
        lines.append(f"| {names.get(mode, mode)} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def comparison_rows(results, run_id="compare"):
    rows = []
    for mode, per_seed in results.items():
        for seed, metrics in per_seed.items():
            rows.extend(tasks.metrics_to_rows(run_id, mode, "-", seed, metrics))
    return rows


def ground_experiment(state: TrainState, spec, scenes, task: str = "cls") -> dict:
    """Paired metrics: standard vs. truth-grounded predictions, both read one
    iteration after the grounding point."""
    model = state.model
    if model.cfg.mode in ("independent", "shared") or model.cfg.t < 1:
        raise TrainingError("grounding requires a recurrent checkpoint (T >= 1)")
    ungrounded = evaluate_model(model, spec, scenes, at_iter=1)
    grounded = evaluate_model(model, spec, scenes, at_iter=1, ground_task=task)
    deltas = {}
    for key in ("cls_map", "det_ap", "part_ap"):
        if ungrounded[key] is not None and grounded[key] is not None:
            deltas[key] = grounded[key] - ungrounded[key]
    return {"ungrounded": ungrounded, "grounded": grounded, "deltas": deltas}


def recurrence_sweep(state: TrainState, spec, scenes, t_max: int):
    """Evaluate the same trained model unrolled to t = 0..t_max."""
    rows = []
    for t in range(t_max + 1):
        m = state.model
        metrics = evaluate_model(m, spec, scenes, at_iter=t)
        rows.append(
            {
                "t": t,
                "cls_map": metrics["cls_map"],
                "det_ap": metrics["det_ap"],
                "part_ap": metrics["part_ap"],
            }
        )
    return rows
