"""The four fusion pipelines and the two-stage training procedure.

Variants (all predict a scene-level ground-plane density map):

* ``late``: per-view density maps (full backbone, quarter resolution) are
  projected to the ground grid, normalized per cell to restore Gaussian
  masses, concatenated, and fused.
* ``naive``: per-view feature maps (first 4 conv layers, half resolution)
  are projected and fused without normalization.
* ``mvms``: features are extracted from an image pyramid per view, upsampled
  to a common size, blended per pixel by learnable soft scale-selection
  masks driven by the camera distance map, then projected and fused.
* ``mvmsr``: mvms plus a stack of rotation-selection layers applied to each
  view's projected features before fusion.

Training runs in two stages (view-level auxiliary losses + scene loss, then
frozen backbone with decaying learning rate) followed by end-to-end
fine-tuning; the loss is the pixel-wise squared error summed over the map.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio, net
from .density import (
    NormalizationMap,
    camera_region_count,
    dmap_weighted_count,
    mae_nae,
    normalization_map,
    render_density,
    view_weight_maps,
)
from .geometry import GROUND_TO_IMAGE, CameraModel, SceneConfig, build_correspondence, distance_map, view_ray_angle_map
from .maps import Map2D, read_map
from .net import Parameters
from .rotation_select import (
    RotationConfig,
    quantize_angle_map,
    rotation_select_backward,
    rotation_select_layer,
)
from .sampler import AreaReduce, BilinearResize, sample, sample_array_adjoint
from .scale_select import (
    LearnableScaleParams,
    PyramidConfig,
    learnable_scale_map,
    level_size,
    merge_scales_backward,
    scale_map_backward,
)

VARIANTS = ("late", "naive", "mvms", "mvmsr")


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "mvms"
    channel_factor: float = 1.0  # scales every channel width (1/4 = toy scale)
    sigma_view: float = 3.0  # GT sigma at the backbone-output raster, px
    sigma_scene: float = 3.0  # GT sigma on the ground grid, cells
    n_scales: int = 3
    zoom: float = 2.0
    rot_k1: int = 5
    rot_k2: int = 3
    rot_q: float = 45.0
    rot_layers: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class TrainSchedule:
    stage1_iters: int = 120
    stage2_iters: int = 60
    finetune_iters: int = 60
    lr_stage1: float = 1e-4
    lr_stage2_start: float = 1e-4
    lr_stage2_end: float = 5e-5
    lr_finetune: float = 5e-5

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class SceneDataset:
    """Loader for a generated scene directory; caches frames and targets."""

    def __init__(self, scene_dir):
        self.scene_dir = str(scene_dir)
        self.cameras = fileio.load_calibration(os.path.join(self.scene_dir, "calib.txt"))
        self.cameras.sort(key=lambda c: c.cam_id)
        self.scene = fileio.load_scene_config(os.path.join(self.scene_dir, "scene.txt"))
        self.train_indices, self.test_indices = self._load_split()
        self._frames: dict = {}
        self._scene_gt: dict = {}
        self._annotations: dict = {}
        self._view_gt: dict = {}

    def _load_split(self):
        train, test = [], []
        path = os.path.join(self.scene_dir, "split.txt")
        with open(path) as f:
            for line in f:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "train":
                    train = [int(v) for v in tok[1:]]
                elif tok[0] == "test":
                    test = [int(v) for v in tok[1:]]
        return train, test

    @property
    def n_frames(self) -> int:
        return len(self.train_indices) + len(self.test_indices)

    def frames(self, idx: int) -> dict:
        if idx not in self._frames:
            out = {}
            for cam in self.cameras:
                path = os.path.join(self.scene_dir, "frames", f"{idx:04d}_cam{cam.cam_id}.mv2d")
                out[cam.cam_id] = read_map(path, tag=cam.tag)
            self._frames[idx] = out
        return self._frames[idx]

    def annotations(self, idx: int):
        if idx not in self._annotations:
            path = os.path.join(self.scene_dir, "annot", f"{idx:04d}.txt")
            self._annotations[idx] = fileio.load_annotations(path)
        return self._annotations[idx]

    def scene_gt(self, idx: int) -> Map2D:
        if idx not in self._scene_gt:
            path = os.path.join(self.scene_dir, "gt", f"{idx:04d}_scene.mv2d")
            self._scene_gt[idx] = read_map(path)
        return self._scene_gt[idx]

    def view_gt(self, idx: int, camera: CameraModel, pool_steps: int, sigma: float) -> Map2D:
        """View-level GT density rendered at the pooled raster of `camera`."""
        key = (idx, camera.cam_id, pool_steps, sigma)
        if key not in self._view_gt:
            ann = self.annotations(idx)
            heads = ann.head_pixels(camera.cam_id)
            pts = heads.copy()
            for _ in range(pool_steps):
                pts = (pts - 0.5) / 2.0
            scaled = camera.scaled(pool_steps)
            rc = pts[:, ::-1] if len(pts) else np.zeros((0, 2))
            self._view_gt[key] = render_density(rc, sigma, scaled.image_height, scaled.image_width, tag=camera.tag)
        return self._view_gt[key]


@dataclass
class FusionPipeline:
    variant: str
    config: PipelineConfig
    cameras: list
    scene: SceneConfig
    params: Parameters
    backbone_spec: net.ConvNetSpec
    fusion_spec: net.ConvNetSpec
    aux_spec: net.ConvNetSpec | None
    pool_steps: int  # backbone-output raster = camera.scaled(pool_steps)
    fields: dict  # cam_id -> ground->raster correspondence
    norm_maps: dict = field(default_factory=dict)  # late only
    pyramid_config: PyramidConfig | None = None
    distance_maps: dict = field(default_factory=dict)  # mvms: half-raster distances
    reduce_plans: dict = field(default_factory=dict)  # (cam_id, level) -> AreaReduce
    upsample_plans: dict = field(default_factory=dict)  # (cam_id, level) -> BilinearResize
    rot_config: RotationConfig | None = None
    rot_masks: dict = field(default_factory=dict)  # cam_id -> RotationMasks

    @property
    def cam_ids(self) -> list:
        return [c.cam_id for c in self.cameras]

    def scaled_camera(self, cam_id: str) -> CameraModel:
        cam = next(c for c in self.cameras if c.cam_id == cam_id)
        return cam.scaled(self.pool_steps)

    def scale_params(self) -> LearnableScaleParams:
        return LearnableScaleParams(
            b=float(self.params.tensors["scale/b"][0]), k=float(self.params.tensors["scale/k"][0])
        )


def build_pipeline(cameras: list, scene: SceneConfig, config: PipelineConfig) -> FusionPipeline:
    cameras = sorted(cameras, key=lambda c: c.cam_id)
    rng = np.random.Generator(np.random.Philox(key=np.array([config.seed, 41], dtype=np.uint64)))
    params = Parameters()
    factor = config.channel_factor

    if config.variant == "late":
        backbone = net.fcn7_spec("backbone", factor)
        pool_steps = 2
        view_channels = 1
        aux_spec = None
    else:
        backbone = net.extractor_spec("backbone", factor)
        pool_steps = 1
        view_channels = max(1, int(round(32 * factor)))
        aux_spec = net.aux_head_spec(view_channels, "aux", factor)

    fusion = net.fusion_spec(view_channels * len(cameras), "fusion", factor)
    net.glorot_init(backbone, params, rng)
    net.glorot_init(fusion, params, rng)
    if aux_spec is not None:
        net.glorot_init(aux_spec, params, rng)

    fields = {}
    for cam in cameras:
        fields[cam.cam_id] = build_correspondence(cam.scaled(pool_steps), scene, GROUND_TO_IMAGE)

    pipe = FusionPipeline(
        variant=config.variant,
        config=config,
        cameras=cameras,
        scene=scene,
        params=params,
        backbone_spec=backbone,
        fusion_spec=fusion,
        aux_spec=aux_spec,
        pool_steps=pool_steps,
        fields=fields,
    )

    if config.variant == "late":
        for cam in cameras:
            pipe.norm_maps[cam.cam_id] = normalization_map(cam.scaled(pool_steps), scene, config.sigma_view)

    if config.variant in ("mvms", "mvmsr"):
        ref_cam = cameras[0].scaled(pool_steps)
        dm0 = distance_map(ref_cam, scene)
        d_r = float(dm0.plane()[ref_cam.image_height // 2, ref_cam.image_width // 2])
        pipe.pyramid_config = PyramidConfig(
            n_scales=config.n_scales,
            zoom=config.zoom,
            ref_scale=config.n_scales // 2,
            ref_distance=d_r,
        )
        params.add("scale/b", np.array([float(pipe.pyramid_config.ref_scale)]))
        params.add("scale/k", np.array([-1.0]))
        for cam in cameras:
            half = cam.scaled(pool_steps)
            pipe.distance_maps[cam.cam_id] = distance_map(half, scene)
            h, w = cam.image_height, cam.image_width
            for lvl in range(1, config.n_scales):
                hi, wi = level_size(h, config.zoom, lvl), level_size(w, config.zoom, lvl)
                pipe.reduce_plans[(cam.cam_id, lvl)] = AreaReduce(h, w, hi, wi)
                fh, fw = (hi + 1) // 2, (wi + 1) // 2
                pipe.upsample_plans[(cam.cam_id, lvl)] = BilinearResize(fh, fw, half.image_height, half.image_width)

    if config.variant == "mvmsr":
        pipe.rot_config = RotationConfig(config.rot_k1, config.rot_k2, config.rot_q)
        for cam in cameras:
            ang = view_ray_angle_map(cam, scene)
            pipe.rot_masks[cam.cam_id] = quantize_angle_map(ang, config.rot_q, cam.cam_id)
        fan = view_channels * config.rot_k1 * config.rot_k2
        bound = np.sqrt(6.0 / (2 * fan))
        for i in range(config.rot_layers):
            params.add(
                f"rot/layer{i + 1}",
                rng.uniform(-bound, bound, size=(view_channels, view_channels, config.rot_k1, config.rot_k2)),
            )
    return pipe


def _forward_view_features(pipe: FusionPipeline, cam_id: str, frame: Map2D, cache: dict):
    """Backbone output for one view (and its cache entries)."""
    params = pipe.params
    if pipe.variant in ("late", "naive"):
        out, bcache = net.forward(pipe.backbone_spec, params, [frame])
        cache[("backbone", cam_id)] = bcache
        return out
    # mvms / mvmsr: pyramid features, upsampled and blended by soft masks
    pconf = pipe.pyramid_config
    levels = []
    ups = []
    for lvl in range(pconf.n_scales):
        if lvl == 0:
            img = frame
        else:
            reduced = pipe.reduce_plans[(cam_id, lvl)].forward(frame.values)
            img = Map2D(reduced, np.ones(reduced.shape[1:], bool), tag=frame.tag)
        feats, bcache = net.forward(pipe.backbone_spec, params, [img])
        cache[("backbone", cam_id, lvl)] = bcache
        if lvl == 0:
            up = feats
        else:
            up = Map2D(pipe.upsample_plans[(cam_id, lvl)].forward(feats.values), None, tag=frame.tag)
        levels.append(feats)
        ups.append(up)
    masks, mcache = learnable_scale_map(pipe.distance_maps[cam_id], pipe.scale_params(), pconf)
    merged = np.zeros_like(ups[0].values)
    for up, m in zip(ups, masks.soft):
        merged += up.values * m[None]
    cache[("scale", cam_id)] = (mcache, ups, masks)
    return Map2D(merged, pipe.distance_maps[cam_id].valid.copy(), tag=frame.tag)


def _backward_view_features(pipe: FusionPipeline, cam_id: str, grad: np.ndarray, cache: dict):
    params = pipe.params
    if pipe.variant in ("late", "naive"):
        net.backward(pipe.backbone_spec, params, cache[("backbone", cam_id)], grad)
        return
    mcache, ups, masks = cache[("scale", cam_id)]
    dups = [grad * m[None] for m in masks.soft]
    dmasks = np.stack([(grad * up.values).sum(axis=0) for up in ups])
    db, dk = scale_map_backward(mcache, dmasks)
    params.accumulate("scale/b", np.array([db]))
    params.accumulate("scale/k", np.array([dk]))
    for lvl in range(pipe.pyramid_config.n_scales):
        g = dups[lvl]
        if lvl > 0:
            g = pipe.upsample_plans[(cam_id, lvl)].adjoint(g)
        net.backward(pipe.backbone_spec, params, cache[("backbone", cam_id, lvl)], g)


def forward_full(pipe: FusionPipeline, frames: dict, with_aux: bool = False):
    """Run the pipeline; returns (scene map, aux view predictions, cache)."""
    missing = [cid for cid in pipe.cam_ids if cid not in frames]
    if missing:
        raise ValueError(f"missing frames for cameras {missing}")
    cache: dict = {"views": {}}
    fusion_inputs = []
    aux_preds = {}
    for cam_id in pipe.cam_ids:
        feats = _forward_view_features(pipe, cam_id, frames[cam_id], cache)
        fld = pipe.fields[cam_id]
        proj = sample(feats, fld)
        cache["views"][cam_id] = {"feat_shape": feats.values.shape}
        if pipe.variant == "late":
            nm: NormalizationMap = pipe.norm_maps[cam_id]
            w = nm.weights.values[0] * nm.weights.valid
            cache["views"][cam_id]["norm_w"] = w
            proj = Map2D(proj.values * w, proj.valid & nm.weights.valid, tag="ground")
            if with_aux:
                aux_preds[cam_id] = feats  # the view density itself
        elif pipe.variant == "mvmsr":
            x = proj
            rot_cache = []
            for i in range(pipe.config.rot_layers):
                kern = pipe.params.tensors[f"rot/layer{i + 1}"]
                y, rcache = rotation_select_layer(x, kern, pipe.rot_masks[cam_id], pipe.rot_config)
                mask = y.values > 0.0
                y = Map2D(np.maximum(y.values, 0.0), y.valid, tag=y.tag)
                rot_cache.append((rcache, mask))
                x = y
            cache["views"][cam_id]["rot"] = rot_cache
            proj = x
        if with_aux and pipe.aux_spec is not None:
            apred, acache = net.forward(pipe.aux_spec, pipe.params, [feats])
            cache["views"][cam_id]["aux"] = acache
            aux_preds[cam_id] = apred
        fusion_inputs.append(proj)
    scene_map, fcache = net.forward(pipe.fusion_spec, pipe.params, fusion_inputs)
    cache["fusion"] = fcache
    scene_map = Map2D(scene_map.values, np.ones(scene_map.values.shape[1:], bool), tag="ground")
    return scene_map, aux_preds, cache


def backward_full(pipe: FusionPipeline, cache: dict, d_scene: np.ndarray, d_aux: dict | None = None):
    """Accumulate gradients for a full forward pass."""
    d_projs = net.backward(pipe.fusion_spec, pipe.params, cache["fusion"], d_scene)
    for cam_id, dproj in zip(pipe.cam_ids, d_projs):
        vcache = cache["views"][cam_id]
        if pipe.variant == "mvmsr":
            g = dproj
            for layer_idx in range(len(vcache["rot"]), 0, -1):
                rcache, mask = vcache["rot"][layer_idx - 1]
                g = g * mask
                g, dk = rotation_select_backward(rcache, g)
                pipe.params.accumulate(f"rot/layer{layer_idx}", dk)
            dproj = g
        if pipe.variant == "late":
            dproj = dproj * vcache["norm_w"]
        fld = pipe.fields[cam_id]
        shape = vcache["feat_shape"]
        dfeat = sample_array_adjoint(dproj, fld, shape[1], shape[2])
        if d_aux and cam_id in d_aux:
            if pipe.aux_spec is not None:
                dfeat_aux = net.backward(pipe.aux_spec, pipe.params, vcache["aux"], d_aux[cam_id])[0]
                dfeat = dfeat + dfeat_aux
            else:
                dfeat = dfeat + d_aux[cam_id]
        _backward_view_features(pipe, cam_id, dfeat, cache)


def run(pipe: FusionPipeline, frames: dict) -> Map2D:
    """Inference: per-camera frames -> scene-level density map."""
    scene_map, _, _ = forward_full(pipe, frames, with_aux=False)
    return scene_map


def _train_step(pipe: FusionPipeline, dataset: SceneDataset, idx: int, with_aux: bool):
    frames = dataset.frames(idx)
    target = dataset.scene_gt(idx)
    scene_map, aux_preds, cache = forward_full(pipe, frames, with_aux=with_aux)
    loss, d_scene = net.squared_error(scene_map.values, target.values)
    d_aux = {}
    if with_aux:
        for cam in pipe.cameras:
            gt = dataset.view_gt(idx, cam, pipe.pool_steps, pipe.config.sigma_view)
            aux_loss, d = net.squared_error(aux_preds[cam.cam_id].values, gt.values)
            loss += aux_loss
            d_aux[cam.cam_id] = d
    backward_full(pipe, cache, d_scene, d_aux if with_aux else None)
    return loss


def train_two_stage(pipe: FusionPipeline, dataset: SceneDataset, schedule: TrainSchedule):
    """Two-stage training plus end-to-end fine-tuning; returns the loss trace."""
    order_rng = np.random.Generator(np.random.Philox(key=np.array([pipe.config.seed, 97], dtype=np.uint64)))
    train = list(dataset.train_indices)
    if not train:
        raise ValueError("dataset has no training frames")
    trace = {"stage1": [], "stage2": [], "finetune": []}
    epoch_order: list = []

    def frame_at(step):
        if step % len(train) == 0:
            epoch_order[:] = [train[i] for i in order_rng.permutation(len(train))]
        return epoch_order[step % len(train)]

    step_total = 0
    backbone_frozen = lambda name: not name.startswith("backbone/")
    for step in range(schedule.stage1_iters):
        loss = _train_step(pipe, dataset, frame_at(step_total), with_aux=True)
        _check_loss(loss, step_total)
        trace["stage1"].append(loss)
        net.sgd_step(pipe.params, schedule.lr_stage1)
        step_total += 1
    for step in range(schedule.stage2_iters):
        frac = step / max(1, schedule.stage2_iters - 1)
        lr = schedule.lr_stage2_start + frac * (schedule.lr_stage2_end - schedule.lr_stage2_start)
        loss = _train_step(pipe, dataset, frame_at(step_total), with_aux=False)
        _check_loss(loss, step_total)
        trace["stage2"].append(loss)
        net.sgd_step(pipe.params, lr, trainable=backbone_frozen)
        step_total += 1
    for step in range(schedule.finetune_iters):
        loss = _train_step(pipe, dataset, frame_at(step_total), with_aux=False)
        _check_loss(loss, step_total)
        trace["finetune"].append(loss)
        net.sgd_step(pipe.params, schedule.lr_finetune)
        step_total += 1
    return trace


def _check_loss(loss: float, step: int):
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at training step {step}")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def evaluate(pipe: FusionPipeline, dataset: SceneDataset, indices=None) -> dict:
    """Scene and per-camera-region MAE/NAE over the given frames."""
    if indices is None:
        indices = dataset.test_indices
    if not indices:
        raise ValueError("no frames to evaluate")
    scene_pred, scene_true = [], []
    region_pred = {c.cam_id: [] for c in pipe.cameras}
    region_true = {c.cam_id: [] for c in pipe.cameras}
    for idx in indices:
        pred = run(pipe, dataset.frames(idx))
        gt = dataset.scene_gt(idx)
        scene_pred.append(pred.total())
        scene_true.append(gt.total())
        for cam in pipe.cameras:
            region_pred[cam.cam_id].append(camera_region_count(pred, cam, pipe.scene))
            region_true[cam.cam_id].append(camera_region_count(gt, cam, pipe.scene))
    report = {"variant": pipe.variant, "n_frames": len(indices)}
    report["scene"] = mae_nae(scene_pred, scene_true)
    for cam in pipe.cameras:
        report[f"cam{cam.cam_id}"] = mae_nae(region_pred[cam.cam_id], region_true[cam.cam_id])
    return report


def format_report(report: dict) -> str:
    """Tab-separated table plus a machine-readable key-value block."""
    regions = [k for k in report if k == "scene" or k.startswith("cam")]
    lines = [f"variant\t{report['variant']}", f"n_frames\t{report['n_frames']}"]
    for r in regions:
        mae, nae = report[r]
        lines.append(f"{r}_mae\t{_fmt(mae)}")
        lines.append(f"{r}_nae\t{_fmt(nae)}")
    lines.append("")
    header = ["region"] + ["Scene" if r == "scene" else r.replace("cam", "C") for r in regions]
    lines.append("\t".join(header))
    lines.append("\t".join(["MAE"] + [_fmt(report[r][0]) for r in regions]))
    lines.append("\t".join(["NAE"] + [_fmt(report[r][1]) for r in regions]))
    lines.append("")
    return "\n".join(lines)


def train_dmap_baseline(dataset: SceneDataset, config: PipelineConfig, iters: int, lr: float) -> Parameters:
    """Train the per-view density backbone used by the weighted-count baseline."""
    rng = np.random.Generator(np.random.Philox(key=np.array([config.seed, 53], dtype=np.uint64)))
    spec = net.fcn7_spec("backbone", config.channel_factor)
    params = Parameters()
    net.glorot_init(spec, params, rng)
    order_rng = np.random.Generator(np.random.Philox(key=np.array([config.seed, 59], dtype=np.uint64)))
    train = list(dataset.train_indices)
    if not train:
        raise ValueError("dataset has no training frames")
    order = []
    for step in range(iters):
        if step % len(train) == 0:
            order = [train[i] for i in order_rng.permutation(len(train))]
        idx = order[step % len(train)]
        frames = dataset.frames(idx)
        loss = 0.0
        for cam in dataset.cameras:
            pred, cache = net.forward(spec, params, [frames[cam.cam_id]])
            gt = dataset.view_gt(idx, cam, 2, config.sigma_view)
            l, d = net.squared_error(pred.values, gt.values)
            loss += l
            net.backward(spec, params, cache, d)
        _check_loss(loss, step)
        net.sgd_step(params, lr)
    return params


def evaluate_dmap_baseline(params: Parameters, dataset: SceneDataset, config: PipelineConfig, indices=None) -> dict:
    """Scene MAE/NAE of the visibility-weighted per-view count baseline."""
    if indices is None:
        indices = dataset.test_indices
    spec = net.fcn7_spec("backbone", config.channel_factor)
    scaled = [c.scaled(2) for c in dataset.cameras]
    weights = view_weight_maps(scaled, dataset.scene)
    preds, truths = [], []
    for idx in indices:
        frames = dataset.frames(idx)
        dens = []
        for cam in dataset.cameras:
            out, _ = net.forward(spec, params, [frames[cam.cam_id]])
            dens.append(out)
        preds.append(dmap_weighted_count(dens, weights))
        truths.append(dataset.scene_gt(idx).total())
    mae, nae = mae_nae(preds, truths)
    return {"variant": "dmap_weighted", "n_frames": len(indices), "scene": (mae, nae)}


def save_pipeline(pipe: FusionPipeline, params_path, config_path=None) -> None:
    pipe.params.save(params_path)
    if config_path is not None:
        fileio.save_pipeline_config(config_path, pipe.config.to_dict())


def load_pipeline(cameras: list, scene: SceneConfig, config: PipelineConfig, params_path) -> FusionPipeline:
    pipe = build_pipeline(cameras, scene, config)
    loaded = Parameters.load(params_path)
    missing = set(pipe.params.tensors) ^ set(loaded.tensors)
    if missing:
        raise ValueError(f"checkpoint does not match the pipeline: {sorted(missing)}")
    pipe.params = loaded
    return pipe
