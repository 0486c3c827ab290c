"""
Routed fusion detector: condition encoder, three-branch backbone, router and anchor head
composed into one parameter tree, plus the per-batch training objective.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor
from modules.backbone import BranchOutputs, MultiBranchBackbone, input_layer, run_backbone
from modules.condition_encoder import ConditionEncoder, ConditionOutput
from modules.config import RunConfig
from modules.detection_head import AnchorGrid, DetectionHead, Targets, assign_targets, decode_and_nms, head_forward
from modules.evaluation import Detection
from modules.geometry import Box3D
from modules.losses import (
    LossBreakdown,
    aux_weather_loss,
    detection_loss,
    diversity_loss,
    entropy_loss,
    total_loss,
)
from modules.nn import Mlp, Module, Parameter
from modules.router import BranchRouter, RoutingWeights, aggregate, route, routing_entropy
from modules.voxel_grid import SparseVoxelTensor, voxelize

# parameter groups split these top-level modules one level deeper
GROUPED_TWICE = ("encoder", "backbone")


@dataclass
class PreparedScene:
    """A scene voxelised for the model, with its anchor targets cached"""
    scene_id: Hashable
    lidar: SparseVoxelTensor
    radar: SparseVoxelTensor
    image: np.ndarray
    prompt: np.ndarray
    weather: int
    gts: List[Box3D] = field(default_factory=list)
    targets: Optional[Targets] = None


@dataclass
class ForwardOutput:
    logits: Tensor
    reg: Tensor
    weights: RoutingWeights
    condition: ConditionOutput
    branches: BranchOutputs


def model_rng(seed: int) -> np.random.Generator:
    """Initialisation generator; a child of the run seed distinct from data and batch order"""
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


class RoutedFusionDetector(Module):
    def __init__(self, config: RunConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else model_rng(config.seed)
        m = config.model
        self.config = config
        self.roi = config.grid.roi()
        self.anchors = AnchorGrid.build(self.roi, m.anchor_size, m.anchor_rotations)

        self.encoder = ConditionEncoder(m.token_dim, m.visual_channels, m.visual_stride, m.channels[0], rng,
                                        use_sensor_refine=config.ablation.use_sensor_refine)
        self.backbone = MultiBranchBackbone(m.channels, m.bev_channels, m.token_dim, self.roi.grid_shape, rng,
                                            knn_base=m.knn_base, scaled_attention=m.scaled_attention,
                                            use_condition_gate=config.ablation.use_condition_gate)
        self.router = BranchRouter(m.token_dim, rng, std=m.router_std)
        self.head = DetectionHead(2 * self.backbone.bev_width, len(m.anchor_rotations), rng,
                                  std=m.head_std, prior=m.head_prior, zero_init=m.head_zero_init)
        self.aux_head = Mlp(m.token_dim, m.token_dim, 7, rng)

    def prepare(self, scene, scene_id: Hashable = None, with_targets: bool = True) -> PreparedScene:
        """Voxelise a SceneSample and assign anchor targets"""
        gts = scene.gt_boxes()
        targets = None
        if with_targets:
            targets = assign_targets(self.anchors, gts, self.config.loss.pos_iou, self.config.loss.neg_iou)
        return PreparedScene(
            scene_id=scene_id,
            lidar=voxelize(scene.lidar, self.roi),
            radar=voxelize(scene.radar, self.roi),
            image=np.asarray(scene.image, dtype=np.float64),
            prompt=np.asarray(scene.prompt, dtype=np.float64),
            weather=int(scene.weather),
            gts=gts,
            targets=targets,
        )

    def condition(self, scene: PreparedScene, vocab_matrix: Tensor):
        lidar0 = input_layer(scene.lidar, self.backbone.lidar_input)
        radar0 = input_layer(scene.radar, self.backbone.radar_input)
        return self.encoder(scene.image, scene.prompt, vocab_matrix, lidar0, radar0), lidar0, radar0

    def forward(self, scene: PreparedScene, vocab_matrix: Tensor) -> ForwardOutput:
        cond, lidar0, radar0 = self.condition(scene, vocab_matrix)
        branches = run_backbone(lidar0, radar0, cond.token, self.backbone)
        forced = self.config.ablation.forced_branch()
        if forced is not None:
            weights = RoutingWeights.fixed(forced)
        else:
            weights = route(cond.token, self.router, self.config.loss.epsilon)
        bev = aggregate(weights, branches.bev_lidar, branches.bev_radar, branches.bev_fusion)
        logits, reg = head_forward(bev, self.head)
        return ForwardOutput(logits, reg, weights, cond, branches)

    def predict(self, scene: PreparedScene, vocab_matrix: Tensor) -> Tuple[List[Detection], np.ndarray]:
        """Detections after decode + NMS and the routing weights; no tape is recorded"""
        ev = self.config.eval
        with ad.no_grad():
            out = self.forward(scene, vocab_matrix)
        dets = decode_and_nms(out.logits.data, out.reg.data, self.anchors, ev.conf_thresh, ev.nms_iou)
        return dets, out.weights.as_array()


def parameter_groups(model: Module) -> "OrderedDict[str, List[Tuple[str, Parameter]]]":
    """Named parameters grouped by top-level module (two levels for encoder and backbone)"""
    groups: "OrderedDict[str, List[Tuple[str, Parameter]]]" = OrderedDict()
    for name, param in model.named_parameters():
        parts = name.split(".")
        depth = 2 if parts[0] in GROUPED_TWICE and len(parts) > 2 else 1
        groups.setdefault(".".join(parts[:depth]), []).append((name, param))
    return groups


def batch_objective(model: RoutedFusionDetector, batch: Sequence[PreparedScene], vocab_matrix: Tensor,
                    config: Optional[RunConfig] = None) -> Tuple[Tensor, LossBreakdown, List[RoutingWeights]]:
    """
    Total loss over a micro-batch: L_det and L_aux averaged over scenes, L_div and L_ent
    over the batch's routing weights.
    """
    config = config or model.config
    lc = config.loss
    if not batch:
        raise ValueError("batch_objective: empty batch")
    det_terms, aux_terms, weights = [], [], []
    for scene in batch:
        targets = scene.targets if scene.targets is not None else \
            assign_targets(model.anchors, scene.gts, lc.pos_iou, lc.neg_iou)
        out = model(scene, vocab_matrix)
        det, _ = detection_loss(out.logits, out.reg, targets, lc.focal_alpha, lc.focal_gamma, lc.smooth_l1_beta)
        det_terms.append(ad.reshape(det, (1,)))
        aux_terms.append(ad.reshape(aux_weather_loss(out.condition.token, model.aux_head, scene.weather, lc.rho), (1,)))
        weights.append(out.weights)

    scale = 1.0 / len(batch)
    l_det = ad.mul(ad.reduce_sum(ad.concat(det_terms, axis=0)), scale)
    l_aux = ad.mul(ad.reduce_sum(ad.concat(aux_terms, axis=0)), scale)
    intra, inter, l_div = diversity_loss(weights, [s.weather for s in batch], lc.margin)
    h_bar, l_ent = entropy_loss(weights, lc.tau)
    total = total_loss(l_det, l_aux, l_div, l_ent, config.effective_lambdas())
    breakdown = LossBreakdown(l_det, l_aux, intra, inter, l_ent, h_bar, total)
    return total, breakdown, weights


def aux_objective(model: RoutedFusionDetector, batch: Sequence[PreparedScene], vocab_matrix: Tensor) -> Tensor:
    """Mean class-weighted weather loss alone, used for visual pretraining"""
    terms = []
    for scene in batch:
        cond, _, _ = model.condition(scene, vocab_matrix)
        terms.append(ad.reshape(aux_weather_loss(cond.token, model.aux_head, scene.weather, model.config.loss.rho), (1,)))
    return ad.mul(ad.reduce_sum(ad.concat(terms, axis=0)), 1.0 / len(terms))


def routing_rows(scene_ids: Sequence[Hashable], weathers: Sequence[str],
                 weights: Sequence[np.ndarray]) -> List[Dict[str, object]]:
    """Rows of the routing report"""
    rows = []
    for scene_id, weather, w in zip(scene_ids, weathers, weights):
        rows.append({"sample_id": scene_id, "weather": weather, "w_L": float(w[0]), "w_R": float(w[1]),
                     "w_F": float(w[2]), "entropy": float(routing_entropy(w))})
    return rows
