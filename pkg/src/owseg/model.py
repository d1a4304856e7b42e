"""Toy-scale query-based instance segmentation network.

A strided convolutional encoder feeds a multi-scale fusion neck. ``N`` query
boxes and features are then refined by ``L`` decoder stages; every stage pools
RoI features for its boxes, lets each query interact with its own RoI through
query-generated (dynamic) weights, and predicts refined boxes, masks inside
those boxes, and the objectness scores required by the variant.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .evaluation import Prediction
from .losses import ObjectnessVariant, ccwh_to_xyxy, xyxy_to_ccwh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 100
    num_stages: int = 6
    query_init: str = "image"
    variant: str = "box"
    mask_resolution: int = 28
    feature_dim: int = 64
    neck_levels: int = 4
    use_neck: bool = True
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    num_heads: int = 4
    dynamic_dim: int = 16
    pool_size: int = 7
    init_seed: int = 0
    use_dcn: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        ObjectnessVariant(self.variant)
        if self.num_queries < 1 or self.num_stages < 1:
            raise ValueError("num_queries and num_stages must be >= 1")
        if self.mask_resolution < 4:
            raise ValueError("mask_resolution must be >= 4")
        if self.query_init not in ("image", "random"):
            raise ValueError(f"unknown query_init {self.query_init!r}")
        if len(self.encoder_channels) != self.neck_levels:
            raise ValueError("encoder_channels needs one entry per neck level")
        if self.feature_dim % self.num_heads:
            raise ValueError("feature_dim must be divisible by num_heads")
        if self.use_dcn:
            raise NotImplementedError("deformable convolution is not implemented")

    @property
    def stride(self) -> int:
        """Coarsest encoder stride; image sides must be multiples of it."""
        return 2 ** (self.neck_levels + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d)


CROSS_CATEGORY_PRESET = {"num_queries": 150, "query_init": "random"}


def config_diff(a: ModelConfig, b: ModelConfig) -> dict[str, tuple]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def normalize_fusion_weights(w: Tensor, eps: float = 1e-4) -> Tensor:
    """Non-negative weights that sum to one (uniform if all are zero)."""
    w = F.relu(w)
    s = w.sum()
    return torch.where(s > eps, w / s.clamp(min=eps), torch.full_like(w, 1.0 / w.numel()))


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
                         nn.GroupNorm(math.gcd(8, cout), cout), nn.ReLU(inplace=True))


class ConvEncoder(nn.Module):
    """Plain strided convolutions; level ``i`` has stride ``4 * 2**i``."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c0 = channels[0]
        self.stem = nn.Sequential(conv_block(3, c0 // 2, 2), conv_block(c0 // 2, c0, 2))
        self.stages = nn.ModuleList(
            nn.Sequential(conv_block(cin, cout, 2), conv_block(cout, cout))
            for cin, cout in zip(channels[:-1], channels[1:]))

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        feats = [x]
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FusionNeck(nn.Module):
    """Weighted bidirectional (top-down then bottom-up) feature fusion.

    With ``bidirectional=False`` it degrades to a plain top-down lateral FPN,
    which is the neck-off arm of the ablation.
    """

    def __init__(self, in_channels: Sequence[int], dim: int, bidirectional: bool = True):
        super().__init__()
        self.bidirectional = bidirectional
        n = len(in_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_channels)
        self.td_convs = nn.ModuleList(conv_block(dim, dim) for _ in range(n - 1))
        if bidirectional:
            self.td_weights = nn.ParameterList(nn.Parameter(torch.ones(2)) for _ in range(n - 1))
            self.bu_weights = nn.ParameterList(
                nn.Parameter(torch.ones(3 if i < n - 1 else 2)) for i in range(1, n))
            self.bu_convs = nn.ModuleList(conv_block(dim, dim) for _ in range(n - 1))

    def fusion_weights(self) -> list[Tensor]:
        if not self.bidirectional:
            return []
        return [normalize_fusion_weights(w) for w in [*self.td_weights, *self.bu_weights]]

    def forward(self, feats: Sequence[Tensor]) -> list[Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        n = len(lat)
        if n == 1:
            return lat
        td = [None] * n
        td[-1] = lat[-1]
        for i in range(n - 2, -1, -1):
            up = F.interpolate(td[i + 1], size=lat[i].shape[-2:], mode="nearest")
            if self.bidirectional:
                w = normalize_fusion_weights(self.td_weights[i])
                td[i] = self.td_convs[i](w[0] * lat[i] + w[1] * up)
            else:
                td[i] = self.td_convs[i](lat[i] + up)
        if not self.bidirectional:
            return td
        out = [td[0]]
        for i in range(1, n):
            down = F.max_pool2d(out[-1], 2)
            w = normalize_fusion_weights(self.bu_weights[i - 1])
            if i < n - 1:
                fused = w[0] * lat[i] + w[1] * td[i] + w[2] * down
            else:
                fused = w[0] * lat[i] + w[1] * down
            out.append(self.bu_convs[i - 1](fused))
        return out


class DynamicInteraction(nn.Module):
    """Two query-conditioned 1x1 layers applied to the query's own RoI feature."""

    def __init__(self, dim: int, dyn_dim: int):
        super().__init__()
        self.dim, self.dyn_dim = dim, dyn_dim
        self.params = nn.Linear(dim, 2 * dim * dyn_dim)
        self.norm1 = nn.LayerNorm(dyn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, query: Tensor, roi: Tensor) -> Tensor:
        # query [Q, D], roi [Q, S, D] -> [Q, S, D]
        p = self.params(query)
        w1 = p[:, : self.dim * self.dyn_dim].view(-1, self.dim, self.dyn_dim)
        w2 = p[:, self.dim * self.dyn_dim:].view(-1, self.dyn_dim, self.dim)
        x = F.relu(self.norm1(torch.bmm(roi, w1)))
        return F.relu(self.norm2(torch.bmm(x, w2)))


@dataclass
class StageOutput:
    boxes: Tensor  # [B, N, 4] normalized ccwh
    mask_logits: Tensor  # [B, N, m, m], inside the predicted box
    scores: dict[str, Tensor] | None  # head name -> [B, N] in [0, 1]

    @property
    def masks(self) -> Tensor:
        return self.mask_logits.sigmoid()


def apply_box_deltas(boxes: Tensor, deltas: Tensor, min_size: float = 1e-3) -> Tensor:
    """Refine ``ccwh`` boxes by ``(dx, dy, dw, dh)`` deltas and clip to the image."""
    cx, cy, w, h = boxes.unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    dw = dw.clamp(max=math.log(1000.0 / 16))
    dh = dh.clamp(max=math.log(1000.0 / 16))
    new = torch.stack([cx + 0.5 * dx * w, cy + 0.5 * dy * h, w * dw.exp(), h * dh.exp()], -1)
    xyxy = ccwh_to_xyxy(new).clamp(0, 1)
    x1, y1, x2, y2 = xyxy.unbind(-1)
    x2 = torch.maximum(x2, x1 + min_size)
    y2 = torch.maximum(y2, y1 + min_size)
    return xyxy_to_ccwh(torch.stack([x1, y1, x2, y2], -1))


def roi_pool(feat: Tensor, boxes: Tensor, size: int) -> Tensor:
    """Bilinear RoI pooling at bin centres of normalized ``ccwh`` boxes.

    ``feat`` is ``[B, C, H, W]`` and ``boxes`` ``[B, N, 4]``; returns
    ``[B * N, size * size, C]``. Built on ``grid_sample`` because its CPU
    backward is much cheaper than ``roi_align``'s.
    """
    b, n, _ = boxes.shape
    c = feat.shape[1]
    x1, y1, x2, y2 = ccwh_to_xyxy(boxes).unbind(-1)
    t = (torch.arange(size, dtype=boxes.dtype, device=boxes.device) + 0.5) / size
    gx = x1[..., None] + (x2 - x1)[..., None] * t  # [B, N, S]
    gy = y1[..., None] + (y2 - y1)[..., None] * t
    grid = torch.stack([gx[:, :, None, :].expand(b, n, size, size),
                        gy[:, :, :, None].expand(b, n, size, size)], -1) * 2 - 1
    out = F.grid_sample(feat, grid.reshape(b, n * size, size, 2), mode="bilinear",
                        padding_mode="zeros", align_corners=False)
    return out.view(b, c, n, size * size).permute(0, 2, 3, 1).reshape(b * n, size * size, c)


class DecoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.feature_dim
        self.pool_size = cfg.pool_size
        self.mask_resolution = cfg.mask_resolution
        self.mask_pool = max(2, (cfg.mask_resolution + 1) // 2)
        self.attn = nn.MultiheadAttention(d, cfg.num_heads, batch_first=True)
        self.norm_attn = nn.LayerNorm(d)
        self.interact = DynamicInteraction(d, cfg.dynamic_dim)
        self.interact_out = nn.Sequential(nn.Linear(d * cfg.pool_size ** 2, d), nn.LayerNorm(d),
                                          nn.ReLU(inplace=True))
        self.norm_inter = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(inplace=True), nn.Linear(2 * d, d))
        self.norm_ffn = nn.LayerNorm(d)
        self.box_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, 4))
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)
        self.mask_interact = DynamicInteraction(d, cfg.dynamic_dim)
        self.mask_convs = conv_block(d, d // 2)
        self.mask_logits = nn.Conv2d(d // 2, 1, 1)
        self.score_heads = nn.ModuleDict({
            name: nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, 1))
            for name in ObjectnessVariant(cfg.variant).heads})

    def forward(self, feat: Tensor, boxes: Tensor, query: Tensor) -> tuple[StageOutput, Tensor]:
        b, n, d = query.shape
        query = self.norm_attn(query + self.attn(query, query, query, need_weights=False)[0])

        roi = roi_pool(feat, boxes, self.pool_size)  # [BN, S, D]
        q = query.reshape(b * n, d)
        inter = self.interact_out(self.interact(q, roi).flatten(1))
        q = self.norm_inter(q + inter)
        q = self.norm_ffn(q + self.ffn(q))

        new_boxes = apply_box_deltas(boxes, self.box_head(q).view(b, n, 4))

        s = self.mask_pool
        mroi = roi_pool(feat, new_boxes.detach(), s)
        m = self.mask_interact(q, mroi).transpose(1, 2).reshape(b * n, d, s, s)
        m = self.mask_convs(m)
        m = F.interpolate(m, size=(self.mask_resolution,) * 2, mode="bilinear",
                          align_corners=False)
        mask_logits = self.mask_logits(m).view(b, n, self.mask_resolution, self.mask_resolution)

        scores = None
        if len(self.score_heads):
            scores = {k: head(q).view(b, n).sigmoid() for k, head in self.score_heads.items()}
        return StageOutput(new_boxes, mask_logits, scores), q.view(b, n, d)


class QueryModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.init_seed)
            self.encoder = ConvEncoder(cfg.encoder_channels)
            self.neck = FusionNeck(cfg.encoder_channels, cfg.feature_dim, cfg.use_neck)
            self.query_features = nn.Embedding(cfg.num_queries, cfg.feature_dim)
            self.stages = nn.ModuleList(DecoderStage(cfg) for _ in range(cfg.num_stages))
        self.register_buffer("query_boxes", init_query_boxes(cfg))
        self.register_buffer("pixel_mean", torch.tensor([0.45, 0.45, 0.45]).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1))

    def check_image_size(self, h: int, w: int) -> None:
        s = self.cfg.stride
        if h % s or w % s:
            ph, pw = (-h) % s, (-w) % s
            raise ValueError(f"image size {h}x{w} is not divisible by stride {s}; "
                             f"pad by {ph} rows and {pw} columns")

    def forward(self, images: Tensor) -> list[StageOutput]:
        """``images`` is ``[B, 3, H, W]`` in [0, 1]; returns one output per stage."""
        b, _, h, w = images.shape
        self.check_image_size(h, w)
        x = (images - self.pixel_mean) / self.pixel_std
        feats = self.neck(self.encoder(x))
        feat = feats[0]
        boxes = self.query_boxes.unsqueeze(0).expand(b, -1, -1)
        query = self.query_features.weight.unsqueeze(0).expand(b, -1, -1)
        outputs = []
        for stage in self.stages:
            out, query = stage(feat, boxes, query)
            outputs.append(out)
            boxes = out.boxes.detach()
        return outputs


def init_query_boxes(cfg: ModelConfig) -> Tensor:
    """Initial normalized ``ccwh`` query boxes.

    ``image`` puts every query on the full image; ``random`` draws boxes
    uniformly from a generator seeded by ``cfg.init_seed``.
    """
    n = cfg.num_queries
    if cfg.query_init == "image":
        return torch.tensor([[0.5, 0.5, 1.0, 1.0]]).repeat(n, 1)
    rng = np.random.default_rng(cfg.init_seed)
    xs = np.sort(rng.uniform(0, 1, size=(n, 2)), axis=1)
    ys = np.sort(rng.uniform(0, 1, size=(n, 2)), axis=1)
    xyxy = np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)
    return xyxy_to_ccwh(torch.tensor(xyxy, dtype=torch.float32))


def image_to_tensor(image) -> Tensor:
    """uint8 ``[H, W, 3]`` (or a batch of them) to float ``[B, 3, H, W]``."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float() / 255.0


def ranking_scores(out: StageOutput, variant: ObjectnessVariant | str) -> Tensor | None:
    """Per-query ranking score ``[B, N]``, or None for the void variant."""
    variant = ObjectnessVariant(variant)
    if out.scores is None:
        return None
    if variant is ObjectnessVariant.CLS:
        return out.scores["cls"]
    if variant is ObjectnessVariant.BOX:
        return out.scores["box_iou"]
    if variant is ObjectnessVariant.MASK:
        return out.scores["mask_iou"]
    return (out.scores["box_iou"] * out.scores["mask_iou"]).clamp(min=0).sqrt()


def paste_masks(mask_probs: Tensor, boxes_xyxy: Tensor, h: int, w: int,
                threshold: float = 0.5) -> Tensor:
    """Paste ``[N, m, m]`` in-box mask probabilities onto an ``h x w`` canvas."""
    n = mask_probs.shape[0]
    if n == 0:
        return torch.zeros((0, h, w), dtype=torch.bool)
    xs = torch.arange(w, dtype=torch.float32) + 0.5
    ys = torch.arange(h, dtype=torch.float32) + 0.5
    x1, y1, x2, y2 = [t[:, None] for t in boxes_xyxy.float().unbind(-1)]
    u = (xs[None] - x1) / (x2 - x1).clamp(min=1e-6) * 2 - 1  # [N, W]
    v = (ys[None] - y1) / (y2 - y1).clamp(min=1e-6) * 2 - 1  # [N, H]
    grid = torch.stack([u[:, None, :].expand(n, h, w), v[:, :, None].expand(n, h, w)], -1)
    sampled = F.grid_sample(mask_probs[:, None].float(), grid, mode="bilinear",
                            padding_mode="border", align_corners=False)[:, 0]
    inside = (u.abs() <= 1)[:, None, :] & (v.abs() <= 1)[:, :, None]
    return (sampled >= threshold) & inside


@torch.no_grad()
def predict(model: QueryModel, images, k: int | None = None) -> list[list[Prediction]]:
    """Top-``k`` final-stage instances per image, in rank order.

    Ranking uses the variant's objectness score; the void variant has none and
    falls back to query-index order.
    """
    k = model.cfg.num_queries if k is None else k
    if k < 1:
        raise ValueError("budget k must be >= 1")
    x = images if isinstance(images, Tensor) else image_to_tensor(images)
    was_training = model.training
    model.eval()
    try:
        out = model(x)[-1]
    finally:
        model.train(was_training)
    b, n = out.boxes.shape[:2]
    _, _, h, w = x.shape
    scores = ranking_scores(out, model.cfg.variant)
    if scores is None and k < n:
        warnings.warn("void variant has no objectness score; truncating by query index",
                      stacklevel=2)
    xyxy = ccwh_to_xyxy(out.boxes) * out.boxes.new_tensor([w, h, w, h])
    results = []
    for i in range(b):
        if scores is None:
            order = torch.arange(n)
        else:
            order = torch.sort(-scores[i], stable=True).indices
        order = order[: min(k, n)]
        masks = paste_masks(out.masks[i, order], xyxy[i, order], h, w)
        preds = []
        for j, q in enumerate(order.tolist()):
            preds.append(Prediction(xyxy[i, q].double().numpy(), masks[j].numpy(),
                                    None if scores is None else float(scores[i, q])))
        results.append(preds)
    return results


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"OWSEGCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: QueryModel, path: str | Path, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, then raw little-endian tensors."""
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(),
                         "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[QueryModel, dict]:
    """Rebuild a model from a checkpoint, rejecting config mismatches with a field diff."""
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None:
        diff = config_diff(cfg, expected)
        if diff:
            lines = ", ".join(f"{k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in diff.items())
            raise ValueError(f"checkpoint config mismatch ({lines})")
    model = QueryModel(cfg)
    model.load_state_dict(tensors)
    return model, header
