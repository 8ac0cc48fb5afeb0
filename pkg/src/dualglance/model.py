"""The two-glance relationship classifier and its masked baseline variants.

First glance: two person patches through a weight-shared CNN, the union
patch through its own CNN, standardized box-geometry features through an fc
layer; everything concatenated and pushed through two fc layers (ReLU
between) giving the class score S1 and the top-down vector v_top.

Second glance: ROI-pooled contextual regions are gated by a sigmoid
attention weight driven by the region feature plus w_top (*) v_top, scored
per region, and pooled over the bag (max / avg / lse). Final score
S = S1 + alpha * S2, softmaxed into a distribution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import (
    Box,
    apply_normalizer,
    geometry_feature,
    nms_indices,
    select_context_indices,
    union_box,
)
from .vision import (
    BackboneParams,
    BackboneSpec,
    ImagePlane,
    backbone_forward,
    conv_features,
    crop_resize,
    init_backbone,
    roi_pool_rows,
)

__all__ = [
    "AGGREGATION_MODES",
    "VARIANTS",
    "UnsupportedVariantError",
    "ModelConfig",
    "Affine",
    "FirstGlanceParams",
    "SecondGlanceParams",
    "DualGlanceParams",
    "ScoreBundle",
    "init_params",
    "named_parameters",
    "pair_inputs",
    "context_inputs",
    "first_glance_batch",
    "second_glance_batch",
    "first_glance",
    "attention_weights",
    "region_scores",
    "aggregate",
    "fuse",
    "predict_proba",
    "select_bag",
    "dual_glance_forward",
    "predict_pair_symmetric",
    "baseline_forward",
    "write_attention_dump",
    "read_attention_dump",
    "end_to_end_check",
]

AGGREGATION_MODES = ("max", "avg", "lse")

# feature blocks concatenated into the first glance, per variant
VARIANTS = {
    "union-cnn": ("union",),
    "bbox": ("bbox",),
    "pair-cnn": ("pair",),
    "pair-cnn+bbox": ("pair", "bbox"),
    "pair-cnn+bbox+union": ("pair", "bbox", "union"),
    "pair-cnn+bbox+global": ("pair", "bbox", "global"),
    "rcnn": (),
    "dual-glance": ("pair", "bbox", "union"),
}

_SECOND_GLANCE_VARIANTS = ("dual-glance", "rcnn")


class UnsupportedVariantError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    alpha: float = 1.0
    k: int = 128
    tau_u: float = 0.7
    m: int = 30
    aggregation: str = "lse"
    attention: bool = True
    patch_size: int = 32
    pair_swap_averaging: bool = False
    variant: str = "dual-glance"
    nms_threshold: float = 0.3
    bbox_hidden: int = 32
    roi_grid: int = 2
    context_size: int = 32
    pair_channels: tuple[int, ...] = (8, 16, 32)
    union_channels: tuple[int, ...] = (8, 16, 32)
    context_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    pool: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_classes not in (3, 6):
            raise ValueError(f"num_classes must be 3 or 6, got {self.num_classes}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.tau_u <= 1.0:
            raise ValueError(f"tau_u must be in (0,1], got {self.tau_u}")
        if self.m < 0:
            raise ValueError(f"m must be >= 0, got {self.m}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}")
        if self.variant == "pair-cnn+bbox+scene":
            raise UnsupportedVariantError(
                "pair-cnn+bbox+scene is unsupported without external scene-pretrained weights")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; known: {sorted(VARIANTS)}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        for name, channels, size in [("pair", self.pair_channels, self.patch_size),
                                     ("union", self.union_channels, self.patch_size),
                                     ("context", self.context_channels, self.context_size)]:
            stride = self.pool ** len(channels)
            if size % stride:
                raise ValueError(f"{name} backbone stride {stride} does not divide input size {size}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def blocks(self) -> tuple[str, ...]:
        return VARIANTS[self.variant]

    @property
    def has_second_glance(self) -> bool:
        return self.variant in _SECOND_GLANCE_VARIANTS

    def effective(self) -> "ModelConfig":
        """Config actually executed: rcnn forces uniform attention and
        average pooling with no first-glance fusion."""
        if self.variant == "rcnn":
            return replace(self, attention=False, aggregation="avg")
        return self

    def config_hash(self) -> str:
        blob = json.dumps({k: list(v) if isinstance(v, tuple) else v
                           for k, v in sorted(self.__dict__.items())}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Affine:
    w: Tensor
    b: Tensor

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return dc.affine(x, self.w, self.b)


def _init_affine(rng, n_in, n_out, dtype) -> Affine:
    bound = np.sqrt(6.0 / (n_in + n_out))
    w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    return Affine(w, b)


@dataclass
class FirstGlanceParams:
    pair_cnn: BackboneParams | None
    union_cnn: BackboneParams | None
    bbox_fc: Affine | None
    fc1: Affine  # concat -> k (v_top is its ReLU output)
    fc2: Affine  # k -> num_classes

    def named(self):
        out = {}
        if self.pair_cnn:
            out.update(self.pair_cnn.named("first.pair_cnn"))
        if self.union_cnn:
            out.update(self.union_cnn.named("first.union_cnn"))
        if self.bbox_fc:
            out.update(self.bbox_fc.named("first.bbox_fc"))
        out.update(self.fc1.named("first.fc1"))
        out.update(self.fc2.named("first.fc2"))
        return out


@dataclass
class SecondGlanceParams:
    ctx_cnn: BackboneParams
    roi_fc: Affine  # pooled -> k
    w_top: Tensor  # (k,) gate on the top-down signal
    att: Affine  # k -> 1
    score: Affine  # k -> num_classes

    def named(self):
        out = self.ctx_cnn.named("second.ctx_cnn")
        out.update(self.roi_fc.named("second.roi_fc"))
        out["second.w_top"] = self.w_top
        out.update(self.att.named("second.att"))
        out.update(self.score.named("second.score"))
        return out


@dataclass
class DualGlanceParams:
    first: FirstGlanceParams | None
    second: SecondGlanceParams | None

    def named(self):
        out = {}
        if self.first:
            out.update(self.first.named())
        if self.second:
            out.update(self.second.named())
        return out


def named_parameters(params: DualGlanceParams) -> dict[str, Tensor]:
    return params.named()


def _concat_width(config: ModelConfig) -> int:
    pair_spec = BackboneSpec(config.pair_channels, 3, config.kernel, config.pool)
    union_spec = BackboneSpec(config.union_channels, 3, config.kernel, config.pool)
    width = 0
    for block in config.blocks:
        if block == "pair":
            width += 2 * pair_spec.feature_len(config.patch_size)
        elif block in ("union", "global"):
            width += union_spec.feature_len(config.patch_size)
        elif block == "bbox":
            width += config.bbox_hidden
    return width


def init_params(config: ModelConfig, rng) -> DualGlanceParams:
    dtype = config.np_dtype
    first = None
    if config.blocks:
        pair = union = bbox = None
        if "pair" in config.blocks:
            pair = init_backbone(BackboneSpec(config.pair_channels, 3, config.kernel, config.pool), rng, dtype)
        if "union" in config.blocks or "global" in config.blocks:
            union = init_backbone(BackboneSpec(config.union_channels, 3, config.kernel, config.pool), rng, dtype)
        if "bbox" in config.blocks:
            bbox = _init_affine(rng, 10, config.bbox_hidden, dtype)
        fc1 = _init_affine(rng, _concat_width(config), config.k, dtype)
        fc2 = _init_affine(rng, config.k, config.num_classes, dtype)
        first = FirstGlanceParams(pair, union, bbox, fc1, fc2)
    second = None
    if config.has_second_glance:
        ctx_spec = BackboneSpec(config.context_channels, 3, config.kernel, config.pool)
        pooled = ctx_spec.channels[-1] * config.roi_grid ** 2
        second = SecondGlanceParams(
            ctx_cnn=init_backbone(ctx_spec, rng, dtype),
            roi_fc=_init_affine(rng, pooled, config.k, dtype),
            w_top=Tensor(rng.uniform(-0.1, 0.1, size=config.k).astype(dtype), requires_grad=True),
            att=_init_affine(rng, config.k, 1, dtype),
            score=_init_affine(rng, config.k, config.num_classes, dtype),
        )
    return DualGlanceParams(first=first, second=second)


# ---------------------------------------------------------------------------
# input preparation (numpy; no gradients flow into pixels)


def pair_inputs(images, pairs, normalizer, config: ModelConfig) -> dict:
    """Patch and geometry arrays for a batch of (image, (b1, b2)) samples."""
    dtype = config.np_dtype
    s = config.patch_size
    blocks = config.blocks
    n = len(images)
    out = {}
    if "pair" in blocks:
        p1 = np.empty((n, 3, s, s), dtype=dtype)
        p2 = np.empty((n, 3, s, s), dtype=dtype)
        for i, (img, (b1, b2)) in enumerate(zip(images, pairs)):
            p1[i] = crop_resize(img, b1, s).chw()
            p2[i] = crop_resize(img, b2, s).chw()
        out["p1"], out["p2"] = p1, p2
    if "union" in blocks:
        pu = np.empty((n, 3, s, s), dtype=dtype)
        for i, (img, (b1, b2)) in enumerate(zip(images, pairs)):
            pu[i] = crop_resize(img, union_box(b1, b2), s).chw()
        out["pu"] = pu
    if "global" in blocks:
        pg = np.empty((n, 3, s, s), dtype=dtype)
        for i, img in enumerate(images):
            pg[i] = crop_resize(img, Box(0, 0, img.width, img.height), s).chw()
        out["pg"] = pg
    if "bbox" in blocks:
        bb = np.empty((n, 10), dtype=dtype)
        for i, (img, (b1, b2)) in enumerate(zip(images, pairs)):
            f1 = apply_normalizer(normalizer, geometry_feature(b1, img.width, img.height))
            f2 = apply_normalizer(normalizer, geometry_feature(b2, img.width, img.height))
            bb[i] = np.concatenate([f1, f2])
        out["bb"] = bb
    return out


def context_inputs(images, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Whole images resized for the context CNN, plus per-sample scale
    factors mapping original pixel coords onto the resized plane."""
    cs = config.context_size
    n = len(images)
    arr = np.empty((n, 3, cs, cs), dtype=config.np_dtype)
    scales = np.empty(n)
    for i, img in enumerate(images):
        if img.width == cs and img.height == cs:
            arr[i] = img.chw()
            scales[i] = 1.0
        else:
            if img.width != img.height:
                raise ValueError(
                    f"context resize of non-square {img.width}x{img.height} image is ambiguous; "
                    "pre-letterbox the input")
            arr[i] = crop_resize(img, Box(0, 0, img.width, img.height), cs).chw()
            scales[i] = cs / img.width
    return arr, scales


# ---------------------------------------------------------------------------
# forward passes (batched; single-sample wrappers below)


def first_glance_batch(inputs: dict, params: FirstGlanceParams, config: ModelConfig):
    """Returns (S1 (n, C), v_top (n, k)) tensors."""
    feats = []
    for block in config.blocks:
        if block == "pair":
            # both patches through the shared branch in one batch
            n = inputs["p1"].shape[0]
            both = backbone_forward(dc.tensor(np.concatenate([inputs["p1"], inputs["p2"]])),
                                    params.pair_cnn)
            feats += [dc.slice_rows(both, 0, n), dc.slice_rows(both, n, 2 * n)]
        elif block == "union":
            feats.append(backbone_forward(dc.tensor(inputs["pu"]), params.union_cnn))
        elif block == "global":
            feats.append(backbone_forward(dc.tensor(inputs["pg"]), params.union_cnn))
        elif block == "bbox":
            feats.append(params.bbox_fc(dc.tensor(inputs["bb"])))
    x = feats[0] if len(feats) == 1 else dc.concat(feats, axis=1)
    v_top = dc.relu(params.fc1(x))
    s1 = params.fc2(v_top)
    return s1, v_top


def second_glance_batch(ctx_images: np.ndarray, scales, bags, v_top, params: SecondGlanceParams,
                        config: ModelConfig):
    """Attentive region scoring over per-sample bags.

    bags: list (len n) of Box lists in original image coordinates.
    v_top: (n, k) Tensor on-tape, or ndarray for a frozen first glance, or
    None when attention is off.
    Returns (S2 (n, C) Tensor, per-sample attention arrays).
    """
    cfg = config.effective()
    fm = conv_features(dc.tensor(ctx_images), params.ctx_cnn)
    n = len(bags)
    dtype = ctx_images.dtype
    if isinstance(v_top, np.ndarray):
        v_top = dc.tensor(v_top.astype(dtype))
    s2_rows = []
    attentions = []
    bag_scores = []
    for i in range(n):
        boxes = bags[i]
        if not boxes:
            s2_rows.append(dc.zeros(cfg.num_classes, dtype=dtype))
            attentions.append(np.zeros(0))
            bag_scores.append(np.zeros((0, cfg.num_classes)))
            continue
        pooled = roi_pool_rows(fm, i, boxes, cfg.roi_grid, scale=scales[i])
        v = params.roi_fc(pooled)  # (R, k)
        if cfg.attention:
            gate = dc.mul(dc.take_row(v_top, i), params.w_top)
            h = dc.add(v, gate)
            a = dc.sigmoid(params.att(h))  # (R, 1)
            v_att = dc.scale_rows(v, a)
            attentions.append(a.values[:, 0].astype(np.float64).copy())
        else:
            v_att = v
            attentions.append(np.ones(len(boxes)))
        s = params.score(v_att)  # (R, C)
        bag_scores.append(s.values.astype(np.float64).copy())
        s2_rows.append(dc.reduce_bag(s, cfg.aggregation))
    return dc.stack(s2_rows), attentions, bag_scores


def fuse(s1: Tensor, s2: Tensor, alpha: float) -> Tensor:
    """Final score S = S1 + alpha * S2."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return dc.add(s1, dc.scale(s2, alpha))


def predict_proba(scores) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    v = scores.values if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def select_bag(proposals, b1: Box, b2: Box, config: ModelConfig):
    """NMS then contextual selection; returns (boxes, original indices)."""
    kept = nms_indices(proposals, config.nms_threshold)
    surv = [proposals[i] for i in kept]
    sel = select_context_indices(surv, b1, b2, config.tau_u, config.m)
    ids = [kept[j] for j in sel]
    return [proposals[i].box for i in ids], ids


# ---------------------------------------------------------------------------
# single-sample contracts


def first_glance(image: ImagePlane, b1: Box, b2: Box, params: FirstGlanceParams,
                 normalizer, config: ModelConfig):
    """(S1, v_top) numpy vectors for one pair."""
    inputs = pair_inputs([image], [(b1, b2)], normalizer, config)
    s1, v_top = first_glance_batch(inputs, params, config)
    return s1.values[0].copy(), v_top.values[0].copy()


def attention_weights(bag, v_top, params: SecondGlanceParams) -> np.ndarray:
    """Per-region gate a_i = sigmoid(W_ha (v_i + w_top (*) v_top) + b_a)."""
    v = np.asarray([x.values if isinstance(x, Tensor) else x for x in bag], dtype=np.float64)
    top = v_top.values if isinstance(v_top, Tensor) else np.asarray(v_top, dtype=np.float64)
    if v.ndim != 2 or top.shape != (v.shape[1],):
        raise dc.ShapeError(f"attention_weights: bag {v.shape} vs v_top {top.shape}")
    h = dc.add(dc.tensor(v), dc.mul(dc.tensor(top), Tensor(params.w_top.values.astype(np.float64))))
    att = Affine(Tensor(params.att.w.values.astype(np.float64)),
                 Tensor(params.att.b.values.astype(np.float64)))
    return dc.sigmoid(att(h)).values[:, 0]


def region_scores(bag, attentions, params: SecondGlanceParams) -> np.ndarray:
    """Per-region class scores s_i = W_s (a_i v_i) + b_s."""
    v = np.asarray([x.values if isinstance(x, Tensor) else x for x in bag], dtype=np.float64)
    a = np.asarray(attentions, dtype=np.float64)
    if v.ndim != 2 or a.shape != (v.shape[0],):
        raise dc.ShapeError(f"region_scores: bag {v.shape} vs attentions {a.shape}")
    return (a[:, None] * v) @ params.score.w.values.astype(np.float64) + params.score.b.values


def aggregate(scores, mode: str) -> np.ndarray:
    """Bag pooling of (R, C) scores into (C,); an empty bag gives zeros so
    the fused score falls back to the first glance alone."""
    arr = np.asarray(scores.values if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if arr.ndim != 2:
        raise dc.ShapeError(f"aggregate: need (R, C) scores, got {arr.shape}")
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"aggregate: unknown mode {mode!r}")
    if arr.shape[0] == 0:
        return np.zeros(arr.shape[1])
    return dc.reduce_bag(dc.tensor(arr), mode).values


@dataclass
class ScoreBundle:
    """Everything one forward pass produced, for inspection and dumps."""

    s1: np.ndarray
    s2: np.ndarray
    s: np.ndarray
    p: np.ndarray
    attention: np.ndarray
    region_boxes: list
    region_ids: list
    region_scores: np.ndarray

    def __post_init__(self):
        if abs(self.p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")
        if len(self.attention) != len(self.region_boxes):
            raise ValueError("attention length must match the bag size")
        if self.attention.size and (self.attention.min() < 0 or self.attention.max() > 1):
            raise ValueError("attention weights must lie in [0,1]")


def dual_glance_forward(image: ImagePlane, b1: Box, b2: Box, proposals,
                        params: DualGlanceParams, config: ModelConfig,
                        normalizer=None) -> ScoreBundle:
    """Full pipeline for one sample, inference mode."""
    cfg = config.effective()
    boxes, ids = select_bag(proposals, b1, b2, cfg)
    if cfg.blocks:
        inputs = pair_inputs([image], [(b1, b2)], normalizer, cfg)
        s1_t, v_top = first_glance_batch(inputs, params.first, cfg)
        s1 = s1_t.values[0]
    else:
        s1 = np.zeros(cfg.num_classes, dtype=cfg.np_dtype)
        v_top = dc.zeros((1, cfg.k), dtype=cfg.np_dtype)
    if cfg.has_second_glance:
        ctx, scales = context_inputs([image], cfg)
        s2_t, atts, bag_scores = second_glance_batch(ctx, scales, [boxes], v_top, params.second, cfg)
        s2 = s2_t.values[0]
        att = atts[0]
        rscores = bag_scores[0]
    else:
        s2 = np.zeros_like(s1)
        att = np.zeros(0)
        boxes, ids = [], []
        rscores = np.zeros((0, cfg.num_classes))
    if cfg.variant == "rcnn":
        s = s2.astype(np.float64)
    else:
        s = s1.astype(np.float64) + cfg.alpha * s2.astype(np.float64)
    return ScoreBundle(s1=s1.astype(np.float64), s2=s2.astype(np.float64), s=s,
                       p=predict_proba(s), attention=att, region_boxes=boxes,
                       region_ids=ids, region_scores=rscores)


def predict_pair_symmetric(image, b1, b2, proposals, params, config, normalizer=None):
    """Average the fused scores of both pair orderings, then softmax."""
    if not config.pair_swap_averaging:
        raise ValueError("predict_pair_symmetric requires pair_swap_averaging enabled")
    fwd = dual_glance_forward(image, b1, b2, proposals, params, config, normalizer)
    rev = dual_glance_forward(image, b2, b1, proposals, params, config, normalizer)
    return predict_proba((fwd.s + rev.s) / 2.0)


def baseline_forward(image, b1, b2, proposals, variant: str, params: DualGlanceParams,
                     config: ModelConfig, normalizer=None) -> np.ndarray:
    """Score vector S for any published variant, as a masked configuration."""
    if variant == "pair-cnn+bbox+scene":
        raise UnsupportedVariantError(
            "pair-cnn+bbox+scene is unsupported without external scene-pretrained weights")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg = replace(config, variant=variant)
    return dual_glance_forward(image, b1, b2, proposals, params, cfg, normalizer).s


# ---------------------------------------------------------------------------
# attention dump (line-delimited JSON)


def write_attention_dump(path, records) -> None:
    """records: iterable of (sample_id, ScoreBundle)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for sample_id, b in records:
            row = {
                "sample": sample_id,
                "regions": [[bx.xmin, bx.ymin, bx.xmax, bx.ymax] for bx in b.region_boxes],
                "region_ids": list(b.region_ids),
                "attention": [round(float(a), 6) for a in b.attention],
                "region_scores": np.round(b.region_scores, 6).tolist(),
                "s1": np.round(b.s1, 6).tolist(),
                "s2": np.round(b.s2, 6).tolist(),
                "s": np.round(b.s, 6).tolist(),
                "p": np.round(b.p, 6).tolist(),
            }
            fh.write(json.dumps(row) + "\n")


def read_attention_dump(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# end-to-end gradient verification on a toy configuration


def _toy_setup(seed=0):
    # boxes are integer-aligned at exactly patch_size so crop_resize samples
    # each source pixel once; duplicated samples would tie pool windows and
    # put kinks under the finite-difference probes
    rng = np.random.default_rng(seed)
    config = ModelConfig(num_classes=3, k=8, patch_size=8, context_size=16,
                         pair_channels=(2,), union_channels=(2,), context_channels=(2,),
                         bbox_hidden=4, m=4, dtype="float64")
    params = init_params(config, rng)
    images = [ImagePlane(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)) for _ in range(2)]
    pairs = [(Box(0, 0, 8, 8), Box(8, 8, 16, 16)), (Box(1, 2, 9, 10), Box(7, 3, 15, 12))]
    bags = [[Box(0, 9, 6, 16), Box(10, 0, 16, 6)], [Box(5, 11, 13, 16)]]
    labels = np.array([0, 2])
    feats = [geometry_feature(b, 16, 16) for pr in pairs for b in pr]
    from .geometry import fit_normalizer

    normalizer = fit_normalizer(feats)
    return config, params, images, pairs, bags, labels, normalizer


def _toy_loss(config, params, images, pairs, bags, labels, normalizer):
    inputs = pair_inputs(images, pairs, normalizer, config)
    s1, v_top = first_glance_batch(inputs, params.first, config)
    ctx, scales = context_inputs(images, config)
    s2, _, _ = second_glance_batch(ctx, scales, bags, v_top, params.second, config)
    return dc.softmax_cross_entropy(fuse(s1, s2, config.alpha), labels)


def end_to_end_check(epsilon: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of the fused two-glance loss on a tiny double
    precision config, per parameter tensor. Gradients flow through both
    glances, including the top-down attention path a frozen run would cut."""
    setup = _toy_setup(seed)
    config, params = setup[0], setup[1]
    named = params.named()

    with dc.Tape() as tape:
        loss = _toy_loss(*setup)
    tape.backward(loss)

    results = {}
    for name, t in named.items():
        analytic = t.grad.copy()
        numeric = np.zeros_like(analytic)
        flat_v = t.values.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_v.size):
            keep = flat_v[i]
            flat_v[i] = keep + epsilon
            up = _toy_loss(*setup).item()
            flat_v[i] = keep - epsilon
            down = _toy_loss(*setup).item()
            flat_v[i] = keep
            flat_n[i] = (up - down) / (2.0 * epsilon)
        denom = np.maximum(1.0, np.abs(analytic))
        results[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return results
