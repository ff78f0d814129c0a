"""Segmentation head, multi-view prediction fusion, and training losses.

Per query view, the head turns [features; broadcast prototype; prior mask]
into 2-way logits. A scene-similarity adjustment factor gates suppression
of base-class activations, and the two views' predictions are fused by
learnable 1x1 convs (foreground and background separately) into the final
prediction. Losses are the weighted sum of per-view and fused BCE terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from . import invariance as inv
from .episodes import Episode, downsample_mask
from .invariance import Backbone, FusionParams
from .tensor import Tensor

ALPHA = 0.5
BETA = 0.5


def _coerce_map(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _conv_params(cout: int, cin: int, k: int, rng) -> tuple:
    std = np.sqrt(2.0 / (cin * k * k))
    w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True)
    return w, b


@dataclass
class SegHead:
    """Three-conv head: 3x3 (2C+1 -> C), 3x3 (C -> C), 1x1 (C -> 2) logits.

    Shared between the two query views.
    """

    conv1: tuple
    conv2: tuple
    conv3: tuple

    @staticmethod
    def init(channels: int, seed: int) -> "SegHead":
        rng = np.random.default_rng(seed)
        conv1 = _conv_params(channels, 2 * channels + 1, 3, rng)
        # Nudge the first conv toward the support-guidance channel: with a
        # purely random init the head sometimes settles into classifying
        # the training classes from query features alone, which transfers
        # terribly to novel classes. A strong initial center-tap weight on
        # the prior channel (the last input channel) starts optimization in
        # the support-driven basin.
        conv1[0].data[:, -1, 1, 1] += 1.0
        return SegHead(
            conv1=conv1,
            conv2=_conv_params(channels, channels, 3, rng),
            conv3=_conv_params(2, channels, 1, rng),
        )

    def params(self) -> dict:
        out = {}
        for i, (w, b) in enumerate((self.conv1, self.conv2, self.conv3)):
            out[f"seg.head.conv{i + 1}.w"] = w
            out[f"seg.head.conv{i + 1}.b"] = b
        return out


@dataclass
class AdjustParams:
    a1: Tensor
    a2: Tensor

    @staticmethod
    def init() -> "AdjustParams":
        return AdjustParams(Tensor(0.5, requires_grad=True),
                            Tensor(0.5, requires_grad=True))


RISP_GAIN = 3.0


@dataclass
class RispParams:
    """Independent 1x1 fusion kernels for foreground and background channels.

    Each kernel holds two learnable entries (original-view weight,
    reflected-view weight); `risp_fuse` applies their softmax times a fixed
    gain, so the applied weights are always a convex combination.
    """

    fuse_fg: Tensor
    fuse_bg: Tensor

    @staticmethod
    def init() -> "RispParams":
        def kernel():
            return Tensor(np.zeros((1, 2, 1, 1)), requires_grad=True)

        return RispParams(fuse_fg=kernel(), fuse_bg=kernel())


@dataclass
class BaseLearner:
    """Per-pixel linear classifier over backbone features.

    Output channels: background + the base classes, in a fixed id order.
    Trained only in the base phase; frozen afterwards.
    """

    conv: tuple
    base_class_ids: tuple
    frozen: bool = False

    @staticmethod
    def init(channels: int, base_class_ids, seed: int) -> "BaseLearner":
        rng = np.random.default_rng(seed)
        return BaseLearner(conv=_conv_params(len(base_class_ids) + 1, channels, 1, rng),
                           base_class_ids=tuple(base_class_ids))

    def logits(self, features: Tensor) -> Tensor:
        return tt.conv1x1(features, *self.conv)

    def fg_max(self, features: Tensor) -> Tensor:
        """Per-pixel max probability over the base (non-background) classes."""
        probs = tt.softmax_channels(self.logits(features))
        return tt.channel_max(probs, start=1)

    def label_map(self, mask_feat: np.ndarray, class_id: int) -> np.ndarray:
        idx = self.base_class_ids.index(class_id) + 1
        return np.where(mask_feat > 0, idx, 0).astype(np.int64)

    def params(self) -> dict:
        return {"base.w": self.conv[0], "base.b": self.conv[1]}


@dataclass
class Prediction:
    """Channel-softmaxed probabilities: channel 0 background, 1 foreground."""

    probs: Tensor
    frame: str  # "original" or "reflected"


def seg_forward(f_q_view: Tensor, prototype: Tensor, prior: Tensor,
                head: SegHead) -> Tensor:
    """2-way logits for one query view."""
    _, h, w = f_q_view.shape
    x = tt.concat_channels([
        f_q_view,
        tt.broadcast_vector(prototype, h, w),
        tt.reshape(prior, (1, h, w)),
    ])
    x = tt.relu(tt.conv2d(x, *head.conv1))
    x = tt.relu(tt.conv2d(x, *head.conv2))
    return tt.conv1x1(x, *head.conv3)


def adjustment_factor(f_q_view: Tensor, f_s: Tensor, m_s) -> Tensor:
    """Scene-similarity scalar in [0, 1] between a query view and a support view."""
    _, h, w = f_q_view.shape
    gap = tt.masked_avg_pool(f_q_view, np.ones((h, w)))
    proto = tt.masked_avg_pool(f_s, m_s)
    return (tt.cosine(gap, proto) + 1.0) * 0.5


def fuse_adjustment(theta_o: Tensor, theta_h: Tensor, params: AdjustParams) -> Tensor:
    return params.a1 * theta_o + params.a2 * theta_h


def apply_base_suppression(pred: Prediction, base_fg_max: Tensor | None,
                           theta_f: Tensor | None) -> Prediction:
    """Scale foreground down where the base learner claims a base object.

    fg' = fg * (1 - theta_f * base_fg_max), bg' = 1 - fg'. With the base
    learner disabled (None inputs), this is the identity.
    """
    if base_fg_max is None or theta_f is None:
        return pred
    fg = tt.channel(pred.probs, 1)
    fg2 = fg * (1.0 - theta_f * _coerce_map(base_fg_max))
    bg2 = 1.0 - fg2
    return Prediction(probs=tt.stack_maps([bg2, fg2]), frame=pred.frame)


def _view_weights(kernel: Tensor) -> tuple:
    """Softmax of the two kernel entries: convex (original, reflected) weights."""
    signs = Tensor(np.array([1.0, -1.0]))
    s = tt.sigmoid(tt.sum_all(tt.reshape(kernel, (2,)) * signs))
    return s, 1.0 - s


def risp_fuse(r_o: Prediction, r_f: Prediction, params: RispParams) -> Prediction:
    """Fuse original and reflected predictions into one original-frame map.

    The reflected prediction is flipped back first; foreground and
    background probability channels are fused by separate learnable 1x1
    kernels, then softmaxed. Each kernel's two entries pass through a
    softmax and a fixed gain before use, so every fused logit is a scaled
    convex combination of its two views and the fused argmax stays a
    weighted-mean-probability vote at threshold 0.5. Unconstrained kernels
    instead let the pixelwise cross-entropy drag the global decision
    threshold toward its accuracy-optimal point, which for
    minority-foreground masks sits well above the overlap-friendly one:
    trained models kept strong per-view predictions while the fused output
    lost most of its overlap score.
    """
    if r_o.frame != "original" or r_f.frame != "reflected":
        raise ValueError(f"bad frames: {r_o.frame!r}, {r_f.frame!r}")
    fg_f = tt.flip_h(tt.channel(r_f.probs, 1))
    bg_f = tt.flip_h(tt.channel(r_f.probs, 0))
    wf_o, wf_r = _view_weights(params.fuse_fg)
    wb_o, wb_r = _view_weights(params.fuse_bg)
    fused_fg = (wf_o * tt.channel(r_o.probs, 1) + wf_r * fg_f) * RISP_GAIN
    fused_bg = (wb_o * tt.channel(r_o.probs, 0) + wb_r * bg_f) * RISP_GAIN
    probs = tt.softmax2(tt.stack_maps([fused_bg, fused_fg]))
    return Prediction(probs=probs, frame="original")


def loss_final(r_ff: Prediction, r_o: Prediction, r_f: Prediction | None,
               m_gt: np.ndarray, alpha: float = ALPHA, beta: float = BETA) -> Tensor:
    """BCE(fused) + alpha BCE(original) + beta BCE(reflected vs flipped GT)."""
    loss = tt.bce(r_ff.probs, m_gt) + alpha * tt.bce(r_o.probs, m_gt)
    if r_f is not None:
        loss = loss + beta * tt.bce(r_f.probs, m_gt[:, ::-1].copy())
    return loss


def loss_all(final: Tensor, meta: Tensor) -> Tensor:
    return final + meta


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class ModelFlags:
    sri: bool = True
    qri: bool = True
    base_learner: bool = False
    share_prior_conv: bool = False


@dataclass
class ForwardResult:
    final: Prediction
    r_o: Prediction
    r_f: Prediction | None
    pre_o: Prediction
    pre_f: Prediction | None
    prior_o: Tensor
    prior_f: Tensor | None
    loss_all: Tensor
    loss_final: Tensor
    loss_meta: Tensor
    raw_priors: dict = field(default_factory=dict)

    def predicted_mask(self, stride: int) -> np.ndarray:
        """Binary mask at image resolution (nearest-neighbor upsampling)."""
        fg = (self.final.probs.data[1] > self.final.probs.data[0]).astype(np.uint8)
        return np.repeat(np.repeat(fg, stride, axis=0), stride, axis=1)


def _mean_tensors(ts: list) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = acc + t
    return acc * (1.0 / len(ts))


@dataclass
class Model:
    backbone: Backbone
    fusion: FusionParams
    head: SegHead
    adjust: AdjustParams
    risp: RispParams
    base: BaseLearner | None
    flags: ModelFlags

    @staticmethod
    def init(flags: ModelFlags, base_class_ids=(), seed: int = 0,
             backbone_channels=(16, 32), backbone: Backbone | None = None) -> "Model":
        bb = backbone if backbone is not None else Backbone.default(
            seed=seed, channels=backbone_channels)
        c = bb.out_channels
        base = None
        if flags.base_learner:
            base = BaseLearner.init(c, base_class_ids, seed=seed + 3)
        return Model(
            backbone=bb,
            fusion=FusionParams.init(share_prior_conv=flags.share_prior_conv),
            head=SegHead.init(c, seed=seed + 1),
            adjust=AdjustParams.init(),
            risp=RispParams.init(),
            base=base,
            flags=flags,
        )

    def params(self) -> dict:
        """All parameters under their stable checkpoint names."""
        out = dict(self.backbone.params())
        out["proto.p1"] = self.fusion.p1
        out["proto.p2"] = self.fusion.p2
        out["prior_fuse.orig.w"], out["prior_fuse.orig.b"] = self.fusion.prior_orig
        out["prior_fuse.refl.w"], out["prior_fuse.refl.b"] = self.fusion.prior_refl
        out.update(self.head.params())
        out["adjust.a1"] = self.adjust.a1
        out["adjust.a2"] = self.adjust.a2
        out["risp.fg.w"] = self.risp.fuse_fg
        out["risp.bg.w"] = self.risp.fuse_bg
        if self.base is not None:
            out.update(self.base.params())
        return out

    def trainable_params(self) -> dict:
        """Meta-phase learnables: everything except the frozen backbone and
        (after the base phase) the frozen base learner. Aliased tensors
        (shared prior-fusion conv) appear once."""
        out = {}
        seen = set()
        for name, t in self.params().items():
            if name.startswith("backbone.") and self.backbone.frozen:
                continue
            if name.startswith("base.") and self.base is not None and self.base.frozen:
                continue
            if not t.requires_grad or id(t) in seen:
                continue
            seen.add(id(t))
            out[name] = t
        return out

    def forward(self, episode: Episode, flip_augment_rng=None) -> ForwardResult:
        """Run the full pipeline on one episode and compute all losses.

        `flip_augment_rng`, if given, flips each sample (image and mask)
        with probability 0.5 before anything else; this is the plain
        data-augmentation baseline, not the multi-view architecture.
        """
        flags = self.flags
        stride = self.backbone.total_stride

        def maybe_flip(image, mask):
            if flip_augment_rng is not None and flip_augment_rng.random() < 0.5:
                return image[:, :, ::-1].copy(), mask[:, ::-1].copy()
            return image, mask

        sup_views = []
        for s in episode.supports:
            img, msk = maybe_flip(s.image, s.mask)
            sup_views.append(inv.extract_views(Tensor(img), msk, self.backbone))

        q_img, q_mask = maybe_flip(episode.query.image, episode.query.mask)
        f_q = self.backbone.forward(Tensor(q_img))
        m_gt = downsample_mask(q_mask, stride)

        # prototype: per-view average over the K supports, then weighted fusion
        p_o = _mean_tensors([tt.masked_avg_pool(f, m) for f, _, m, _ in sup_views])
        if flags.sri:
            p_f = _mean_tensors([tt.masked_avg_pool(fh, mh) for _, fh, _, mh in sup_views])
            proto = self.fusion.p1 * p_o + self.fusion.p2 * p_f
        else:
            proto = p_o

        raw_priors = {}

        def view_prior(f_view, tag, conv):
            m_o_p = _mean_tensors([inv.prior_values(f_view, f, m)
                                   for f, _, m, _ in sup_views])
            raw_priors[f"{tag}.orig"] = m_o_p
            if not flags.qri:
                return tt.minmax_norm(m_o_p)
            m_f_p = _mean_tensors([inv.prior_values(f_view, fh, mh)
                                   for _, fh, _, mh in sup_views])
            raw_priors[f"{tag}.refl"] = m_f_p
            return inv.fuse_priors(m_o_p, m_f_p, conv)

        def view_theta(f_view):
            th_o = _mean_tensors([adjustment_factor(f_view, f, m)
                                  for f, _, m, _ in sup_views])
            if not flags.sri:
                return th_o
            th_h = _mean_tensors([adjustment_factor(f_view, fh, mh)
                                  for _, fh, _, mh in sup_views])
            return fuse_adjustment(th_o, th_h, self.adjust)

        def view_predict(f_view, prior, frame):
            logits = seg_forward(f_view, proto, prior, self.head)
            pre = Prediction(probs=tt.softmax2(logits), frame=frame)
            if flags.base_learner and self.base is not None:
                post = apply_base_suppression(pre, self.base.fg_max(f_view),
                                              view_theta(f_view))
            else:
                post = pre
            return pre, post

        prior_o = view_prior(f_q, "view_o", self.fusion.prior_orig)
        pre_o, r_o = view_predict(f_q, prior_o, "original")

        if flags.qri:
            f_q_h = self.backbone.forward(tt.flip_h(Tensor(q_img)))
            prior_f = view_prior(f_q_h, "view_f", self.fusion.prior_refl)
            pre_f, r_f = view_predict(f_q_h, prior_f, "reflected")
            final = risp_fuse(r_o, r_f, self.risp)
            meta = 0.5 * (tt.bce(pre_o.probs, m_gt)
                          + tt.bce(pre_f.probs, m_gt[:, ::-1].copy()))
        else:
            prior_f, pre_f, r_f = None, None, None
            final = r_o
            meta = tt.bce(pre_o.probs, m_gt)

        l_final = loss_final(final, r_o, r_f, m_gt)
        return ForwardResult(
            final=final, r_o=r_o, r_f=r_f, pre_o=pre_o, pre_f=pre_f,
            prior_o=prior_o, prior_f=prior_f,
            loss_all=loss_all(l_final, meta), loss_final=l_final, loss_meta=meta,
            raw_priors=raw_priors,
        )
