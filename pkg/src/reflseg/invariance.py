"""Support branch and reflection-invariance prior mask generation.

The support branch pools original and horizontally flipped support features
into per-view prototypes and fuses them with two learnable scalars. The
prior branch scores every query pixel by its best cosine match against
foreground support pixels from both views, normalizes the two maps, and
fuses them through a learnable 1x1 conv followed by a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .episodes import downsample_mask
from .tensor import EmptyMaskError, Tensor


@dataclass
class Backbone:
    """Small frozen conv stack standing in for a pretrained feature extractor.

    Default: two 3x3 stride-2 convs (3 -> c1 -> c2) with relu, so a 64x64
    image maps to a c2 x 16 x 16 feature map. The pixelwise variant (1x1,
    stride 1) is used by tests that need exact flip equivariance.
    """

    layers: list  # (weight Tensor, bias Tensor, stride)
    frozen: bool = True

    @staticmethod
    def _init_layers(channel_spec, kernel: int, stride: int, seed: int,
                     asymmetry: float = 1.0):
        rng = np.random.default_rng(seed)
        layers = []
        cin = 3
        for cout in channel_spec:
            std = np.sqrt(2.0 / (cin * kernel * kernel))
            w = rng.normal(0.0, std, size=(cout, cin, kernel, kernel))
            if asymmetry != 1.0:
                # Blend toward left-right symmetric kernels so the frozen
                # features respond similarly to a scene and its mirror image,
                # the way a trained feature extractor does. Stride still
                # misaligns the two views by a pixel, so they stay distinct.
                sym = 0.5 * (w + w[..., ::-1])
                w = sym + asymmetry * (w - sym)
            b = Tensor(np.zeros(cout))
            layers.append((Tensor(w), b, stride))
            cin = cout
        return layers

    @classmethod
    def default(cls, seed: int = 0, channels=(16, 32)) -> "Backbone":
        return cls(layers=cls._init_layers(channels, kernel=3, stride=2, seed=seed,
                                           asymmetry=0.3))

    @classmethod
    def pixelwise(cls, seed: int = 0, channels=(16, 32)) -> "Backbone":
        return cls(layers=cls._init_layers(channels, kernel=1, stride=1, seed=seed))

    @property
    def out_channels(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def total_stride(self) -> int:
        s = 1
        for _, _, stride in self.layers:
            s *= stride
        return s

    def forward(self, image: Tensor) -> Tensor:
        x = image
        for w, b, stride in self.layers:
            x = tt.relu(tt.conv2d(x, w, b, stride=stride))
        return x

    def params(self) -> dict:
        out = {}
        for i, (w, b, _) in enumerate(self.layers):
            out[f"backbone.conv{i + 1}.w"] = w
            out[f"backbone.conv{i + 1}.b"] = b
        return out


def _conv1x1_params(in_ch: int, init_w, init_b: float = 0.0) -> tuple:
    w = Tensor(np.asarray(init_w, dtype=np.float64).reshape(1, in_ch, 1, 1),
               requires_grad=True)
    b = Tensor(np.full(1, float(init_b)), requires_grad=True)
    return w, b


@dataclass
class FusionParams:
    """Learnable prototype weights and the per-view prior fusion convs."""

    p1: Tensor
    p2: Tensor
    prior_orig: tuple  # (weight, bias) of a 2 -> 1 conv for the original view
    prior_refl: tuple  # same for the reflected view (may alias prior_orig)

    @staticmethod
    def init(share_prior_conv: bool = False) -> "FusionParams":
        # Equal view weights; the bias recenters the sigmoid so that the
        # fused prior keeps most of the [0, 1] contrast of its inputs
        # instead of collapsing to a narrow band around 0.62 at init.
        orig = _conv1x1_params(2, [2.0, 2.0], init_b=-2.0)
        refl = orig if share_prior_conv else _conv1x1_params(2, [2.0, 2.0], init_b=-2.0)
        return FusionParams(
            p1=Tensor(0.5, requires_grad=True),
            p2=Tensor(0.5, requires_grad=True),
            prior_orig=orig,
            prior_refl=refl,
        )


def extract_views(image: Tensor, mask: np.ndarray, backbone: Backbone):
    """Features and feature-resolution masks for both views of one sample.

    Returns (F, F_h, m_feat, m_feat_h) where F_h comes from the flipped
    image and m_feat_h is the flipped downsampled mask.
    """
    f = backbone.forward(image)
    f_h = backbone.forward(tt.flip_h(image))
    m_feat = downsample_mask(np.asarray(mask), backbone.total_stride)
    if m_feat.sum() < 1:
        raise EmptyMaskError("support mask empty at feature resolution")
    m_feat_h = m_feat[:, ::-1].copy()
    return f, f_h, m_feat, m_feat_h


def reflection_invariance_prototype(f_s: Tensor, m_s, f_s_h: Tensor, m_s_h,
                                    params: FusionParams) -> Tensor:
    """Weighted fusion of the original and reflected support prototypes."""
    p_o = tt.masked_avg_pool(f_s, m_s)
    p_f = tt.masked_avg_pool(f_s_h, m_s_h)
    return params.p1 * p_o + params.p2 * p_f


def prior_values(f_q: Tensor, f_sup: Tensor, m_sup) -> Tensor:
    """Raw prior map: per query pixel, the max cosine similarity against
    foreground support pixels. Values lie in [-1, 1].

    Differentiable w.r.t. both feature maps; each pixel's gradient routes
    to its argmax support pixel (ties to the lowest flat index).
    """
    m = np.asarray(m_sup)
    if f_q.data.ndim != 3 or f_q.shape != f_sup.shape or m.shape != f_sup.shape[1:]:
        raise tt.ShapeError(
            f"prior_values shapes: query {f_q.shape}, support {f_sup.shape}, mask {m.shape}")
    fg = np.flatnonzero(m.reshape(-1) > 0)
    if fg.size == 0:
        raise EmptyMaskError("support mask has no foreground pixels")
    c, h, w = f_q.shape
    q = f_q.data.reshape(c, -1).T            # N x C
    s = f_sup.data.reshape(c, -1).T[fg]      # M x C
    qn = np.linalg.norm(q, axis=1)
    sn = np.linalg.norm(s, axis=1)
    q_unit = np.where(qn[:, None] > 1e-12, q / np.maximum(qn, 1e-300)[:, None], 0.0)
    s_unit = np.where(sn[:, None] > 1e-12, s / np.maximum(sn, 1e-300)[:, None], 0.0)
    cos = q_unit @ s_unit.T                  # N x M
    best = np.argmax(cos, axis=1)            # first max = lowest index
    vals = cos[np.arange(cos.shape[0]), best]

    def backward(g):
        gflat = g.reshape(-1)
        sb = s[best]
        sb_n = sn[best]
        live = (qn > 1e-12) & (sb_n > 1e-12)
        scale = np.where(live, gflat, 0.0)
        denom_q = np.where(live, qn * sb_n, 1.0)
        gq = scale[:, None] * (sb / denom_q[:, None]
                               - np.where(live, vals / np.maximum(qn, 1e-300) ** 2, 0.0)[:, None] * q)
        gs_rows = scale[:, None] * (q / denom_q[:, None]
                                    - np.where(live, vals / np.maximum(sb_n, 1e-300) ** 2, 0.0)[:, None] * sb)
        gs = np.zeros_like(s)
        np.add.at(gs, best, gs_rows)
        gs_full = np.zeros((h * w, c))
        gs_full[fg] = gs
        return gq.T.reshape(c, h, w).copy(), gs_full.T.reshape(c, h, w).copy()

    return tt.record_op(vals.reshape(h, w), (f_q, f_sup), backward)


def fuse_priors(m_o: Tensor, m_f: Tensor, conv: tuple) -> Tensor:
    """Fuse the two raw prior maps into one map in [0, 1].

    Both maps are min-max normalized, stacked with the reflection map as
    channel 0 (the concat order the fusion formula prescribes), passed
    through the 1x1 conv, then a sigmoid.
    """
    if m_o.shape != m_f.shape:
        raise tt.ShapeError(f"prior shapes differ: {m_o.shape} vs {m_f.shape}")
    w, b = conv
    stacked = tt.stack_maps([tt.minmax_norm(m_f), tt.minmax_norm(m_o)])
    fused = tt.sigmoid(tt.conv1x1(stacked, w, b))
    return tt.channel(fused, 0)


def ripmg(f_q_view: Tensor, f_s: Tensor, m_s, f_s_h: Tensor, m_s_h,
          conv: tuple) -> Tensor:
    """Reflection-invariance prior mask for one query view."""
    m_o_p = prior_values(f_q_view, f_s, m_s)
    m_f_p = prior_values(f_q_view, f_s_h, m_s_h)
    return fuse_priors(m_o_p, m_f_p, conv)
