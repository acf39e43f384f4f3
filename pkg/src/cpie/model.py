"""One-shot contour-primitive extraction model.

A small shared-weight two-branch network: a multi-scale backbone with
taps at 1/2, 1/4, 1/8 and 1/16 scale, a dilated-conv pyramid on the
deepest tap, bilinear fusion to half resolution, masked average pooling
of the support contour into a prototype vector, optional relevance
reweighting of the query features, and a per-pixel distance measure
turned into a contour probability by a sigmoid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor


class EmptyMaskError(ValueError):
    """Raised when a support mask has no foreground pixels."""


@dataclass
class BackboneConfig:
    base_width: int = 32
    adapter_channels: tuple = (16, 32, 64)
    fused_depth: int = 128
    aspp_rates: tuple = (2, 4)
    compress_dim: int = 64

    @property
    def concat_channels(self):
        return sum(self.adapter_channels) + self.fused_depth

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def toy(cls):
        # same topology at 1/4 width
        return cls(base_width=8, adapter_channels=(4, 8, 16), fused_depth=32,
                   aspp_rates=(2, 4), compress_dim=16)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 40
    lr_decay: float = 0.5
    lr_decay_epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def toy(cls):
        return cls(learning_rate=2e-3, batch_size=1, epochs=1)


_NORM_EPS = 1e-8  # inside every cosine norm


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class CpieModel:
    """Shared-backbone support/query model with prototype distance head."""

    def __init__(self, config: BackboneConfig = None, alpha: float = 20.0,
                 beta: float = 5.0, tau: float = 1e-6, distance: str = "cosine",
                 relevance: bool = True, seed: int = 0, dtype=np.float32):
        self.config = config or BackboneConfig.toy()
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.tau = float(tau)
        if distance not in ("cosine", "euclidean"):
            raise ValueError(f"unknown distance mode: {distance}")
        self.distance = distance
        self.relevance = relevance
        self.seed = int(seed)
        self.dtype = dtype
        self.params = {}       # name -> Tensor (requires_grad)
        self.bn_stats = {}     # name -> [running_mean, running_var]
        self._conv_specs = {}  # name -> ConvSpec
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- construction ---------------------------------------------------------

    def _add_conv(self, name, cin, cout, k=3, stride=1, dilation=1, bn=True):
        spec = ConvSpec((k, k), (stride, stride), (dilation, dilation), cin, cout, "same")
        self._conv_specs[name] = spec
        fan_in = k * k * cin
        self.params[name + ".w"] = Tensor(
            _fan_in_uniform(self._rng, (k, k, cin, cout), fan_in, self.dtype),
            requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True)
        if bn:
            self.params[name + ".bn_gamma"] = Tensor(np.ones(cout, self.dtype),
                                                     requires_grad=True)
            self.params[name + ".bn_beta"] = Tensor(np.zeros(cout, self.dtype),
                                                    requires_grad=True)
            self.bn_stats[name] = [np.zeros(cout, np.float64), np.ones(cout, np.float64)]

    def _build(self):
        cfg = self.config
        b = cfg.base_width
        a1, a2, a3 = cfg.adapter_channels
        d = cfg.fused_depth
        # stem + three downsampling blocks -> taps at 1/2, 1/4, 1/8, 1/16
        self._add_conv("stem", 3, b, k=3, stride=2)
        widths = [b, 2 * b, 4 * b, 8 * b]
        for i in range(3):
            cin, cout = widths[i], widths[i + 1]
            self._add_conv(f"block{i}.conv1", cin, cout, k=3, stride=2)
            self._add_conv(f"block{i}.conv2", cout, cout, k=3, stride=1)
            self._add_conv(f"block{i}.skip", cin, cout, k=1, stride=2)
        # 1x1 adapters on the three shallower taps
        for i, (cin, cout) in enumerate(zip(widths[:3], (a1, a2, a3))):
            self._add_conv(f"adapter{i}", cin, cout, k=1)
        # dilated pyramid on the deepest tap, sum-fused, then 1x1 + BN
        for r in cfg.aspp_rates:
            self._add_conv(f"aspp.rate{r}", widths[3], d, k=3, dilation=r, bn=False)
        self._add_conv("aspp.out", d, d, k=1)
        # fusion of the concatenated multi-scale map; no ReLU after the second
        self._add_conv("fuse1", cfg.concat_channels, d, k=3)
        self._add_conv("fuse2", d, d, k=3, bn=False)
        # relevance compression matrices
        c = cfg.compress_dim
        self.params["w1"] = Tensor(
            _fan_in_uniform(self._rng, (cfg.concat_channels, c), cfg.concat_channels,
                            self.dtype), requires_grad=True)
        self.params["w2"] = Tensor(
            _fan_in_uniform(self._rng, (d, c), d, self.dtype), requires_grad=True)

    def parameter_names(self):
        return sorted(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- layers -----------------------------------------------------------------

    def _conv(self, name, x, train, relu=True):
        spec = self._conv_specs[name]
        y = T.conv2d(x, spec, self.params[name + ".w"], self.params[name + ".b"])
        if name in self.bn_stats:
            rm, rv = self.bn_stats[name]
            y = T.batch_norm(y, self.params[name + ".bn_gamma"],
                             self.params[name + ".bn_beta"], rm, rv, train=train)
        if relu:
            y = T.relu(y)
        return y

    def _block(self, i, x, train):
        y = self._conv(f"block{i}.conv1", x, train)
        y = self._conv(f"block{i}.conv2", y, train, relu=False)
        s = self._conv(f"block{i}.skip", x, train, relu=False)
        return T.relu(y + s)

    def backbone(self, image: Tensor, train: bool):
        """Multi-scale feature maps (H0 concat at 1/2 scale) for one image."""
        h, w = image.shape[0], image.shape[1]
        if h % 16 or w % 16:
            raise T.ShapeMismatchError(f"input dims {h}x{w} must be divisible by 16")
        t1 = self._conv("stem", image, train)
        t2 = self._block(0, t1, train)
        t3 = self._block(1, t2, train)
        t4 = self._block(2, t3, train)
        taps = [self._conv(f"adapter{i}", t, train, relu=False)
                for i, t in enumerate((t1, t2, t3))]
        aspp = None
        for r in self.config.aspp_rates:
            y = self._conv(f"aspp.rate{r}", t4, train, relu=False)
            aspp = y if aspp is None else aspp + y
        taps.append(self._conv("aspp.out", aspp, train, relu=False))
        oh, ow = h // 2, w // 2
        taps = [t if t.shape[:2] == (oh, ow) else T.bilinear_resize(t, oh, ow)
                for t in taps]
        return T.concat_channels(taps)

    def fuse(self, h0: Tensor, train: bool):
        y = self._conv("fuse1", h0, train)
        return self._conv("fuse2", y, train, relu=False)

    def extract_features(self, image, train: bool = False):
        """Backbone + fusion for a [0,1] HxWx3 image -> (H0, H) at 1/2 scale."""
        x = image if isinstance(image, Tensor) else Tensor(
            np.asarray(image, self.dtype))
        h0 = self.backbone(x, train)
        return h0, self.fuse(h0, train)


# -- head operations (free functions on tensors) ----------------------------------


def downsample_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Max-pool a binary mask to feature resolution (keeps thin contours)."""
    h, w = mask.shape
    m = mask[: h - h % factor, : w - w % factor]
    return m.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def masked_average_pool(feat: Tensor, mask: np.ndarray) -> Tensor:
    """Per-channel mean of feature vectors under the mask foreground."""
    if mask.shape != feat.shape[:2]:
        raise T.ShapeMismatchError(
            f"mask shape {mask.shape} != feature spatial {feat.shape[:2]}")
    total = float(mask.sum())
    if total <= 0:
        raise EmptyMaskError("support mask has no foreground at feature resolution")
    m = Tensor(mask.astype(feat.dtype)[:, :, None])
    return T.tensor_sum(feat * m, axis=(0, 1)) * (1.0 / total)


def _pixel_cosine(feat: Tensor, vec: Tensor) -> Tensor:
    """Cosine similarity between every pixel vector of feat and vec, (h,w,1)."""
    dot = T.tensor_sum(feat * vec, axis=-1, keepdims=True)
    n1 = T.sqrt(T.tensor_sum(feat * feat, axis=-1, keepdims=True) + _NORM_EPS)
    n2 = T.sqrt(T.tensor_sum(vec * vec) + _NORM_EPS)
    return dot / (n1 * n2)


def relevance_map(h_q0: Tensor, proto: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Per-pixel relevance in [0,2]: 1 + cosine in the compressed space."""
    cq = T.dot_last(h_q0, w1)
    cp = T.dot_last(proto, w2)
    return _pixel_cosine(cq, cp) + 1.0


def cosine_distance_map(h_q: Tensor, proto: Tensor, alpha: float) -> Tensor:
    """alpha * (1 - cos(pixel, prototype)), in [0, 2*alpha]."""
    return (1.0 - _pixel_cosine(h_q, proto)) * alpha


def euclidean_distance_map(h_q: Tensor, proto: Tensor) -> Tensor:
    diff = h_q - proto
    return T.sqrt(T.tensor_sum(diff * diff, axis=-1, keepdims=True) + _NORM_EPS)


def sigmoid_activation(dist: Tensor, beta: float) -> Tensor:
    """sigmoid(beta - D): near 1 at zero distance, near 0 past ~2*beta."""
    return T.sigmoid(-(dist - beta))


def dice_loss(pred: Tensor, gt: np.ndarray, tau: float = 1e-6) -> Tensor:
    """1 - 2*sum(p*g) / (sum(p^2) + sum(g) + tau)."""
    if pred.shape != gt.shape:
        raise T.ShapeMismatchError(f"dice: pred {pred.shape} vs gt {gt.shape}")
    g = Tensor(gt.astype(pred.dtype))
    num = T.tensor_sum(pred * g) * 2.0
    den = T.tensor_sum(pred * pred) + float(gt.sum()) + tau
    return 1.0 - num / den


# -- full forward -----------------------------------------------------------------


def _check_images(i_q, i_s):
    if i_q.shape != i_s.shape:
        raise T.ShapeMismatchError(
            f"query {i_q.shape} and support {i_s.shape} dims differ")


def _head(model: CpieModel, h_q, proto):
    """Distance measure + sigmoid on the fused query map H_Q."""
    if model.distance == "cosine":
        dist = cosine_distance_map(h_q, proto, model.alpha)
    else:
        dist = euclidean_distance_map(h_q, proto)
    return sigmoid_activation(dist, model.beta)


def forward_graph(model: CpieModel, i_q, i_s, c_s: np.ndarray, train: bool = False):
    """Full differentiable forward; returns the (H,W) output tensor."""
    i_q = i_q if isinstance(i_q, Tensor) else Tensor(np.asarray(i_q, model.dtype))
    i_s = i_s if isinstance(i_s, Tensor) else Tensor(np.asarray(i_s, model.dtype))
    _check_images(i_q.data, i_s.data)
    outs = _forward_many(model, i_q, i_s, [c_s], train)
    return outs[0]


def _forward_many(model: CpieModel, i_q: Tensor, i_s: Tensor, masks, train):
    """Shared feature pass, then one prototype/distance pass per mask."""
    h, w = i_q.shape[0], i_q.shape[1]
    h_s0 = model.backbone(i_s, train)
    h_s = model.fuse(h_s0, train)
    h_q0 = model.backbone(i_q, train)
    h_q_plain = None
    outs = []
    for idx, c_s in enumerate(masks):
        c_s = np.asarray(c_s)
        if c_s.shape != (h, w):
            raise T.ShapeMismatchError(
                f"mask {idx}: shape {c_s.shape} != image spatial ({h}, {w})")
        m_feat = downsample_mask(c_s, 2)
        if m_feat.sum() <= 0:
            raise EmptyMaskError(f"mask {idx} is empty")
        proto = masked_average_pool(h_s, m_feat)
        if model.relevance:
            rel = relevance_map(h_q0, proto, model.params["w1"], model.params["w2"])
            h_q = model.fuse(h_q0 * rel, train)
        else:
            if h_q_plain is None:
                h_q_plain = model.fuse(h_q0, train)
            h_q = h_q_plain
        raw = _head(model, h_q, proto)
        up = T.bilinear_resize(raw, h, w)
        outs.append(T.reshape(up, (h, w)))
    return outs


def forward(model: CpieModel, i_q, i_s, c_s, train: bool = False) -> np.ndarray:
    """Raw CPI probability map (H,W) in [0,1] for a single support mask."""
    return forward_graph(model, i_q, i_s, c_s, train).numpy()


def forward_batch(model: CpieModel, i_q, i_s, masks, train: bool = False):
    """One raw CPI map per support mask, sharing the feature passes.

    Returns a list of (index, map-or-error). Empty masks fail only their
    own entry.
    """
    if not masks:
        return []
    i_q = i_q if isinstance(i_q, Tensor) else Tensor(np.asarray(i_q, model.dtype))
    i_s = i_s if isinstance(i_s, Tensor) else Tensor(np.asarray(i_s, model.dtype))
    _check_images(i_q.data, i_s.data)
    results = []
    good, order = [], []
    for idx, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape == i_q.data.shape[:2] and downsample_mask(m, 2).sum() > 0:
            good.append(m)
            order.append(idx)
            results.append(None)
        else:
            results.append(EmptyMaskError(f"mask {idx} is empty or misshaped"))
    if good:
        outs = _forward_many(model, i_q, i_s, good, train)
        for idx, out in zip(order, outs):
            results[idx] = out.numpy()
    return results


# -- training ---------------------------------------------------------------------


class AdamOptimizer:
    """Adam with bias correction over a model's parameter dict."""

    def __init__(self, model: CpieModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.lr = config.learning_rate
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self):
        c = self.config
        self.step_count += 1
        t = self.step_count
        for k, p in self.model.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = c.adam_beta1 * self.m[k] + (1 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1 - c.adam_beta2) * g * g
            mhat = self.m[k] / (1 - c.adam_beta1 ** t)
            vhat = self.v[k] / (1 - c.adam_beta2 ** t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + c.adam_eps)).astype(p.dtype)


def train_step(pair, model: CpieModel, optimizer: AdamOptimizer) -> float:
    """One forward/backward/update on a support-query pair; returns the loss."""
    i_s, c_s = pair.support
    i_q, c_q = pair.query
    model.zero_grad()
    out = forward_graph(model, i_q, i_s, c_s, train=True)
    loss = dice_loss(out, c_q, model.tau)
    val = float(loss.data)
    if not np.isfinite(val):
        raise FloatingPointError(f"non-finite loss at step {optimizer.step_count}")
    loss.backward()
    optimizer.step()
    return val


def train_online(model: CpieModel, raws, distractors, aug_config,
                 tconf: TrainConfig, steps_per_epoch: int, log_path=None,
                 callback=None):
    """Training loop with online pair generation and stepped lr decay.

    Each step averages gradients over `batch_size` freshly generated pairs.
    Deterministic given (raws, distractors, configs, tconf.seed).
    """
    from . import pairgen

    opt = AdamOptimizer(model, tconf)
    rng = np.random.default_rng(tconf.seed)
    log = open(log_path, "a") if log_path else None
    try:
        if log and log.tell() == 0:
            log.write("step\tepoch\tlr\tloss\n")
        for epoch in range(tconf.epochs):
            opt.lr = tconf.learning_rate * (
                tconf.lr_decay ** (epoch // tconf.lr_decay_epochs))
            for _ in range(steps_per_epoch):
                model.zero_grad()
                total = 0.0
                for _ in range(tconf.batch_size):
                    raw = raws[int(rng.integers(len(raws)))]
                    pair = pairgen.generate_pair(
                        raw, distractors[:3], aug_config,
                        seed=int(rng.integers(2 ** 31)), train=True)
                    i_s, c_s = pair.support
                    i_q, c_q = pair.query
                    out = forward_graph(model, i_q, i_s, c_s, train=True)
                    loss = dice_loss(out, c_q, model.tau) * (1.0 / tconf.batch_size)
                    val = float(loss.data) * tconf.batch_size
                    if not np.isfinite(val):
                        raise FloatingPointError(
                            f"non-finite loss at step {opt.step_count}")
                    loss.backward()
                    total += val
                opt.step()
                mean_loss = total / tconf.batch_size
                if log:
                    log.write(f"{opt.step_count}\t{epoch}\t{opt.lr:.6g}\t"
                              f"{mean_loss:.6f}\n")
                if callback:
                    callback(opt.step_count, mean_loss)
    finally:
        if log:
            log.close()
    return opt


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(model: CpieModel, directory, extra=None):
    """Tensor snapshots + a key=value manifest describing the model."""
    os.makedirs(directory, exist_ok=True)
    for name, p in model.params.items():
        T.save_tensor(os.path.join(directory, name + ".bin"), p.data)
    for name, (rm, rv) in model.bn_stats.items():
        T.save_tensor(os.path.join(directory, name + ".bn_mean.bin"), rm)
        T.save_tensor(os.path.join(directory, name + ".bn_var.bin"), rv)
    cfg = model.config
    manifest = {
        "base_width": cfg.base_width,
        "adapter_channels": ",".join(map(str, cfg.adapter_channels)),
        "fused_depth": cfg.fused_depth,
        "aspp_rates": ",".join(map(str, cfg.aspp_rates)),
        "compress_dim": cfg.compress_dim,
        "alpha": model.alpha,
        "beta": model.beta,
        "tau": model.tau,
        "distance": model.distance,
        "relevance": int(model.relevance),
        "seed": model.seed,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        for k, v in manifest.items():
            f.write(f"{k}={v}\n")


def load_checkpoint(directory) -> CpieModel:
    manifest = {}
    with open(os.path.join(directory, "manifest.txt")) as f:
        for line in f:
            line = line.strip()
            if line:
                k, v = line.split("=", 1)
                manifest[k] = v
    cfg = BackboneConfig(
        base_width=int(manifest["base_width"]),
        adapter_channels=tuple(int(x) for x in manifest["adapter_channels"].split(",")),
        fused_depth=int(manifest["fused_depth"]),
        aspp_rates=tuple(int(x) for x in manifest["aspp_rates"].split(",")),
        compress_dim=int(manifest["compress_dim"]),
    )
    model = CpieModel(cfg, alpha=float(manifest["alpha"]), beta=float(manifest["beta"]),
                      tau=float(manifest["tau"]), distance=manifest["distance"],
                      relevance=bool(int(manifest["relevance"])),
                      seed=int(manifest.get("seed", 0)))
    for name, p in model.params.items():
        p.data = T.load_tensor(os.path.join(directory, name + ".bin")).astype(
            p.dtype).reshape(p.shape)
    for name in model.bn_stats:
        rm = T.load_tensor(os.path.join(directory, name + ".bn_mean.bin"))
        rv = T.load_tensor(os.path.join(directory, name + ".bn_var.bin"))
        model.bn_stats[name][0][:] = rm
        model.bn_stats[name][1][:] = rv
    return model
