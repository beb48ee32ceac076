"""Multi-scale atrous convolution network.

Data flow for an N x 3 x H x W batch (H, W divisible by 16)::

    pyramid level 0 (1/1) -> stem 3x3 conv ------------------+-> + atrous0 -> adapter0
    stage 1 (stride 2)    -> 1/2  ---------------------------+-> + atrous1(level 1) -> adapter1
    ...
    stage 4 (stride 2)    -> 1/16 ---------------------------+-> + atrous4(level 4) -> adapter4
    global average pool -> fc 1024 -> ReLU -> dropout -> fc 512 -> dropout -> classifier

Each atrous block runs one 3x3 dilated conv per rate on the pyramid level in
parallel and concatenates the branches; the pointwise adapter maps the
concatenation to the channel count of the feature map it is added to.
"""

from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigurationError, DimensionError, ModeError, NumericFault
from .ops import BatchNormState, Conv2dSpec
from .serialize import load_arrays, save_arrays
from .tensor import Tensor, concat, default_dtype

PYRAMID_LEVELS = 5
BOTTLENECK_EXPANSION = 4
CONV_METHOD = "im2col"


@dataclass(frozen=True)
class MacNetConfig:
    num_classes: int = 4
    input_size: tuple = (64, 64)
    pyramid_levels: int = PYRAMID_LEVELS
    atrous_rates: tuple = (1, 2, 3)
    atrous_branch_width: int = 8
    stage_channels: tuple = (256, 512, 1024, 2048)
    width_multiplier: float = 0.125
    stage_depths: tuple = (1, 1, 1, 1)
    stem_channels: int = 64
    fc_widths: tuple = (1024, 512)
    dropout_p: float = 0.5
    bn_enabled: bool = True

    def __post_init__(self):
        for name in ("input_size", "atrous_rates", "stage_channels", "stage_depths", "fc_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if self.pyramid_levels != PYRAMID_LEVELS:
            raise ConfigurationError(f"pyramid_levels is fixed at {PYRAMID_LEVELS}")
        if len(self.input_size) != 2 or any(v < 16 or v % 16 for v in self.input_size):
            raise ConfigurationError(f"input_size {self.input_size} must be positive multiples of 16")
        if not self.atrous_rates or min(self.atrous_rates) < 1:
            raise ConfigurationError("atrous_rates must be positive")
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigurationError("exactly four residual stages are required")
        if min(self.stage_depths) < 1:
            raise ConfigurationError("stage depths must be >= 1")
        chans = self.channels
        if any(b != 2 * a for a, b in zip(chans, chans[1:])):
            raise ConfigurationError(f"stage channels {chans} must double from stage to stage")
        if chans[0] % BOTTLENECK_EXPANSION:
            raise ConfigurationError(f"stage channels must be divisible by {BOTTLENECK_EXPANSION}")
        if self.stem_width < 1 or self.atrous_branch_width < 1 or len(self.fc_widths) != 2:
            raise ConfigurationError("stem width, branch width and the two fc widths must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")

    @classmethod
    def paper_faithful(cls, num_classes=22, input_size=(224, 224)):
        return cls(num_classes=num_classes, input_size=input_size, atrous_branch_width=32,
                   width_multiplier=1.0, stage_depths=(3, 4, 23, 3))

    @property
    def channels(self):
        """Effective stage channels after the width multiplier."""
        return tuple(max(1, round(c * self.width_multiplier)) for c in self.stage_channels)

    @property
    def stem_width(self):
        return max(1, round(self.stem_channels * self.width_multiplier))

    @property
    def atrous_width(self):
        return self.atrous_branch_width * len(self.atrous_rates)

    def to_text(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_text(cls, values):
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                continue
            default = known[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif isinstance(default, bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)


def _conv_unit(shapes, prefix, out_ch, in_ch, k, bn):
    shapes[f"{prefix}.w"] = (out_ch, in_ch, k, k)
    if bn:
        shapes[f"{prefix}.bn.gamma"] = (out_ch,)
        shapes[f"{prefix}.bn.beta"] = (out_ch,)
    else:
        shapes[f"{prefix}.b"] = (out_ch,)


def parameter_shapes(config):
    """Ordered ``name -> shape`` map of every trainable tensor."""
    bn = config.bn_enabled
    shapes = OrderedDict()
    stem = config.stem_width
    chans = config.channels
    _conv_unit(shapes, "stem", stem, 3, 3, bn)
    targets = (stem,) + chans
    for k in range(PYRAMID_LEVELS):
        for rate in config.atrous_rates:
            _conv_unit(shapes, f"atrous{k}.rate{rate}", config.atrous_branch_width, 3, 3, bn)
        shapes[f"adapter{k}.w"] = (targets[k], config.atrous_width, 1, 1)
        # adapters 0-3 feed straight into batch-normalized convs, which cancel a bias
        if not bn or k == PYRAMID_LEVELS - 1:
            shapes[f"adapter{k}.b"] = (targets[k],)
    in_ch = stem
    for i, (out_ch, depth) in enumerate(zip(chans, config.stage_depths), start=1):
        mid = out_ch // BOTTLENECK_EXPANSION
        for j in range(depth):
            p = f"stage{i}.block{j}"
            _conv_unit(shapes, f"{p}.conv1", mid, in_ch, 1, bn)
            _conv_unit(shapes, f"{p}.conv2", mid, mid, 3, bn)
            _conv_unit(shapes, f"{p}.conv3", out_ch, mid, 1, bn)
            if j == 0:
                _conv_unit(shapes, f"{p}.proj", out_ch, in_ch, 1, bn)
            in_ch = out_ch
    fc1, fc2 = config.fc_widths
    for name, d, m in (("head.fc1", chans[-1], fc1), ("head.fc2", fc1, fc2), ("head.cls", fc2, config.num_classes)):
        shapes[f"{name}.w"] = (d, m)
        shapes[f"{name}.b"] = (m,)
    return shapes


def bn_layers(config):
    if not config.bn_enabled:
        return []
    return [name[: -len(".gamma")] for name in parameter_shapes(config) if name.endswith(".bn.gamma")]


def fan_in(name, shape):
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


class MacNetModel:
    def __init__(self, config, params, bn_states, seed=None):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.seed = seed
        self.mode = "train"

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def state_arrays(self):
        arrays = OrderedDict((name, p.data) for name, p in self.params.items())
        for name, st in self.bn_states.items():
            arrays[f"{name}.running_mean"] = st.running_mean
            arrays[f"{name}.running_var"] = st.running_var
        return arrays

    def __call__(self, image, rng=None):
        return macnet_forward(self, image, rng=rng)


def init_parameters(config, seed=0, dtype=None):
    """He-normal conv/linear weights (std sqrt(2/fan_in)), zero biases, unit BN scale."""
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".w"):
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in(name, shape))
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    states = OrderedDict((name, BatchNormState.create(params[name + ".gamma"].shape[0], dtype)) for name in bn_layers(config))
    return MacNetModel(config, params, states, seed)


# forward pass


def build_pyramid(image, levels=PYRAMID_LEVELS):
    """Level i is the image mean-pooled by 2**i; level 0 is the input itself."""
    n, c, h, w = image.shape
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise DimensionError(
            f"image {h}x{w} must be divisible by {f} for a {levels}-level pyramid; "
            f"pad to {-(-h // f) * f}x{-(-w // f) * f}"
        )
    out = [image]
    for i in range(1, levels):
        out.append(ops.downsample_avg(out[-1], 2))
    return out


class _Forward:
    def __init__(self, model, rng):
        self.p = model.params
        self.cfg = model.config
        self.mode = model.mode
        self.states = model.bn_states
        self.rng = rng

    def check(self, name, t):
        if not np.isfinite(t.data).all():
            raise NumericFault(f"non-finite activation in layer '{name}'")
        return t

    def conv_unit(self, name, x, spec, act=True):
        if spec.kernel == (1, 1) and spec.padding == (0, 0):
            y = ops.pointwise_conv(x, self.p[f"{name}.w"], self.p.get(f"{name}.b"), stride=spec.stride)
        else:
            y = ops.conv2d(x, self.p[f"{name}.w"], self.p.get(f"{name}.b"), spec, method=CONV_METHOD)
        if self.cfg.bn_enabled:
            y = ops.batch_norm(y, self.p[f"{name}.bn.gamma"], self.p[f"{name}.bn.beta"],
                               self.states[f"{name}.bn"], self.mode)
        if act:
            y = ops.relu(y)
        return self.check(name, y)

    def atrous_block(self, k, level):
        if level.shape[1] != 3:
            raise DimensionError(f"atrous block {k} expects 3 input channels, got {level.shape[1]}")
        width = self.cfg.atrous_branch_width
        branches = [
            self.conv_unit(f"atrous{k}.rate{r}", level, Conv2dSpec.same(3, width, 3, r))
            for r in self.cfg.atrous_rates
        ]
        return concat(branches, axis=1) if len(branches) > 1 else branches[0]

    def fuse(self, k, features, level):
        a = self.atrous_block(k, level)
        a = ops.pointwise_conv(a, self.p[f"adapter{k}.w"], self.p.get(f"adapter{k}.b"))
        if a.shape != features.shape:
            raise DimensionError(f"fusion {k}: adapter output {a.shape} != feature map {features.shape}")
        return self.check(f"adapter{k}", features + a)

    def bottleneck(self, prefix, x, out_ch, stride):
        mid = out_ch // BOTTLENECK_EXPANSION
        in_ch = x.shape[1]
        h = self.conv_unit(f"{prefix}.conv1", x, Conv2dSpec(in_ch, mid, 1))
        h = self.conv_unit(f"{prefix}.conv2", h, Conv2dSpec(mid, mid, 3, stride, 1, 1))
        h = self.conv_unit(f"{prefix}.conv3", h, Conv2dSpec(mid, out_ch, 1), act=False)
        if f"{prefix}.proj.w" in self.p:
            shortcut = self.conv_unit(f"{prefix}.proj", x, Conv2dSpec(in_ch, out_ch, 1, stride), act=False)
        else:
            shortcut = x
        return self.check(prefix, ops.relu(h + shortcut))

    def dropout(self, x):
        return ops.dropout(x, self.cfg.dropout_p, self.mode, self.rng)

    def run(self, image):
        cfg = self.cfg
        for name, t in self.p.items():
            if not np.isfinite(t.data).all():
                raise NumericFault(f"non-finite parameter '{name}'")
        levels = build_pyramid(image)
        h = self.conv_unit("stem", levels[0], Conv2dSpec.same(3, cfg.stem_width, 3, 1))
        h = self.fuse(0, h, levels[0])
        stages = []
        for i, (out_ch, depth) in enumerate(zip(cfg.channels, cfg.stage_depths), start=1):
            for j in range(depth):
                h = self.bottleneck(f"stage{i}.block{j}", h, out_ch, 2 if j == 0 else 1)
            h = self.fuse(i, h, levels[i])
            stages.append(h)
        z = ops.global_avg_pool(h)
        z = self.dropout(self.check("head.fc1", ops.relu(ops.linear(z, self.p["head.fc1.w"], self.p["head.fc1.b"]))))
        z = self.dropout(self.check("head.fc2", ops.linear(z, self.p["head.fc2.w"], self.p["head.fc2.b"])))
        logits = self.check("head.cls", ops.linear(z, self.p["head.cls.w"], self.p["head.cls.b"]))
        return logits, stages


def atrous_block_forward(model, index, level_image):
    """Concatenated rate branches of atrous block ``index`` on one pyramid level."""
    if not isinstance(level_image, Tensor):
        level_image = Tensor(np.asarray(level_image, dtype=model.dtype))
    return _Forward(model, None).atrous_block(index, level_image)


def macnet_forward(model, image, rng=None, return_features=False):
    """Logits of shape (N, num_classes); with ``return_features`` also the four fused stage maps."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    elif image.dtype != model.dtype:
        image = Tensor(image.data.astype(model.dtype))
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected an (N, 3, H, W) image batch, got {image.shape}")
    if model.mode == "train" and model.config.dropout_p > 0 and rng is None:
        rng = np.random.default_rng()
    logits, stages = _Forward(model, rng).run(image)
    return (logits, stages) if return_features else logits


@dataclass
class Prediction:
    probabilities: np.ndarray
    top_k: list


def top_k_indices(probabilities, k):
    """Per-row class indices by descending probability, ties by ascending index."""
    order = np.argsort(-np.asarray(probabilities), axis=1, kind="stable")
    return order[:, :k]


def predict(model, image, k=5):
    if model.mode != "eval":
        raise ModeError("predict requires eval mode; call model.eval() first (dropout is stochastic in train mode)")
    k = min(k, model.config.num_classes)
    probs = ops.softmax(macnet_forward(model, image)).data
    return Prediction(probs, top_k_indices(probs, k).tolist())


# checkpoints


def save_model(path, model, meta=None, extra=None, dtype=None):
    """Model parameters, BN running moments, config block and seed in one container."""
    arrays = OrderedDict(model.state_arrays())
    if extra:
        arrays.update(extra)
    block = {f"config.{k}": v for k, v in model.config.to_text().items()}
    block["seed"] = "" if model.seed is None else model.seed
    block["dtype"] = np.dtype(model.dtype).name
    block.update(meta or {})
    save_arrays(path, arrays, block, dtype=dtype)


def load_model(path):
    """Rebuild a model from :func:`save_model` output; returns ``(model, arrays, meta)``.

    ``arrays`` holds the non-model entries (e.g. optimizer state).
    """
    arrays, meta = load_arrays(path)
    config = MacNetConfig.from_text({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    shapes = parameter_shapes(config)
    seed = meta.get("seed") or None
    dtype = np.dtype(meta.get("dtype", "float32"))
    params = OrderedDict()
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        value = arrays.pop(name)
        if value.shape != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has extents {value.shape}, config requires {shape}")
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    states = OrderedDict()
    for name in bn_layers(config):
        c = params[name + ".gamma"].shape[0]
        mean, var = arrays.pop(f"{name}.running_mean", None), arrays.pop(f"{name}.running_var", None)
        if mean is None or var is None or mean.shape != (c,) or var.shape != (c,):
            raise CheckpointError(f"{path}: running moments of {name!r} missing or mis-shaped")
        states[name] = BatchNormState(mean.astype(dtype), var.astype(dtype))
    model = MacNetModel(config, params, states, int(seed) if seed is not None else None)
    return model, arrays, meta


__all__ = [
    "MacNetConfig", "MacNetModel", "Prediction", "atrous_block_forward", "build_pyramid", "init_parameters",
    "load_model", "macnet_forward", "parameter_shapes", "predict", "save_model",
]
