"""Feedforward and recurrent convolutional encoding models.

A model is a batchnormed input, a stack of convolutional processing blocks
(the first with a large valid-padding kernel, the rest 3x3 same-padding,
optionally recurrent with a lateral kernel and per-iteration batchnorm),
average pooling, and a per-neuron factorized readout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import BatchNormParams, Tensor

READOUT_MODES = ("no_avg", "early_avg", "late_avg", "two_avg")
ACTIVATIONS = ("relu", "softplus")


@dataclass
class ModelConfig:
    kind: str                       # 'feedforward' | 'recurrent'
    num_blocks: int                 # total conv blocks, including the first k=9 one
    channels: int
    num_neurons: int
    input_shape: tuple
    first_kernel: int = 9
    later_kernel: int = 3
    activation: str = "relu"
    bn_act_order_first_block: str = "bn_before_act"
    iterations: int = 1
    readout_mode: str = "no_avg"
    seed: int = 0
    multipath: bool = False         # run the recurrent stack as a path ensemble
    removed_lengths: tuple = ()     # path lengths ablated from a multipath model

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.removed_lengths = tuple(sorted(self.removed_lengths))
        if self.kind not in ("feedforward", "recurrent"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.readout_mode not in READOUT_MODES:
            raise ValueError(f"unknown readout mode {self.readout_mode!r}")
        if self.bn_act_order_first_block not in ("bn_before_act", "bn_after_act"):
            raise ValueError(f"bad bn/act order {self.bn_act_order_first_block!r}")
        if self.first_kernel % 2 == 0 or self.later_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.num_blocks < 2:
            raise ValueError("need at least the first block plus one more")
        if self.kind == "feedforward":
            if self.iterations != 1:
                raise ValueError("feedforward models have exactly one iteration")
            if self.multipath or self.removed_lengths:
                raise ValueError("multipath options only apply to recurrent models")
        else:
            if self.iterations < 1:
                raise ValueError("recurrent models need iterations >= 1")
            if self.num_recurrent_blocks not in (1, 2):
                raise ValueError("recurrent models support 1 or 2 recurrent blocks")
        if self.removed_lengths and not self.multipath:
            raise ValueError("removed_lengths requires multipath=True")

    @property
    def num_recurrent_blocks(self) -> int:
        return self.num_blocks - 1 if self.kind == "recurrent" else 0

    def conv_output_shape(self):
        h, w = self.input_shape
        return h - self.first_kernel + 1, w - self.first_kernel + 1

    def pooled_shape(self):
        h, w = self.conv_output_shape()
        return h // 3, w // 3

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["removed_lengths"] = list(self.removed_lengths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["removed_lengths"] = tuple(d.get("removed_lengths", ()))
        return cls(**d)


@dataclass
class CPB:
    kernel: Tensor
    bn: BatchNormParams
    padding: str = "same"


@dataclass
class RCPB:
    ff_kernel: Tensor
    lateral_kernel: Tensor
    bns: list  # one BatchNormParams per iteration


@dataclass
class FactorizedReadout:
    spatial_mask: Tensor     # (N, Hp, Wp)
    feature_weights: Tensor  # (N, C)
    bias: Tensor             # (N,)


@dataclass
class Model:
    config: ModelConfig
    input_bn: BatchNormParams
    blocks: list
    readout: FactorizedReadout

    def parameters(self):
        """Named learnable tensors, in a fixed deterministic order."""
        out = [("input_bn.gamma", self.input_bn.gamma), ("input_bn.beta", self.input_bn.beta)]
        for i, blk in enumerate(self.blocks):
            if isinstance(blk, CPB):
                out.append((f"block{i}.kernel", blk.kernel))
                out.append((f"block{i}.bn.gamma", blk.bn.gamma))
                out.append((f"block{i}.bn.beta", blk.bn.beta))
            else:
                out.append((f"block{i}.ff_kernel", blk.ff_kernel))
                out.append((f"block{i}.lateral_kernel", blk.lateral_kernel))
                for t, bn in enumerate(blk.bns):
                    out.append((f"block{i}.bn{t}.gamma", bn.gamma))
                    out.append((f"block{i}.bn{t}.beta", bn.beta))
        out.append(("readout.spatial_mask", self.readout.spatial_mask))
        out.append(("readout.feature_weights", self.readout.feature_weights))
        out.append(("readout.bias", self.readout.bias))
        return out

    def batchnorms(self):
        bns = [("input_bn", self.input_bn)]
        for i, blk in enumerate(self.blocks):
            if isinstance(blk, CPB):
                bns.append((f"block{i}.bn", blk.bn))
            else:
                bns.extend((f"block{i}.bn{t}", bn) for t, bn in enumerate(blk.bns))
        return bns

    def set_requires_grad(self, flag: bool):
        for _, p in self.parameters():
            p.requires_grad = flag


def build_model(config: ModelConfig) -> Model:
    """Deterministically initialize a model from its config seed."""
    rng = np.random.default_rng(config.seed)
    C = config.channels
    T = config.iterations

    def kernel(c_out, c_in, k):
        limit = 1.0 / np.sqrt(c_in * k * k)
        return Tensor(rng.uniform(-limit, limit, size=(c_out, c_in, k, k)))

    input_bn = BatchNormParams.create(1)
    blocks = [CPB(kernel=kernel(C, 1, config.first_kernel),
                  bn=BatchNormParams.create(C), padding="valid")]
    if config.kind == "feedforward":
        for _ in range(config.num_blocks - 1):
            blocks.append(CPB(kernel=kernel(C, C, config.later_kernel),
                              bn=BatchNormParams.create(C), padding="same"))
    else:
        for _ in range(config.num_recurrent_blocks):
            blocks.append(RCPB(
                ff_kernel=kernel(C, C, config.later_kernel),
                lateral_kernel=kernel(C, C, config.later_kernel),
                bns=[BatchNormParams.create(C) for _ in range(T)],
            ))

    hp, wp = config.pooled_shape()
    if hp < 1 or wp < 1:
        raise ValueError(f"input {config.input_shape} too small for the pooled readout")
    n = config.num_neurons
    mask = Tensor(rng.uniform(-1, 1, size=(n, hp, wp)) / np.sqrt(hp * wp))
    featw = Tensor(rng.uniform(-1, 1, size=(n, C)) / np.sqrt(C))
    bias = Tensor(np.zeros(n))
    return Model(config=config, input_bn=input_bn, blocks=blocks,
                 readout=FactorizedReadout(mask, featw, bias))


# ---------------------------------------------------------------------------
# forward passes

def cpb_forward(block: CPB, y: Tensor, activation: str, bn_mode: str,
                order: str = "bn_before_act") -> Tensor:
    z = ad.conv2d(y, block.kernel, padding=block.padding)
    if order == "bn_before_act":
        return ad.activation(ad.batchnorm(z, block.bn, bn_mode), activation)
    return ad.batchnorm(ad.activation(z, activation), block.bn, bn_mode)


def rcpb_forward(block: RCPB, y_bottom: Tensor, y_lateral, t: int,
                 activation: str, bn_mode: str) -> Tensor:
    """One recurrent block step; y_lateral is the block's own t-1 output (None at t=1)."""
    if not 1 <= t <= len(block.bns):
        raise ValueError(f"iteration {t} outside [1, {len(block.bns)}]")
    z = ad.conv2d(y_bottom, block.ff_kernel, padding="same")
    if y_lateral is not None:
        z = ad.add(z, ad.conv2d(y_lateral, block.lateral_kernel, padding="same"))
    return ad.activation(ad.batchnorm(z, block.bns[t - 1], bn_mode), activation)


def first_block_forward(model: Model, x: Tensor, bn_mode: str) -> Tensor:
    cfg = model.config
    y = ad.batchnorm(x, model.input_bn, bn_mode)
    return cpb_forward(model.blocks[0], y, cfg.activation, bn_mode,
                       order=cfg.bn_act_order_first_block)


def readout_head(model: Model, state: Tensor, bn_mode: str) -> Tensor:
    r = model.readout
    pooled = ad.avgpool3(state)
    drive = ad.readout(pooled, r.spatial_mask, r.feature_weights, r.bias)
    return ad.activation(drive, model.config.activation)


def _mean_of(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(tensors))


def combine_readout(model: Model, final_states, bn_mode: str):
    """Apply the configured readout mode to the final block's per-iteration states.

    Returns (prediction, per-iteration predictions or None).
    """
    mode = model.config.readout_mode
    if mode == "no_avg":
        return readout_head(model, final_states[-1], bn_mode), None
    if mode == "early_avg":
        return readout_head(model, _mean_of(final_states), bn_mode), None
    if mode == "late_avg":
        preds = [readout_head(model, s, bn_mode) for s in final_states]
        return _mean_of(preds), preds
    # two_avg: readout of running cumulative means, then average over iterations
    acc = None
    preds = []
    for t, s in enumerate(final_states, start=1):
        acc = s if acc is None else ad.add(acc, s)
        preds.append(readout_head(model, ad.scale(acc, 1.0 / t), bn_mode))
    return _mean_of(preds), preds


def infer_feedforward(model: Model, x: Tensor, bn_mode: str = "eval") -> Tensor:
    if model.config.kind != "feedforward":
        raise ValueError("infer_feedforward requires a feedforward model")
    y = first_block_forward(model, x, bn_mode)
    for blk in model.blocks[1:]:
        y = cpb_forward(blk, y, model.config.activation, bn_mode)
    return readout_head(model, y, bn_mode)


def infer_recurrent(model: Model, x: Tensor, bn_mode: str = "eval"):
    """Returns (prediction, trace). The trace keeps every y^(block, t) plus the
    per-iteration readout outputs needed for probing and per-iteration losses."""
    cfg = model.config
    if cfg.kind != "recurrent":
        raise ValueError("infer_recurrent requires a recurrent model")
    T = cfg.iterations
    u = first_block_forward(model, x, bn_mode)
    states = {}
    prev = {m: None for m in range(1, len(model.blocks))}
    for t in range(1, T + 1):
        bottom = u
        for m in range(1, len(model.blocks)):
            ym = rcpb_forward(model.blocks[m], bottom, prev[m], t,
                              cfg.activation, bn_mode)
            states[(m, t)] = ym
            prev[m] = ym
            bottom = ym
    final_states = [states[(len(model.blocks) - 1, t)] for t in range(1, T + 1)]
    pred, iter_preds = combine_readout(model, final_states, bn_mode)
    trace = {"states": states, "final_states": final_states,
             "iter_preds": iter_preds, "first_block": u}
    return pred, trace


def infer(model: Model, x: Tensor, bn_mode: str = "eval"):
    """Unified entry point; returns (prediction, trace)."""
    if model.config.kind == "feedforward":
        pred = infer_feedforward(model, x, bn_mode)
        return pred, {"final_states": None, "iter_preds": None}
    if model.config.multipath:
        from .multipath import infer_multipath
        return infer_multipath(model, x, bn_mode)
    return infer_recurrent(model, x, bn_mode)


def predict(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode predictions for (S,H,W) images, without recording gradients."""
    outs = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size][:, None, :, :])
            pred, _ = infer(model, x, bn_mode="eval")
            outs.append(pred.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# bookkeeping

def param_count(model: Model) -> dict:
    """Exact learnable-parameter counts, with and without batchnorm."""
    conv = bn = 0
    for blk in model.blocks:
        if isinstance(blk, CPB):
            conv += blk.kernel.data.size
            bn += blk.bn.gamma.data.size + blk.bn.beta.data.size
        else:
            conv += blk.ff_kernel.data.size + blk.lateral_kernel.data.size
            for b in blk.bns:
                bn += b.gamma.data.size + b.beta.data.size
    bn += model.input_bn.gamma.data.size + model.input_bn.beta.data.size
    r = model.readout
    readout_n = r.spatial_mask.data.size + r.feature_weights.data.size + r.bias.data.size
    return {
        "conv": conv,
        "bn": bn,
        "readout": readout_n,
        "total": conv + bn + readout_n,
        "total_excl_bn": conv + readout_n,
    }


def t1_feedforward_twin(model: Model) -> Model:
    """The feedforward chain a recurrent model reduces to at T=1 (shared params)."""
    cfg = model.config
    if cfg.kind != "recurrent":
        raise ValueError("needs a recurrent model")
    ff_cfg = dataclasses.replace(
        cfg, kind="feedforward", iterations=1, readout_mode="no_avg",
        multipath=False, removed_lengths=())
    blocks = [model.blocks[0]]
    for blk in model.blocks[1:]:
        blocks.append(CPB(kernel=blk.ff_kernel, bn=blk.bns[0], padding="same"))
    return Model(config=ff_cfg, input_bn=model.input_bn, blocks=blocks,
                 readout=model.readout)


def matched_feedforward_config(cfg: ModelConfig, seed=None) -> ModelConfig:
    """Parameter-matched feedforward twin config: each recurrent block counts as
    two same-padding conv blocks."""
    if cfg.kind != "recurrent":
        raise ValueError("needs a recurrent config")
    return dataclasses.replace(
        cfg, kind="feedforward", iterations=1, readout_mode="no_avg",
        num_blocks=1 + 2 * cfg.num_recurrent_blocks,
        multipath=False, removed_lengths=(),
        seed=cfg.seed if seed is None else seed)


def snapshot(model: Model) -> dict:
    arrays = {name: p.data.copy() for name, p in model.parameters()}
    for name, bn in model.batchnorms():
        arrays[f"{name}.running_mean"] = bn.running_mean.copy()
        arrays[f"{name}.running_var"] = bn.running_var.copy()
    return arrays


def restore(model: Model, arrays: dict):
    for name, p in model.parameters():
        p.data[...] = arrays[name]
    for name, bn in model.batchnorms():
        bn.running_mean[...] = arrays[f"{name}.running_mean"]
        bn.running_var[...] = arrays[f"{name}.running_var"]


def save_model(model: Model, path):
    container.save(path, {"format": "recnsi-checkpoint-v1",
                          "config": model.config.to_dict()}, snapshot(model))


def load_model(path) -> Model:
    meta, arrays = container.load(path)
    if meta.get("format") != "recnsi-checkpoint-v1":
        raise ValueError(f"{path}: not a model checkpoint")
    model = build_model(ModelConfig.from_dict(meta["config"]))
    restore(model, arrays)
    return model
