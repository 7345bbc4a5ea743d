"""Path-ensemble view of recurrent models.

Unrolls the recurrent stack into feedforward chains ("paths"), computes
per-path strengths and length statistics, and provides a trainable
ensemble variant in which batchnorm and the nonlinearity are applied per
branch before summation (the approximation that distinguishes it from
the recurrent model, which sums before normalizing).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormParams, Tensor
from .models import (Model, ModelConfig, build_model, combine_readout,
                     first_block_forward)


@dataclass
class PathDescriptor:
    entry_iterations: tuple   # a_m: iteration at which the path enters each recurrent layer
    exit_iterations: tuple    # b_m: last iteration spent in each layer (b_M = end iteration)
    end_iteration: int
    components: list          # ordered ('conv', layer, iter, kind) / ('bn', layer, iter) / ('act',)
    length: int               # number of convolutions in the recurrent stack
    readout_coefficient: float


@dataclass
class EnsembleSummary:
    paths: list
    unnormalized_strengths: np.ndarray
    strengths: np.ndarray            # normalized, sums to 1
    average_path_length: float
    diversity: dict                  # length -> total normalized strength
    degenerate: bool = False


def readout_weight(mode: str, T: int, t_end: int) -> float:
    """Linear coefficient of the final block's state at t_end in the readout."""
    if not 1 <= t_end <= T:
        raise ValueError(f"t_end {t_end} outside [1, {T}]")
    if mode == "no_avg":
        return 1.0 if t_end == T else 0.0
    if mode in ("early_avg", "late_avg"):
        return 1.0 / T
    if mode == "two_avg":
        return sum(1.0 / t for t in range(t_end, T + 1)) / T
    raise ValueError(f"unknown readout mode {mode!r}")


def enumerate_paths(m_rec: int, T: int, mode: str = "no_avg"):
    """All monotone staircase paths through an (m_rec x T) recurrent stack.

    Paths ending at iterations the readout mode never touches (coefficient 0)
    are not enumerated.
    """
    if m_rec not in (1, 2):
        raise ValueError("only 1 or 2 recurrent layers are supported")
    t_ends = [T] if mode == "no_avg" else list(range(1, T + 1))
    paths = []
    for t_end in t_ends:
        coeff = readout_weight(mode, T, t_end)
        for entries in _staircases(m_rec, t_end):
            exits = tuple(list(entries[1:]) + [t_end])
            components = []
            for layer in range(1, m_rec + 1):
                a, b = entries[layer - 1], exits[layer - 1]
                components.append(("conv", layer, a, "feedforward"))
                components.append(("bn", layer, a))
                components.append(("act",))
                for j in range(a + 1, b + 1):
                    components.append(("conv", layer, j, "lateral"))
                    components.append(("bn", layer, j))
                    components.append(("act",))
            length = m_rec + t_end - entries[0]
            paths.append(PathDescriptor(
                entry_iterations=entries, exit_iterations=exits,
                end_iteration=t_end, components=components,
                length=length, readout_coefficient=coeff))
    return paths


def _staircases(m_rec, t_end):
    if m_rec == 1:
        return [(a,) for a in range(1, t_end + 1)]
    return [(a1, a2) for a1 in range(1, t_end + 1) for a2 in range(a1, t_end + 1)]


def component_strength(component) -> float:
    """Gain factor of one path component.

    Conv kernels: mean over output channels of the flattened kernel 2-norm.
    Batchnorm: mean absolute scaling factor. Activations: 1.
    """
    if isinstance(component, BatchNormParams):
        return float(np.mean(np.abs(component.gamma.data)))
    if isinstance(component, Tensor):
        component = component.data
    if isinstance(component, np.ndarray):
        if component.ndim != 4:
            raise ValueError("conv strength expects a (Cout,Cin,k,k) kernel")
        return float(np.mean(np.linalg.norm(component.reshape(component.shape[0], -1), axis=1)))
    if component == "activation":
        return 1.0
    raise TypeError(f"cannot compute strength of {component!r}")


def _resolve(model: Model, comp):
    if comp[0] == "act":
        return "activation"
    if comp[0] == "bn":
        _, layer, t = comp
        return model.blocks[layer].bns[t - 1]
    _, layer, _, kind = comp
    blk = model.blocks[layer]
    return blk.ff_kernel if kind == "feedforward" else blk.lateral_kernel


def path_strength(path: PathDescriptor, model: Model) -> float:
    """Unnormalized strength: readout coefficient times the component-gain product."""
    s = path.readout_coefficient
    for comp in path.components:
        s *= component_strength(_resolve(model, comp))
    return s


def ensemble_summary(model: Model, mode: str = None) -> EnsembleSummary:
    cfg = model.config
    if cfg.kind != "recurrent":
        raise ValueError("path ensembles are defined for recurrent models")
    mode = mode or cfg.readout_mode
    paths = enumerate_paths(cfg.num_recurrent_blocks, cfg.iterations, mode)
    if cfg.removed_lengths:
        paths = [p for p in paths if p.length not in cfg.removed_lengths]
    raw = np.array([path_strength(p, model) for p in paths])
    total = raw.sum()
    if total <= 0.0:
        return EnsembleSummary(paths, raw, np.zeros_like(raw),
                               float("nan"), {}, degenerate=True)
    s = raw / total
    lengths = np.array([p.length for p in paths])
    diversity = {}
    for length, w in zip(lengths, s):
        diversity[int(length)] = diversity.get(int(length), 0.0) + float(w)
    return EnsembleSummary(paths, raw, s, float(np.dot(s, lengths)), diversity)


# ---------------------------------------------------------------------------
# trainable multipath model

def build_multipath_model(config: ModelConfig) -> Model:
    """Path-ensemble twin of a recurrent config: shared conv kernels per
    (layer, kind), shared batchnorm per (layer, iteration), same readout."""
    if config.kind != "recurrent":
        raise ValueError("multipath models are built from recurrent configs")
    cfg = dataclasses.replace(config, multipath=True)
    return build_model(cfg)


def _alive(kernel: Tensor) -> bool:
    # all-zero branches carry no signal and are dropped from the ensemble
    return bool(kernel.data.any())


def infer_multipath(model: Model, x: Tensor, bn_mode: str = "eval"):
    """Forward the path ensemble: each path is an independent feedforward chain
    Act(BN(Conv(...))) applied per branch; the layer state at iteration t is the
    sum of all surviving chains ending there."""
    cfg = model.config
    T = cfg.iterations
    m_rec = cfg.num_recurrent_blocks
    removed = set(cfg.removed_lengths)
    act = cfg.activation

    u = first_block_forward(model, x, bn_mode)
    blk1 = model.blocks[1]

    def step(state, kernel, bn, alive):
        if state is None or not alive:
            return None
        z = ad.conv2d(state, kernel, padding="same")
        return ad.activation(ad.batchnorm(z, bn, bn_mode), act)

    # layer-1 chains, indexed by (entry iteration a, current iteration t)
    c1 = {}
    ff1_alive, lat1_alive = _alive(blk1.ff_kernel), _alive(blk1.lateral_kernel)
    for a in range(1, T + 1):
        c1[(a, a)] = step(u, blk1.ff_kernel, blk1.bns[a - 1], ff1_alive)
        for t in range(a + 1, T + 1):
            c1[(a, t)] = step(c1[(a, t - 1)], blk1.lateral_kernel,
                              blk1.bns[t - 1], lat1_alive)

    if m_rec == 1:
        contributions = {
            t: [c1[(a, t)] for a in range(1, t + 1)
                if c1[(a, t)] is not None and (1 + t - a) not in removed]
            for t in range(1, T + 1)
        }
    else:
        blk2 = model.blocks[2]
        ff2_alive, lat2_alive = _alive(blk2.ff_kernel), _alive(blk2.lateral_kernel)
        c2 = {}
        for a1 in range(1, T + 1):
            for a2 in range(a1, T + 1):
                c2[(a1, a2, a2)] = step(c1[(a1, a2)], blk2.ff_kernel,
                                        blk2.bns[a2 - 1], ff2_alive)
                for t in range(a2 + 1, T + 1):
                    c2[(a1, a2, t)] = step(c2[(a1, a2, t - 1)], blk2.lateral_kernel,
                                           blk2.bns[t - 1], lat2_alive)
        contributions = {
            t: [c2[(a1, a2, t)] for a1 in range(1, t + 1) for a2 in range(a1, t + 1)
                if c2[(a1, a2, t)] is not None and (2 + t - a1) not in removed]
            for t in range(1, T + 1)
        }

    if not any(contributions[t] for t in contributions):
        raise ValueError("all paths removed or dead; the ensemble is empty")

    zero_state = None
    final_states = []
    for t in range(1, T + 1):
        terms = contributions[t]
        if terms:
            acc = terms[0]
            for term in terms[1:]:
                acc = ad.add(acc, term)
        else:
            if zero_state is None:
                shape = (x.data.shape[0], cfg.channels) + cfg.conv_output_shape()
                zero_state = Tensor(np.zeros(shape))
            acc = zero_state
        final_states.append(acc)

    pred, iter_preds = combine_readout(model, final_states, bn_mode)
    trace = {"final_states": final_states, "iter_preds": iter_preds,
             "first_block": u}
    return pred, trace


def length_windows(model_lengths, width: int):
    """Sliding windows of adjacent path lengths, e.g. width 3 over 1..7 gives
    (1,2,3), (2,3,4), (3,4,5), (4,5,6), (5,6,7)."""
    lengths = sorted(set(model_lengths))
    lo, hi = lengths[0], lengths[-1]
    if hi - lo + 1 < width:
        raise ValueError("window wider than the available length range")
    return [tuple(range(s, s + width)) for s in range(lo, hi - width + 2)]


def ablate_paths(config: ModelConfig, removed_lengths, dataset, schedule,
                 baseline_score: float = None):
    """Retrain a multipath model with the given path lengths removed.

    Returns (trained model, score, delta vs the unablated multipath baseline).
    """
    from .metrics import dataset_score
    from .training import train

    removed = tuple(sorted(set(removed_lengths)))
    if baseline_score is None:
        base_model = build_multipath_model(config)
        train(base_model, dataset, schedule)
        baseline_score, _ = dataset_score(base_model, dataset)
    cfg = dataclasses.replace(config, multipath=True, removed_lengths=removed)
    all_lengths = {p.length for p in enumerate_paths(
        cfg.num_recurrent_blocks, cfg.iterations, cfg.readout_mode)}
    if not all_lengths - set(removed):
        raise ValueError("removal leaves no paths")
    model = build_model(cfg)
    train(model, dataset, schedule)
    score, _ = dataset_score(model, dataset)
    return model, score, score - baseline_score
