"""Virtual neurophysiology: probing hidden units of recurrent models with
parametric stimuli, tuning curves, temporal dynamics, and suppression indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormParams, Tensor
from .models import Model, ModelConfig, build_model, infer_recurrent
from .stimuli import (BAR_LENGTHS, BAR_ORIENTATIONS, GRATING_DIAMETERS,
                      GRATING_FREQUENCIES, BarStimulus, GratingStimulus,
                      bar_grid_centers, render_bar, render_grating)

STABILITY_THRESHOLD = 1.0


@dataclass
class TuningCurve:
    parameter: np.ndarray    # swept stimulus parameter values
    mean: np.ndarray         # mean response per value over included units
    se: np.ndarray           # standard error per value
    n_units: int

    def __post_init__(self):
        if len(self.parameter) != len(self.mean) or len(self.mean) != len(self.se):
            raise ValueError("tuning curve fields disagree in length")
        if (self.se < 0).any():
            raise ValueError("negative standard error")

    def write_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "mean", "se", "n_units"])
            for p, m, s in zip(self.parameter, self.mean, self.se):
                w.writerow([p, f"{m:.8g}", f"{s:.8g}", self.n_units])


@dataclass
class RFMap:
    layer: int               # probed block index
    center: tuple            # central feature-map position (row, col)
    positions: list          # per unit: preferred bar center (y, x) in pixels
    orientations: np.ndarray  # per unit: preferred orientation, degrees
    mappable: np.ndarray     # per unit: False when all probe responses are zero


def probe_units(model: Model, images: np.ndarray, layer: int = None,
                batch_size: int = 64) -> np.ndarray:
    """Responses of the centrally-positioned hidden units (all channels at the
    central feature-map position) of one recurrent block.

    Returns (units, iterations, stimuli)."""
    cfg = model.config
    if cfg.kind != "recurrent":
        raise ValueError("probing requires a recurrent model")
    if layer is None:
        layer = len(model.blocks) - 1
    h, w = cfg.conv_output_shape()
    cy, cx = h // 2, w // 2
    T = cfg.iterations
    out = np.empty((cfg.channels, T, len(images)))
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[i:i + batch_size], dtype=np.float64)[:, None])
            _, trace = infer_recurrent(model, x, bn_mode="eval")
            for t in range(1, T + 1):
                # (batch, channels) at the central position
                resp = trace["states"][(layer, t)].data[:, :, cy, cx]
                out[:, t - 1, i:i + len(resp)] = resp.T
    return out


def map_receptive_fields(model: Model, layer: int = None,
                         bar_length: int = 10, image_size: int = None) -> RFMap:
    """Preferred bar position and orientation per central unit, from the
    first-iteration responses to intermediate-length bars on a 5x5 grid.
    Ties break toward the lowest stimulus index."""
    cfg = model.config
    size = image_size or cfg.input_shape[0]
    if layer is None:
        layer = len(model.blocks) - 1
    centers = bar_grid_centers(size)
    specs = [BarStimulus(orientation=o, length=bar_length, center=c)
             for c in centers for o in BAR_ORIENTATIONS]
    images = np.stack([render_bar(s, size) for s in specs])
    resp = probe_units(model, images, layer)[:, 0, :]   # (units, stimuli), t=1
    h, w = cfg.conv_output_shape()
    positions, orientations, mappable = [], [], []
    for u in range(resp.shape[0]):
        best = int(np.argmax(resp[u]))
        positions.append(specs[best].center)
        orientations.append(specs[best].orientation)
        mappable.append(bool(resp[u].any()))
    return RFMap(layer=layer, center=(h // 2, w // 2), positions=positions,
                 orientations=np.array(orientations), mappable=np.array(mappable))


def stability_mask(responses: np.ndarray, threshold: float = STABILITY_THRESHOLD):
    """True for units holding a response >= threshold at every iteration for at
    least one stimulus in the sweep. responses: (units, iterations, stimuli)."""
    return (responses.min(axis=1) >= threshold).any(axis=1)


def _curve_from(responses: np.ndarray, parameter, include) -> TuningCurve:
    """responses: (units, values); include: unit mask."""
    sel = responses[include]
    n = sel.shape[0]
    if n == 0:
        raise ValueError("no unit passes the stability filter")
    mean = sel.mean(axis=0)
    se = sel.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(sel.shape[1])
    return TuningCurve(parameter=np.asarray(parameter, dtype=float),
                       mean=mean, se=se, n_units=n)


def length_tuning(model: Model, rfmap: RFMap = None, image_size: int = None):
    """End-stopping test: preferred-orientation bars of increasing length at
    each unit's preferred position. Returns a dict with first/last-iteration
    curves, the raw per-unit responses, and the stability mask."""
    cfg = model.config
    size = image_size or cfg.input_shape[0]
    if rfmap is None:
        rfmap = map_receptive_fields(model, image_size=size)
    n_units = len(rfmap.orientations)
    per_unit = np.empty((n_units, cfg.iterations, len(BAR_LENGTHS)))
    for u in range(n_units):
        images = np.stack([
            render_bar(BarStimulus(orientation=rfmap.orientations[u],
                                   length=l, center=rfmap.positions[u]), size)
            for l in BAR_LENGTHS])
        per_unit[u] = probe_units(model, images, rfmap.layer)[u]
    stable = stability_mask(per_unit) & rfmap.mappable
    return {
        "parameter": np.array(BAR_LENGTHS, dtype=float),
        "first": _curve_from(per_unit[:, 0, :], BAR_LENGTHS, stable),
        "last": _curve_from(per_unit[:, -1, :], BAR_LENGTHS, stable),
        "per_unit": per_unit,
        "stable": stable,
    }


# a unit preferring bars at orientation theta prefers gratings whose stripes
# are parallel to them, i.e. whose variation axis is theta + 90 degrees
GRATING_PHASES = (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)


def _best_over_phases(model, rfmap, u, size, make_spec):
    """(iterations, values) responses maximized over grating phase."""
    cfg = model.config
    best = None
    for phase in GRATING_PHASES:
        images = np.stack([make_spec(v, phase) for v in make_spec.values])
        resp = probe_units(model, images, rfmap.layer)[u]
        best = resp if best is None else np.maximum(best, resp)
    return best


def optimal_frequencies(model: Model, rfmap: RFMap, image_size: int = None):
    """Per-unit optimal spatial frequency from full-image gratings aligned
    with the unit's preferred orientation (first-iteration responses,
    maximized over phase)."""
    size = image_size or model.config.input_shape[0]
    out = np.empty(len(rfmap.orientations))
    for u, ori in enumerate(rfmap.orientations):
        def spec(f, phase):
            return render_grating(GratingStimulus(
                spatial_frequency=f, orientation=ori + 90.0, phase=phase), size)
        spec.values = GRATING_FREQUENCIES
        resp = _best_over_phases(model, rfmap, u, size, spec)
        out[u] = GRATING_FREQUENCIES[int(np.argmax(resp[0]))]
    return out


def size_tuning(model: Model, rfmap: RFMap = None, image_size: int = None):
    """Surround-suppression test: gratings of increasing diameter at each
    unit's preferred position, orientation, and optimal frequency."""
    cfg = model.config
    size = image_size or cfg.input_shape[0]
    if rfmap is None:
        rfmap = map_receptive_fields(model, image_size=size)
    freqs = optimal_frequencies(model, rfmap, size)
    n_units = len(rfmap.orientations)
    per_unit = np.empty((n_units, cfg.iterations, len(GRATING_DIAMETERS)))
    for u in range(n_units):
        def spec(d, phase):
            return render_grating(GratingStimulus(
                spatial_frequency=freqs[u], diameter=d,
                orientation=rfmap.orientations[u] + 90.0, phase=phase,
                center=rfmap.positions[u]), size)
        spec.values = GRATING_DIAMETERS
        per_unit[u] = _best_over_phases(model, rfmap, u, size, spec)
    stable = stability_mask(per_unit) & rfmap.mappable
    return {
        "parameter": np.array(GRATING_DIAMETERS, dtype=float),
        "first": _curve_from(per_unit[:, 0, :], GRATING_DIAMETERS, stable),
        "last": _curve_from(per_unit[:, -1, :], GRATING_DIAMETERS, stable),
        "per_unit": per_unit,
        "stable": stable,
        "optimal_frequency": freqs,
    }


def temporal_dynamics(model: Model, image_size: int = None) -> np.ndarray:
    """Mean response per iteration over all full-image gratings (all
    orientations x all frequencies) and stability-passing units."""
    cfg = model.config
    size = image_size or cfg.input_shape[0]
    images = np.stack([
        render_grating(GratingStimulus(spatial_frequency=f, orientation=o), size)
        for o in BAR_ORIENTATIONS for f in GRATING_FREQUENCIES])
    resp = probe_units(model, images)   # (units, T, stimuli)
    stable = stability_mask(resp)
    if not stable.any():
        stable = np.ones(resp.shape[0], dtype=bool)
    return resp[stable].mean(axis=(0, 2))


def suppression_index(curve) -> float:
    """SI = (R_peak - R_largest) / R_peak for a nonnegative tuning curve."""
    values = curve.mean if isinstance(curve, TuningCurve) else np.asarray(curve, dtype=float)
    if len(values) < 2:
        raise ValueError("need at least two curve points")
    peak = values.max()
    if peak <= 0:
        raise ValueError("nonpositive peak response")
    return float((peak - values[-1]) / peak)


# ---------------------------------------------------------------------------
# constructed suppressive circuit

def _identity_bn(channels: int, gamma: float = 1.0) -> BatchNormParams:
    bn = BatchNormParams.create(channels)
    bn.gamma.data[...] = gamma
    bn.epsilon = 0.0
    return bn


def build_suppressive_circuit(image_size: int = 48, iterations: int = 5,
                              filter_gain: float = 24.0,
                              surround_strength: float = 2.0,
                              lateral_kernel_size: int = 25,
                              exclusion_radius: float = 8.0) -> Model:
    """Hand-built recurrent model whose lateral circuit produces end-stopping
    and surround suppression at later iterations but not at the first.

    One channel: a horizontal dark-bar detector feeding an RCPB whose
    feedforward kernel is an identity tap and whose lateral kernel is a
    purely inhibitory surround ring (zero near the center, so suppression
    grows with stimulus extent). Batchnorms are fixed to identity
    (eval-mode statistics 0/1), so responses are read directly.
    """
    cfg = ModelConfig(kind="recurrent", num_blocks=2, channels=1, num_neurons=1,
                      input_shape=(image_size, image_size),
                      iterations=iterations, readout_mode="no_avg",
                      later_kernel=lateral_kernel_size, seed=0)
    model = build_model(cfg)

    # input normalization: map [0,1] pixels to zero-mean around mid-gray
    model.input_bn.running_mean[...] = 0.5
    model.input_bn.running_var[...] = 1.0
    model.input_bn.epsilon = 0.0

    # first layer: zero-sum horizontal dark-bar detector (negative center rows
    # flanked by positive rows), so a uniform background drives it to zero
    kern = np.zeros((9, 9))
    kern[4, :] = -2.0
    kern[2, :] = 1.0
    kern[6, :] = 1.0
    kern /= np.abs(kern).sum()
    model.blocks[0].kernel.data[0, 0] = filter_gain * kern
    model.blocks[0].bn = _identity_bn(1)

    blk = model.blocks[1]
    k = lateral_kernel_size
    c = k // 2
    ff = np.zeros((1, 1, k, k))
    ff[0, 0, c, c] = 1.0
    blk.ff_kernel.data[...] = ff
    yy, xx = np.mgrid[:k, :k]
    ring = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) > exclusion_radius
    lat = np.zeros((1, 1, k, k))
    lat[0, 0][ring] = -surround_strength / ring.sum()
    blk.lateral_kernel.data[...] = lat
    for t in range(iterations):
        blk.bns[t] = _identity_bn(1)
    model.set_requires_grad(False)
    return model
