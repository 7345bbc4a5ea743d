"""Dataset container, preprocessing, splitting, and the synthetic teacher
generator that stands in for trial-based neural recordings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import container
from .autodiff import Tensor
from .models import Model, ModelConfig, build_model, infer, predict

DATASET_FORMAT = "recnsi-dataset-v1"


@dataclass
class NeuralDataset:
    images: np.ndarray       # (S, H, W) float32 in [0, 1]
    responses: np.ndarray    # (S, N, K) float32 single-trial responses
    neuron_meta: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)  # name -> int64 stimulus indices

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.responses = np.asarray(self.responses, dtype=np.float32)
        if self.images.ndim != 3 or self.responses.ndim != 3:
            raise ValueError("images must be (S,H,W) and responses (S,N,K)")
        if self.images.shape[0] != self.responses.shape[0]:
            raise ValueError("images and responses disagree on stimulus count")
        if not np.isfinite(self.images).all() or not np.isfinite(self.responses).all():
            raise ValueError("non-finite values in dataset")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}

    @property
    def num_stimuli(self):
        return self.images.shape[0]

    @property
    def num_neurons(self):
        return self.responses.shape[1]

    @property
    def num_trials(self):
        return self.responses.shape[2]

    def all_trials(self) -> np.ndarray:
        """(K, S, N) float64 view of the trial structure."""
        return self.responses.transpose(2, 0, 1).astype(np.float64)

    def split_arrays(self, name: str):
        """(images (s,H,W), trials (K,s,N)) for one split."""
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}")
        idx = self.splits[name]
        return (self.images[idx].astype(np.float64),
                self.responses[idx].transpose(2, 0, 1).astype(np.float64))

    def validate_splits(self):
        if not self.splits:
            raise ValueError("dataset has no splits")
        all_idx = np.concatenate([self.splits[k] for k in sorted(self.splits)])
        if len(np.unique(all_idx)) != len(all_idx):
            raise ValueError("splits overlap")
        if sorted(all_idx) != list(range(self.num_stimuli)):
            raise ValueError("splits do not cover all stimuli")


def save_dataset(dataset: NeuralDataset, path):
    meta = {"format": DATASET_FORMAT, "neuron_meta": dataset.neuron_meta,
            "split_names": sorted(dataset.splits)}
    arrays = {"images": dataset.images, "responses": dataset.responses}
    for name in sorted(dataset.splits):
        arrays[f"split_{name}"] = dataset.splits[name]
    container.save(path, meta, arrays)


def load_dataset(path, truncate_trials: int = None) -> NeuralDataset:
    meta, arrays = container.load(path)
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a dataset file")
    responses = arrays["responses"]
    if truncate_trials is not None and responses.shape[2] > truncate_trials:
        responses = responses[:, :, :truncate_trials]
    splits = {name: arrays[f"split_{name}"] for name in meta.get("split_names", [])}
    return NeuralDataset(images=arrays["images"], responses=responses,
                         neuron_meta=meta.get("neuron_meta", {}), splits=splits)


# ---------------------------------------------------------------------------
# preprocessing and splitting

def _center_crop(images, size):
    h, w = images.shape[1:]
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image size {(h, w)}")
    top, left = (h - size) // 2, (w - size) // 2
    return images[:, top:top + size, left:left + size]


def _area_downsample(images, target):
    size = images.shape[1]
    if size % target:
        # trim to the largest multiple of the target before block averaging
        images = _center_crop(images, (size // target) * target)
        size = images.shape[1]
    f = size // target
    s = images.shape[0]
    return images.reshape(s, target, f, target, f).mean(axis=(2, 4))


def preprocess(dataset: NeuralDataset, target_size: int) -> NeuralDataset:
    """Center-crop to square, area-average downsample to target_size, and scale
    each neuron by the standard deviation of its trial-mean training responses."""
    h, w = dataset.images.shape[1:]
    images = _center_crop(dataset.images.astype(np.float64), min(h, w))
    if target_size > images.shape[1]:
        raise ValueError("target size larger than source")
    if target_size < images.shape[1]:
        images = _area_downsample(images, target_size)
    dataset.validate_splits()
    train_means = dataset.responses[dataset.splits["train"]].mean(axis=2)
    std = train_means.std(axis=0, ddof=1)
    std[std == 0] = 1.0
    responses = dataset.responses / std[None, :, None]
    return NeuralDataset(images=images.astype(np.float32),
                         responses=responses.astype(np.float32),
                         neuron_meta=dataset.neuron_meta,
                         splits={k: v.copy() for k, v in dataset.splits.items()})


def split(dataset: NeuralDataset, fractions=(0.64, 0.16, 0.20), seed=0) -> NeuralDataset:
    """Deterministic shuffled train/val/test split by stimulus."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    s = dataset.num_stimuli
    order = np.random.default_rng(seed).permutation(s)
    n_train = int(round(fractions[0] * s))
    n_val = int(round(fractions[1] * s))
    splits = {"train": order[:n_train],
              "val": order[n_train:n_train + n_val],
              "test": order[n_train + n_val:]}
    if any(len(v) == 0 for v in splits.values()):
        raise ValueError("a split is empty; too few stimuli for these fractions")
    out = dataclasses.replace(dataset, splits=splits)
    out.validate_splits()
    return out


def training_subset(dataset: NeuralDataset, fraction: float) -> NeuralDataset:
    """Keep the first `fraction` of the (already shuffled) training indices, so
    subsets at increasing fractions are nested."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    train = dataset.splits["train"]
    k = max(1, int(round(fraction * len(train))))
    splits = dict(dataset.splits)
    splits["train"] = train[:k]
    return dataclasses.replace(dataset, splits=splits)


# ---------------------------------------------------------------------------
# synthetic teacher generator

@dataclass
class TeacherSpec:
    config: ModelConfig
    lateral_template: str = "center_surround"   # 'zero' | 'center_surround'
    excitation_gain: float = 1.0
    inhibition_gain: float = 0.5
    noise: tuple = ("poisson", 4.0)             # ('poisson', rate_scale) | ('gaussian', sigma)
    num_stimuli: int = 2000
    num_trials: int = 8
    image_source: str = "filtered_noise"        # 'filtered_noise' | 'checkerboard'
    image_cutoff: float = 6.0                   # low-pass cutoff, cycles/image
    mean_rate: float = 5.0

    def __post_init__(self):
        if self.config.kind != "recurrent":
            raise ValueError("teacher must be recurrent")
        if self.lateral_template not in ("zero", "center_surround"):
            raise ValueError(f"unknown lateral template {self.lateral_template!r}")
        if self.noise[0] not in ("poisson", "gaussian", "none"):
            raise ValueError(f"unknown noise kind {self.noise[0]!r}")


def center_surround_kernel(channels: int, k: int, excitation: float,
                           inhibition: float) -> np.ndarray:
    """Per-channel lateral kernel: excitatory center, inhibitory surround ring."""
    kern = np.zeros((channels, channels, k, k))
    c = k // 2
    ring = np.ones((k, k), dtype=bool)
    ring[c, c] = False
    for ch in range(channels):
        kern[ch, ch, c, c] = excitation
        kern[ch, ch][ring] = -inhibition / ring.sum()
    return kern


def render_images(source: str, n: int, size: int, rng, cutoff: float = 6.0) -> np.ndarray:
    if source == "filtered_noise":
        noise = rng.standard_normal((n, size, size))
        fy = np.fft.fftfreq(size)[:, None] * size
        fx = np.fft.fftfreq(size)[None, :] * size
        keep = np.sqrt(fy * fy + fx * fx) <= cutoff
        imgs = np.fft.ifft2(np.fft.fft2(noise) * keep).real
        lo = imgs.min(axis=(1, 2), keepdims=True)
        hi = imgs.max(axis=(1, 2), keepdims=True)
        return (imgs - lo) / np.maximum(hi - lo, 1e-12)
    if source == "checkerboard":
        imgs = np.empty((n, size, size))
        yy, xx = np.mgrid[:size, :size]
        for i in range(n):
            period = int(rng.integers(2, 9))
            oy, ox = rng.integers(0, period, size=2)
            imgs[i] = ((((yy + oy) // period) + ((xx + ox) // period)) % 2).astype(float)
        return imgs
    raise ValueError(f"unknown image source {source!r}")


def _warm_up_batchnorm(model: Model, images: np.ndarray, passes: int = 2,
                       batch_size: int = 128):
    """Populate batchnorm running statistics by streaming the stimulus set
    through the model in train mode (no parameter updates)."""
    from . import autodiff as ad
    with ad.no_grad():
        for _ in range(passes):
            for i in range(0, len(images), batch_size):
                x = Tensor(images[i:i + batch_size][:, None, :, :].astype(np.float64))
                infer(model, x, bn_mode="train")


def generate_teacher_dataset(spec: TeacherSpec, seed: int = 0):
    """Render stimuli, run a known recurrent teacher for mean rates, and draw
    noisy trials. Returns (dataset, teacher model); the teacher's eval-mode
    predictions equal the dataset's underlying mean rates."""
    rng = np.random.default_rng(seed)
    size = spec.config.input_shape[0]
    images = render_images(spec.image_source, spec.num_stimuli, size, rng,
                           spec.image_cutoff)

    teacher = build_model(spec.config)
    if spec.lateral_template == "zero":
        for blk in teacher.blocks[1:]:
            blk.lateral_kernel.data[...] = 0.0
    else:
        kern = center_surround_kernel(spec.config.channels,
                                      spec.config.later_kernel,
                                      spec.excitation_gain, spec.inhibition_gain)
        for blk in teacher.blocks[1:]:
            blk.lateral_kernel.data[...] = kern
    _warm_up_batchnorm(teacher, images)

    rates = predict(teacher, images)
    if not np.isfinite(rates).all():
        raise FloatingPointError("teacher produced non-finite rates")
    mean = rates.mean()
    if mean > 0 and spec.mean_rate:
        # rates are recomputed after scaling, so stored mean rates always
        # equal the calibrated teacher's own eval-mode predictions
        gain = spec.mean_rate / mean
        teacher.readout.feature_weights.data *= gain
        teacher.readout.bias.data *= gain
        rates = predict(teacher, images)

    kind, param = spec.noise
    K = spec.num_trials
    if kind == "poisson":
        trials = rng.poisson(param * np.maximum(rates, 0.0),
                             size=(K,) + rates.shape) / param
    elif kind == "gaussian":
        trials = rates[None] + param * rng.standard_normal((K,) + rates.shape)
    else:
        trials = np.broadcast_to(rates, (K,) + rates.shape).copy()

    dataset = NeuralDataset(
        images=images.astype(np.float32),
        responses=trials.transpose(1, 2, 0).astype(np.float32),
        neuron_meta={"ids": list(range(spec.config.num_neurons)),
                     "area": ["synthetic"] * spec.config.num_neurons})
    dataset = split(dataset, seed=seed)
    return dataset, teacher
