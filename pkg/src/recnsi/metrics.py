"""Prediction-quality metrics for trial-based neural recordings.

The headline score is the normalized explained signal variance CC_norm^2 =
(CC_raw / CC_max)^2, where CC_max estimates the ceiling a noiseless predictor
could reach given the trial-to-trial variability of the recordings.
"""

import csv

import numpy as np


def cc_raw(pred: np.ndarray, resp: np.ndarray) -> np.ndarray:
    """Per-neuron Pearson correlation between (S, N) predictions and
    trial-averaged responses."""
    pred = np.asarray(pred, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    if pred.shape != resp.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {resp.shape}")
    pc = pred - pred.mean(axis=0)
    rc = resp - resp.mean(axis=0)
    denom = np.sqrt((pc * pc).sum(axis=0) * (rc * rc).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        cc = (pc * rc).sum(axis=0) / denom
    cc[denom == 0.0] = np.nan
    return cc


def cc_max(trials: np.ndarray) -> np.ndarray:
    """Per-neuron response-reliability ceiling from (K, S, N) single trials.

    CC_max = sqrt[(Var_s(sum_k r_ks) - sum_k Var_s(r_ks)) / (K(K-1) Var_s(rbar))]
    with unbiased sample variances over stimuli. Neurons whose numerator is
    not positive are unreliable; their ceiling is returned as NaN.
    """
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3:
        raise ValueError("expected (trials, stimuli, neurons)")
    K = trials.shape[0]
    if K < 2:
        raise ValueError("need at least two trials per stimulus")
    var_of_sum = trials.sum(axis=0).var(axis=0, ddof=1)
    sum_of_var = trials.var(axis=1, ddof=1).sum(axis=0)
    var_mean = trials.mean(axis=0).var(axis=0, ddof=1)
    num = var_of_sum - sum_of_var
    denom = K * (K - 1) * var_mean
    out = np.full(trials.shape[2], np.nan)
    ok = (num > 0) & (denom > 0)
    out[ok] = np.sqrt(num[ok] / denom[ok])
    # trials that repeat bitwise have a ceiling of exactly 1 by definition;
    # avoid returning 1 - eps from rounding in the variance identity
    identical = (trials == trials[:1]).all(axis=(0, 1)) & (var_mean > 0)
    out[identical] = 1.0
    return out


def cc_norm2(pred: np.ndarray, trials: np.ndarray) -> np.ndarray:
    """Per-neuron normalized explained variance; NaN for unreliable neurons."""
    ceiling = cc_max(trials)
    raw = cc_raw(pred, trials.mean(axis=0))
    with np.errstate(invalid="ignore"):
        return (raw / ceiling) ** 2


def dataset_score(model, dataset, split: str = "test"):
    """Mean CC_norm^2 of a model on a dataset split, excluding unreliable
    neurons. The reliability ceiling uses trials from all stimuli, not just
    the scored split. Returns (mean score, per-neuron table dict)."""
    from .models import predict

    images, trials = dataset.split_arrays(split)
    pred = predict(model, images)
    ceiling = cc_max(dataset.all_trials())
    raw = cc_raw(pred, trials.mean(axis=0))
    with np.errstate(invalid="ignore"):
        norm2 = (raw / ceiling) ** 2
    reliable = ~np.isnan(ceiling)
    mean = float(np.nanmean(norm2[reliable])) if reliable.any() else float("nan")
    table = {"cc_raw": raw, "cc_max": ceiling, "cc_norm2": norm2,
             "reliable": reliable}
    return mean, table


def write_per_neuron_csv(path, table):
    n = len(table["cc_raw"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neuron", "cc_raw", "cc_max", "cc_norm2", "reliable"])
        for i in range(n):
            w.writerow([i,
                        f"{table['cc_raw'][i]:.6f}",
                        f"{table['cc_max'][i]:.6f}",
                        f"{table['cc_norm2'][i]:.6f}",
                        int(table["reliable"][i])])
