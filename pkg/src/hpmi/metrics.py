"""Clean accuracy and attack success rate on paired clean/triggered sets."""

import numpy as np

from .transformer import Dataset, TransformerCheckpoint, predict


def model_fn(model):
    """Turn a checkpoint or a logits callable into ``inputs -> logits`` (numpy)."""
    if isinstance(model, TransformerCheckpoint):
        return lambda x: predict(model, x)
    return lambda x: np.asarray(model(np.asarray(x, dtype=np.float64)))


def metrics_from_predictions(pred: np.ndarray, data: Dataset, target: int) -> dict:
    """CA over clean members; ASR over triggered members whose true label is not ``target``."""
    pred = np.asarray(pred)
    clean = ~data.poisoned
    attack = data.poisoned & (data.labels != target)
    ca = float(np.mean(pred[clean] == data.labels[clean])) if clean.any() else float("nan")
    asr = float(np.mean(pred[attack] == target)) if attack.any() else float("nan")
    return {"CA": ca, "ASR": asr}


def compute_metrics(model, paired: Dataset, target: int) -> dict:
    pred = model_fn(model)(paired.inputs).argmax(axis=1)
    return metrics_from_predictions(pred, paired, target)
