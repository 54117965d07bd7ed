import json

import numpy as np
import pytest

from segood import ClassRegistry, LabelMask, SoftmaxTensor, write_label_mask, write_softmax_tensor
from segood._util import canonical_json


def random_simplex(rng, h, w, k):
    """Random (H, W, K) float32 softmax-like tensor: positive, rows sum to 1."""
    raw = rng.exponential(1.0, size=(h, w, k))
    raw /= raw.sum(axis=2, keepdims=True)
    return raw.astype(np.float32)


def as_tensor(data):
    data = np.ascontiguousarray(data, dtype=np.float32)
    data.flags.writeable = False
    return SoftmaxTensor(data=data)


def as_mask(data, ignore_id=255):
    data = np.ascontiguousarray(data, dtype=np.int32)
    data.flags.writeable = False
    return LabelMask(data=data, ignore_id=ignore_id)


def make_registry(k, ignore_id=255):
    return ClassRegistry(class_names=tuple(f"c{i}" for i in range(k)), ignore_id=ignore_id)


def one_hot_image(labels, k, confidence=0.9):
    """Tensor whose argmax equals `labels` everywhere."""
    labels = np.asarray(labels)
    h, w = labels.shape
    data = np.full((h, w, k), (1.0 - confidence) / (k - 1), dtype=np.float32)
    for c in range(k):
        data[labels == c, c] = confidence
    return data


def write_dataset(root, registry, tensors, masks, name="testset", location_tag="unit"):
    """Write tensors/masks/manifest under root, return the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, (t, m) in enumerate(zip(tensors, masks)):
        sid = f"s{i:03d}"
        write_softmax_tensor(root / f"{sid}.npy", t)
        write_label_mask(root / f"{sid}.png", np.asarray(m, dtype=np.int32), registry)
        samples.append({"id": sid, "tensor": f"{sid}.npy", "label": f"{sid}.png"})
    doc = {
        "schema": 1,
        "name": name,
        "location_tag": location_tag,
        "registry": registry.to_dict(),
        "samples": samples,
    }
    path = root / "manifest.json"
    path.write_text(canonical_json(doc) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
