"""Standard (output-head) and prototype-based few-shot inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RFFModel, forward_joint


@dataclass
class PrototypeSet:
    classes: np.ndarray  # sorted class labels
    vectors: np.ndarray  # (n_classes, joint_dim)
    counts: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class FewShotProtocol:
    n_shot: int = 5
    n_query: int = 30
    repeats: int = 30
    seed: int = 0


def predict(model: RFFModel, frames) -> np.ndarray:
    """Argmax of the output-head logits; ties go to the lowest class index."""
    _, logits = forward_joint(model, frames)
    return np.argmax(logits, axis=1)


def prototypes_from_embeddings(z: np.ndarray, labels) -> PrototypeSet:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) == 0:
        raise ValueError("support set is empty")
    vecs = np.stack([z[labels == c].mean(axis=0) for c in classes])
    counts = np.array([np.sum(labels == c) for c in classes])
    return PrototypeSet(classes, vecs, counts)


def build_prototypes(model: RFFModel, support_frames, support_labels) -> PrototypeSet:
    """Per-class mean of joint representations over the support frames."""
    z, _ = forward_joint(model, support_frames)
    return prototypes_from_embeddings(z, support_labels)


def nearest_prototype(z: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    z = np.atleast_2d(z)
    if z.shape[1] != protos.dim:
        raise ValueError(f"representation dim {z.shape[1]} != prototype dim {protos.dim}")
    dist = np.sqrt(((z[:, None, :] - protos.vectors[None, :, :]) ** 2).sum(axis=-1))
    # argmax of negative distance; np.argmax takes the first (lowest class) on ties
    return protos.classes[np.argmax(-dist, axis=1)]


def fewshot_predict(model: RFFModel, protos: PrototypeSet, frames) -> np.ndarray:
    z, _ = forward_joint(model, frames)
    return nearest_prototype(z, protos)


def sample_episode(labels: np.ndarray, classes, n_shot: int, n_query: int, rng: np.random.Generator):
    """Disjoint support/query index arrays with n_shot and n_query frames per class."""
    support, query = [], []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        if len(pool) < n_shot + n_query:
            raise ValueError(f"class {c} has {len(pool)} frames; episode needs {n_shot + n_query}")
        pick = rng.choice(pool, size=n_shot + n_query, replace=False)
        support.append(pick[:n_shot])
        query.append(pick[n_shot:])
    return np.concatenate(support), np.concatenate(query)


def fewshot_accuracy(z: np.ndarray, labels: np.ndarray, protocol: FewShotProtocol, stream: int = 0):
    """Per-episode accuracies over ``protocol.repeats`` freshly sampled episodes."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    accs = []
    for r in range(protocol.repeats):
        rng = np.random.default_rng([protocol.seed, stream, r])
        s, q = sample_episode(labels, classes, protocol.n_shot, protocol.n_query, rng)
        protos = prototypes_from_embeddings(z[s], labels[s])
        accs.append(float(np.mean(nearest_prototype(z[q], protos) == labels[q])))
    return np.array(accs)


def evaluate(model: RFFModel, dataset, mode: str = "standard", protocol: FewShotProtocol | None = None) -> dict:
    """Accuracy per domain.

    ``standard`` scores the output head on every frame.  ``fewshot`` runs
    seeded episodes drawn from each domain's own frames and reports the mean
    and standard deviation over repeats.
    """
    z, logits = forward_joint(model, dataset)
    results = {}
    for d in np.unique(dataset.domain_labels):
        mask = dataset.domain_labels == d
        name = dataset.domains[d]
        if mode == "standard":
            acc = float(np.mean(np.argmax(logits[mask], axis=1) == dataset.device_labels[mask]))
            results[name] = {"accuracy": acc, "frames": int(mask.sum())}
        elif mode == "fewshot":
            protocol = protocol or FewShotProtocol()
            accs = fewshot_accuracy(z[mask], dataset.device_labels[mask], protocol, stream=int(d))
            results[name] = {"accuracy": float(accs.mean()), "std": float(accs.std()),
                             "n_shot": protocol.n_shot, "n_query": protocol.n_query,
                             "repeats": protocol.repeats}
        else:
            raise ValueError(f"unknown evaluation mode {mode!r}")
    return results
