"""Whole-scene inference by covering the cloud with overlapping spheres."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import nncore as nn
from .errors import ContractError, TargetTooLarge
from .spatial import build_index, nearest, query

WEIGHT_FLOOR = 1e-3


@dataclass
class SphereJob:
    centre: int
    members: np.ndarray  # ascending cloud indices, length N_1
    centre_xyz: np.ndarray


def plan_spheres(xyz, n1: int, seed=0) -> List[SphereJob]:
    """Greedy cover: draw an uncovered point, take its ``n1`` nearest, repeat."""
    xyz = np.asarray(getattr(xyz, "xyz", xyz), dtype=np.float64)
    n = xyz.shape[0]
    if n < n1:
        raise TargetTooLarge(f"cloud has {n} points, a sphere needs {n1}")
    rng = np.random.default_rng(seed)
    index = build_index(xyz)
    uncovered = np.ones(n, dtype=bool)
    jobs = []
    while uncovered.any():
        pool = np.flatnonzero(uncovered)
        centre = int(pool[rng.integers(pool.size)])
        members, _ = query(index, xyz[centre], n1)
        members = np.sort(members[0])
        uncovered[members] = False
        jobs.append(SphereJob(centre, members, xyz[centre].copy()))
    return jobs


def vote_weights(xyz, job: SphereJob) -> np.ndarray:
    """``1 - d / d_max`` inside the sphere, floored at ``WEIGHT_FLOOR``."""
    d = np.sqrt(((np.asarray(xyz)[job.members] - job.centre_xyz) ** 2).sum(axis=1))
    dmax = d.max()
    w = 1.0 - d / dmax if dmax > 0 else np.ones_like(d)
    return np.maximum(w, WEIGHT_FLOOR)


def softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fuse_votes(n: int, xyz, jobs: Sequence[SphereJob], probs: Sequence[np.ndarray],
               weights: Optional[Sequence[np.ndarray]] = None):
    """Sum weighted class distributions per point; ties go to the lower class id.

    Contributions are added in job order after sorting jobs by centre index,
    so the result does not depend on the order jobs finished in.
    Returns ``(predictions, accumulated, total_weight)``.
    """
    if len(jobs) != len(probs):
        raise ContractError("one probability array per job")
    if weights is None:
        weights = [vote_weights(xyz, j) for j in jobs]
    k = probs[0].shape[1] if probs else 0
    acc = np.zeros((n, k))
    wsum = np.zeros(n)
    order = sorted(range(len(jobs)), key=lambda i: (jobs[i].centre, i))
    for i in order:
        job, p, w = jobs[i], np.asarray(probs[i]), np.asarray(weights[i])
        if p.shape != (job.members.size, k):
            raise ContractError("probability rows must match sphere members")
        acc[job.members] += p * w[:, None]
        wsum[job.members] += w
    if np.any(wsum == 0):
        missing = int(np.count_nonzero(wsum == 0))
        raise ContractError(f"{missing} points received no vote")
    return acc.argmax(axis=1), acc, wsum


def upsample_predictions(processed_xyz, original_xyz, predictions) -> np.ndarray:
    """Each original point takes the label of its nearest processed point."""
    processed_xyz = np.asarray(processed_xyz, dtype=np.float64).reshape(-1, 3)
    if processed_xyz.shape[0] == 0:
        raise ContractError("no processed points to upsample from")
    predictions = np.asarray(predictions)
    if predictions.shape[0] != processed_xyz.shape[0]:
        raise ContractError("one prediction per processed point")
    return predictions[nearest(build_index(processed_xyz), original_xyz)]


def sphere_probabilities(model, scene, job: SphereJob, mode="final", seed=0):
    """Softmax outputs for every member of ``job`` (points outside P^(1) are absent)."""
    from .train import sphere_input

    inp = sphere_input(model, scene, job.centre, job.members, seed)
    with nn.no_grad():
        if mode == "tco":
            logits = model.tco_logits(inp)
        elif mode == "final":
            logits = model.final_logits(inp)
        else:
            raise ValueError(f"unknown inference mode {mode!r}")
    return inp.source, softmax_np(logits.data)


def predict_scene(model, scene, seed=0, mode="final", threads=1):
    """Predictions for every point of ``scene``. Returns ``(labels, jobs)``.

    Sphere size equals N_1, so P^(1) is the whole sphere and every member votes.
    """
    jobs = plan_spheres(scene.cloud.xyz, model.cfg.counts[0], seed)
    seeds = [seed + i for i in range(len(jobs))]

    def run(i):
        src, p = sphere_probabilities(model, scene, jobs[i], mode, seeds[i])
        order = np.argsort(src)
        return p[order]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            probs = list(pool.map(run, range(len(jobs))))
    else:
        probs = [run(i) for i in range(len(jobs))]
    pred, _, _ = fuse_votes(scene.n, scene.cloud.xyz, jobs, probs)
    return pred, jobs


def infer_cloud(model, cloud, thresholds, seed=0, mode="final", threads=1, preprocess=True):
    """Preprocess ``cloud``, predict on what remains, and carry labels back to every point.

    Returns ``(predictions on cloud, scene used for prediction)``.
    """
    from .train import Scene

    scene = Scene.build(cloud, thresholds, preprocess=preprocess)
    pred, _ = predict_scene(model, scene, seed=seed, mode=mode, threads=threads)
    return upsample_predictions(scene.cloud.xyz, cloud.xyz, pred), scene
