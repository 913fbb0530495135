"""Synthetic multimodal tasks, dataset generation and dataset files.

Three single-answer tasks share one vocabulary:

* visual-lookup — the descriptor's slot section one-hot-encodes one of 32
  answer tokens; the response copies that token. Unanswerable without the
  projector pathway.
* visual-count — the descriptor's marker section holds 8 components at +1
  (marked) or -1 (unmarked); the response is the count token (0..8). The
  bipolar encoding keeps the descriptor norm constant, so the count survives
  the decoder's RMS normalization as a linear functional of direction.
* prompt-echo — pure-language control: the response repeats the prompt
  payload. Echo descriptors carry a random marker pattern with the same
  statistics as visual-count, so the visual stream is active but irrelevant.

Dataset files store the semantic fields only (slot/markers/payload + token
ids); descriptors are rebuilt deterministically at load time, which keeps the
files small, human-readable and byte-stable.
"""

from __future__ import annotations

import json

import numpy as np

from .model import Triplet
from .tensor import ParameterError

N_ANSWERS = 32
N_MARKERS = 8

ANSWER_TOKENS = tuple(range(N_ANSWERS))
LOOKUP_MARKER = N_ANSWERS
COUNT_MARKER = N_ANSWERS + 1
ECHO_MARKER = N_ANSWERS + 2
MIN_VOCAB = N_ANSWERS + 3

DESCRIPTOR_DIM = N_ANSWERS + N_MARKERS

TASKS = ("visual-lookup", "visual-count", "prompt-echo")


def answer_support(task):
    """Token ids a correct answer can take, per task."""
    if task in ("visual-lookup", "prompt-echo"):
        return tuple(range(N_ANSWERS))
    if task == "visual-count":
        return tuple(range(N_MARKERS + 1))
    raise ParameterError(f"unknown task {task!r}")


def _marker_section(markers):
    x = np.full(N_MARKERS, -1.0, dtype=np.float32)
    for m in markers:
        x[int(m)] = 1.0
    return x


def encode_descriptor(task, meta):
    """Rebuild the synthetic image descriptor from an item's semantic fields."""
    x = np.zeros(DESCRIPTOR_DIM, dtype=np.float32)
    if task == "visual-lookup":
        x[int(meta["slot"])] = 1.0
    elif task == "visual-count" or task == "prompt-echo":
        x[N_ANSWERS:] = _marker_section(meta["markers"])
    else:
        raise ParameterError(f"unknown task {task!r}")
    return x


def expected_answer(task, meta, prompt=None):
    """The unique correct answer token implied by (descriptor, prompt) semantics."""
    if task == "visual-lookup":
        return int(meta["slot"])
    if task == "visual-count":
        return len(meta["markers"])
    if task == "prompt-echo":
        return int(meta["payload"])
    raise ParameterError(f"unknown task {task!r}")


def _sample_markers(rng):
    count = int(rng.integers(0, N_MARKERS + 1))
    return sorted(int(m) for m in rng.choice(N_MARKERS, size=count, replace=False))


def _sample_item(task, rng):
    if task == "visual-lookup":
        slot = int(rng.integers(0, N_ANSWERS))
        meta = {"slot": slot}
        prompt = (LOOKUP_MARKER,)
    elif task == "visual-count":
        meta = {"markers": _sample_markers(rng)}
        prompt = (COUNT_MARKER,)
    elif task == "prompt-echo":
        payload = int(rng.integers(0, N_ANSWERS))
        meta = {"payload": payload, "markers": _sample_markers(rng)}
        prompt = (ECHO_MARKER, payload)
    else:
        raise ParameterError(f"unknown task {task!r}")
    answer = expected_answer(task, meta)
    return Triplet(x_v=encode_descriptor(task, meta), x_p=prompt, x_r=(answer,),
                   task=task, meta=meta)


def generate_dataset(task_mix=TASKS, n=1920, seed=0, eval_fraction=0.2):
    """Draw n items split evenly over the task mix; returns (train, eval) pools.

    The split is index-disjoint and deterministic under the seed. Small task
    spaces (prompt-echo has 32 distinct payloads) necessarily repeat content.
    """
    if n < 10:
        raise ParameterError(f"dataset size must be >= 10, got {n}")
    if not task_mix:
        raise ParameterError("task mix must be nonempty")
    for task in task_mix:
        if task not in TASKS:
            raise ParameterError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    per_task = n // len(task_mix)
    train, evals = [], []
    for task in task_mix:
        items = [_sample_item(task, rng) for _ in range(per_task)]
        n_eval = max(1, int(round(per_task * eval_fraction)))
        evals.extend(items[:n_eval])
        train.extend(items[n_eval:])
    return train, evals


def _item_to_record(item):
    return {
        "task": item.task,
        "meta": item.meta,
        "prompt": list(item.x_p),
        "response": list(item.x_r),
    }


def _record_to_item(rec):
    return Triplet(
        x_v=encode_descriptor(rec["task"], rec["meta"]),
        x_p=tuple(rec["prompt"]),
        x_r=tuple(rec["response"]),
        task=rec["task"],
        meta=rec["meta"],
    )


def save_dataset(path, train, evals, seed=None):
    payload = {
        "version": 1,
        "seed": seed,
        "descriptor_dim": DESCRIPTOR_DIM,
        "train": [_item_to_record(it) for it in train],
        "eval": [_item_to_record(it) for it in evals],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("descriptor_dim") != DESCRIPTOR_DIM:
        raise ParameterError(
            f"dataset descriptor width {payload.get('descriptor_dim')} does not match "
            f"this build's {DESCRIPTOR_DIM}")
    train = [_record_to_item(r) for r in payload["train"]]
    evals = [_record_to_item(r) for r in payload["eval"]]
    return train, evals


def draw_calibration(pool, n=10, seed=0):
    """Seeded calibration subset of the training pool (default 10 samples)."""
    if n < 1:
        raise ParameterError("calibration size must be >= 1")
    if n > len(pool):
        raise ParameterError(f"calibration size {n} exceeds pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pool))[:n]
    return [pool[i] for i in sorted(idx)]
