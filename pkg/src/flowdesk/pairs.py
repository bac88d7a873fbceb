"""
Preference-pair files.

A pairs file is JSON lines, one pair per line::

    {"prompt": "A", "win": {"char": "A"}, "lose": {"pgm": "lose/0000.pgm"}}

``prompt`` is a task prompt label (``"A"`` for the glyph task,
``"A:invert"`` for the edit task).  An image reference is either
``{"char": c}``, the golden target of the prompt rendered with character
``c``, or ``{"pgm": path}``, a graymap relative to the pairs file.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ParseError
from .net import Condition
from .preference import PreferencePair
from .tasks import read_pgm

__all__ = [
    "PairRecord",
    "pair_batch",
    "read_pairs",
    "synthetic_pairs",
    "write_pairs",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PairRecord:
    """
    One resolved preference pair.

    ``win`` and ``lose`` are canvases; ``condition`` is the condition canvas
    of an edit prompt.
    """

    label: str
    tokens: np.ndarray
    condition: np.ndarray
    win: np.ndarray
    lose: np.ndarray


def _resolve_image(task, label, ref, base_dir):
    if not isinstance(ref, dict) or len(ref) != 1:
        raise ValueError(
            f"image reference must be {{'char': c}} or {{'pgm': path}}, got {ref!r}"
        )
    [(kind, value)] = ref.items()
    if kind == "char":
        return task.target(label, value)
    if kind == "pgm":
        path = os.path.join(base_dir, str(value))
        if not os.path.isfile(path):
            raise ValueError(f"graymap {value!r} not found")
        try:
            return read_pgm(path)
        except OSError as err:
            raise ValueError(f"graymap {value!r} is unreadable: {err}") from err
    raise ValueError(f"unknown image reference kind {kind!r}")


def read_pairs(path, task):
    """
    Parse and resolve a pairs file.

    Returns
    -------
    list of PairRecord

    Raises
    ------
    ParseError
        Naming the first malformed line.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fd:
        for lineno, line in enumerate(fd, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                if not isinstance(entry, dict):
                    raise ValueError("a pair must be a JSON object")
                missing = {"prompt", "win", "lose"} - set(entry)
                if missing:
                    raise ValueError(f"missing keys {sorted(missing)}")
                label, tokens, condition = task.prompt(entry["prompt"])
                win = _resolve_image(task, label, entry["win"], base_dir)
                lose = _resolve_image(task, label, entry["lose"], base_dir)
                if win.shape != lose.shape:
                    raise ValueError(
                        f"win {win.shape} and lose {lose.shape} images differ in shape"
                    )
                if condition is not None and condition.shape != win.shape:
                    raise ValueError(
                        f"images of shape {win.shape} do not match the condition "
                        f"{condition.shape}"
                    )
            except (ValueError, KeyError) as err:
                raise ParseError(path, lineno, str(err)) from err
            records.append(PairRecord(label, tokens, condition, win, lose))
    logger.info("Read %d preference pairs from %s", len(records), path)
    return records


def write_pairs(path, entries):
    """Write pair dicts (``prompt``, ``win``, ``lose``) as JSON lines."""
    with open(path, "w", encoding="utf-8") as fd:
        for entry in entries:
            fd.write(json.dumps(entry, sort_keys=True) + "\n")


def synthetic_pairs(task, rng):
    """
    One separable pair per prompt: the prompt's own golden image wins and
    the golden image of another random character loses.
    """
    charset = task.spec.charset
    entries = []
    for label, _, _ in task.prompts():
        char = label.split(":")[0]
        others = [c for c in charset if c != char]
        entries.append(
            {
                "prompt": label,
                "win": {"char": char},
                "lose": {"char": others[int(rng.integers(len(others)))]},
            }
        )
    return entries


def pair_batch(records, task, dtype=torch.float32):
    """
    Stack same-shaped records into one `PreferencePair` of latents.
    """
    shape = records[0].win.shape
    grid = task.patchifier.grid(*shape[:2])
    win = task.patchifier.encode(np.stack([r.win for r in records]))
    lose = task.patchifier.encode(np.stack([r.lose for r in records]))
    image = None
    if records[0].condition is not None:
        image = torch.from_numpy(
            task.patchifier.encode(np.stack([r.condition for r in records]))
        ).to(dtype)
    condition = Condition(
        tokens=torch.from_numpy(
            np.stack([np.asarray(r.tokens, dtype=np.int64) for r in records])
        ),
        grid=grid,
        image=image,
    )
    return PreferencePair(
        condition, torch.from_numpy(win).to(dtype), torch.from_numpy(lose).to(dtype)
    )
