"""Flatten nested parameter dataclasses to ``{dotted.name: ndarray}`` and back."""

from __future__ import annotations

import dataclasses

import numpy as np


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    if isinstance(obj, np.ndarray):
        out[prefix.rstrip(".")] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(flatten(getattr(obj, f.name), f"{prefix}{f.name}."))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(flatten(item, f"{prefix}{i}."))
    elif isinstance(obj, dict):
        for k in sorted(obj):
            out.update(flatten(obj[k], f"{prefix}{k}."))
    return out


def unflatten(template, arrays, prefix: str = ""):
    """Rebuild ``template`` with every array replaced by ``arrays[name]``.

    Non-array leaves (flags, sizes) are carried over from the template.
    """
    if isinstance(template, np.ndarray):
        return np.asarray(arrays[prefix.rstrip(".")], dtype=np.float64)
    if dataclasses.is_dataclass(template):
        changes = {
            f.name: unflatten(getattr(template, f.name), arrays, f"{prefix}{f.name}.")
            for f in dataclasses.fields(template)
        }
        return dataclasses.replace(template, **changes)
    if isinstance(template, (list, tuple)):
        items = [unflatten(item, arrays, f"{prefix}{i}.") for i, item in enumerate(template)]
        return type(template)(items)
    if isinstance(template, dict):
        return {k: unflatten(v, arrays, f"{prefix}{k}.") for k, v in template.items()}
    return template
