"""Text checkpoints: a magic line, a JSON header, then one parameter per line.

Floats are written with ``repr`` so a save/load round trip is bit-exact.
"""
import json

import numpy as np

from .errors import FormatError
from .optim import ParamSet

MAGIC = "ivgd-checkpoint"
VERSION = 1


def dumps(header, params):
    layout = [{"name": k, "shape": list(v.shape)} for k, v in params.values.items()]
    head = dict(header, params=layout, frozen=sorted(params.frozen))
    lines = [f"{MAGIC} {VERSION}", json.dumps(head, sort_keys=True)]
    lines += [repr(float(v)) for v in params.flat()]
    return "\n".join(lines) + "\n"


def loads(text):
    lines = text.splitlines()
    if len(lines) < 2 or lines[0] != f"{MAGIC} {VERSION}":
        raise FormatError("not a version-1 checkpoint")
    try:
        header = json.loads(lines[1])
        layout = header.pop("params")
        frozen = header.pop("frozen", [])
        flat = np.array([float(v) for v in lines[2:]], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in layout)
    if flat.size != expected:
        raise FormatError(f"checkpoint holds {flat.size} values, layout needs {expected}")
    params = ParamSet({e["name"]: np.zeros(e["shape"]) for e in layout}, frozen)
    params.set_flat(flat)
    return header, params


def save(path, header, params):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(header, params))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
