"""Checkpoint container.

Layout::

    PDCKPT 1\\n
    <H>\\n                       byte length of the header text, ASCII decimal
    <header>                     H bytes of UTF-8 "key=value" lines
    <payload>                    concatenated little-endian float32 tensors

Header keys ``model.*`` and ``schedule.*`` hold the configs, ``meta.*`` free
form metadata, and each ``tensor=<name> shape=<d0,d1,...>`` line (order
significant) describes the next tensor in the payload. A scalar has an empty
shape. Values are written with ``repr`` so floats survive the round trip.
"""

import ast
import hashlib

import numpy as np
import torch

from .model import DualDenoiser, ModelConfig
from .schedule import NoiseSchedule

MAGIC = b"PDCKPT 1\n"


class CheckpointError(ValueError):
    pass


def _fmt(v):
    return repr(v)


def _parse(v):
    try:
        return ast.literal_eval(v)
    except (ValueError, SyntaxError):
        return v


def write_container(path, config, tensors):
    """``config``: flat dict of scalars; ``tensors``: ordered name -> array."""
    lines = [f"{k}={_fmt(v)}" for k, v in config.items()]
    payload = []
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote scalars to 1-d
        lines.append(f"tensor={name} shape={','.join(map(str, a.shape))}")
        payload.append(a.tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header)}\n".encode())
        f.write(header)
        for p in payload:
            f.write(p)


def read_container(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic/version)")
    pos = len(MAGIC)
    nl = data.index(b"\n", pos)
    hlen = int(data[pos:nl])
    header = data[nl + 1 : nl + 1 + hlen].decode("utf-8")
    pos = nl + 1 + hlen
    config, tensors = {}, {}
    for line in header.splitlines():
        if line.startswith("tensor="):
            name_part, shape_part = line[len("tensor=") :].rsplit(" shape=", 1)
            shape = tuple(int(s) for s in shape_part.split(",") if s)
            n = int(np.prod(shape, dtype=np.int64))
            buf = data[pos : pos + 4 * n]
            if len(buf) != 4 * n:
                raise CheckpointError(f"{path}: truncated tensor {name_part}")
            tensors[name_part] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            pos += 4 * n
        elif line:
            k, v = line.split("=", 1)
            config[k] = _parse(v)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return config, tensors


def _prefixed(d, prefix):
    return {k[len(prefix) :]: v for k, v in d.items() if k.startswith(prefix)}


def save_checkpoint(path, model, optimizer=None, meta=None):
    config = {f"model.{k}": v for k, v in model.cfg.to_dict().items()}
    config.update({"schedule.T": model.sched.T, "schedule.s": model.sched.s, "schedule.delta": model.sched.delta})
    config.update({f"meta.{k}": v for k, v in (meta or {}).items()})
    tensors = {f"param.{n}": p.detach().to(torch.float32).numpy() for n, p in model.named_parameters()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, val in optimizer.state.get(p, {}).items():
                    tensors[f"optim.{key}.{names[id(p)]}"] = val.detach().to(torch.float32).numpy()
    write_container(path, config, tensors)


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild the model (and optionally its optimizer) from ``path``.

    ``optimizer_factory(model)`` builds a fresh optimizer into which the saved
    moments are restored. Returns ``(model, optimizer, meta)``.
    """
    config, tensors = read_container(path)
    sched_cfg = _prefixed(config, "schedule.")
    model = DualDenoiser(ModelConfig.from_dict(_prefixed(config, "model.")), NoiseSchedule(**sched_cfg))
    params = _prefixed(tensors, "param.")
    own = dict(model.named_parameters())
    if set(params) != set(own):
        raise CheckpointError(f"{path}: parameter names do not match the rebuilt model")
    with torch.no_grad():
        for n, p in own.items():
            p.copy_(torch.from_numpy(params[n]))
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        for n, p in own.items():
            state = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr = tensors.get(f"optim.{key}.{n}")
                if arr is not None:
                    state[key] = torch.from_numpy(arr.copy())
            if state:
                optimizer.state[p] = state
    return model, optimizer, _prefixed(config, "meta.")


def file_digest(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
