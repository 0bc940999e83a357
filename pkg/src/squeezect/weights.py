"""Weight archive: a text header followed by raw little-endian float32 payloads.

Layout::

    SQUEEZECT-ARCHIVE 1
    variant=proposed
    fire_variant=custom
    input=3,224,224
    classes=2
    tensor fire2.squeeze.weight 16,96,1,1 0 6144
    ...
    end
    <payload bytes>

Tensor offsets are relative to the first payload byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architecture import ArchVariant, Network, build

log = logging.getLogger(__name__)

MAGIC = "SQUEEZECT-ARCHIVE"
VERSION = 1


class ArchiveError(ValueError):
    pass


@dataclass
class LoadReport:
    matched: list[str] = field(default_factory=list)
    reinitialized: list[str] = field(default_factory=list)
    unused: list[str] = field(default_factory=list)


def _shape_str(shape):
    return ",".join(str(int(s)) for s in shape) if shape else "scalar"


def network_meta(net: Network) -> dict[str, str]:
    return {
        "variant": net.variant,
        "fire_variant": net.fire_variant,
        "input": ",".join("" if s is None else str(s) for s in net.input_shape),
        "classes": str(net.num_classes),
    }


def write_archive(path, tensors: dict[str, np.ndarray], meta: dict[str, str]):
    lines = [f"{MAGIC} {VERSION}"]
    for k, v in meta.items():
        if "\n" in str(v) or "=" in k:
            raise ArchiveError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ArchiveError(f"tensor name {name!r} contains whitespace")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        lines.append(f"tensor {name} {_shape_str(arr.shape)} {offset} {len(raw)}")
        payloads.append(raw)
        offset += len(raw)
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + b"".join(payloads))


def read_archive(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    meta, entries = {}, []
    pos = 0
    first = True
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ArchiveError(f"{path}: header is not terminated by 'end'")
        line = data[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            parts = line.split()
            if len(parts) != 2 or parts[0] != MAGIC:
                raise ArchiveError(f"{path}: not a weight archive")
            if int(parts[1]) != VERSION:
                raise ArchiveError(f"{path}: unsupported archive version {parts[1]}")
            first = False
        elif line == "end":
            break
        elif line.startswith("tensor "):
            _, name, shape, off, nbytes = line.split()
            shape = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            entries.append((name, shape, int(off), int(nbytes)))
        else:
            key, _, value = line.partition("=")
            meta[key] = value
    tensors = {}
    for name, shape, off, nbytes in entries:
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected or pos + off + nbytes > len(data):
            raise ArchiveError(f"{path}: tensor {name} has inconsistent size")
        arr = np.frombuffer(data, dtype="<f4", count=expected // 4, offset=pos + off)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return meta, tensors


def save_weights(net: Network, path, extra_meta=None):
    meta = network_meta(net)
    if extra_meta:
        meta.update({k: str(v) for k, v in extra_meta.items()})
    write_archive(path, {k: p.data for k, p in net.parameters().items()}, meta)


def variant_from_meta(meta) -> ArchVariant:
    shape = tuple(int(s) for s in meta["input"].split(","))
    return ArchVariant(meta["variant"], meta.get("fire_variant", "custom"), shape)


def load_weights(net: Network, path, seed=0, exclude=()) -> LoadReport:
    """Copy matching tensors from an archive into ``net``.

    Graph parameters absent from the archive (typically a new classifier head)
    are re-initialized as a fresh build with ``seed`` would initialize them.
    Archive tensors whose names start with a prefix in ``exclude`` are ignored,
    which is how a pretrained head with a different class count is dropped.
    A name present on both sides with different shapes is an error.
    """
    _, tensors = read_archive(path)
    tensors = {k: v for k, v in tensors.items() if not k.startswith(tuple(exclude))}
    params = net.parameters()
    report = LoadReport()
    for name, p in params.items():
        if name not in tensors:
            continue
        if tensors[name].shape != p.data.shape:
            raise ArchiveError(f"shape conflict for {name}: archive {tensors[name].shape}, "
                               f"graph {p.data.shape}")
    for name, p in params.items():
        if name in tensors:
            p.data[...] = tensors[name]
            report.matched.append(name)
        else:
            report.reinitialized.append(name)
    report.unused = [k for k in tensors if k not in params]
    if report.reinitialized and net.variant in ("proposed", "squeezenet_plain", "squeezenet_simple_bypass"):
        fresh = build(ArchVariant(net.variant, net.fire_variant, net.input_shape), seed).parameters()
        for name in report.reinitialized:
            params[name].data[...] = fresh[name].data
    log.info("loaded %d tensors, re-initialized %d, ignored %d",
             len(report.matched), len(report.reinitialized), len(report.unused))
    return report


def load_network(path, seed=0) -> tuple[Network, dict[str, str]]:
    """Rebuild the graph described by an archive header and load its weights."""
    meta, _ = read_archive(path)
    net = build(variant_from_meta(meta), seed)
    report = load_weights(net, path, seed)
    if report.reinitialized:
        raise ArchiveError(f"{path}: archive lacks tensors {report.reinitialized[:3]}...")
    return net, meta
