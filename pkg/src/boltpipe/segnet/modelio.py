"""Versioned binary model container.

Layout: magic "BPSEG1", a little-endian uint32 architecture header
(k, transform widths, EdgeConv widths, aggregation width, head widths),
then every parameter and batch-norm state tensor as float64
little-endian, in declaration order.
"""

from __future__ import annotations

import struct

import numpy as np

from boltpipe.segnet.network import SegConfig, SegModel

MAGIC = b"BPSEG1"


def save_model(model: SegModel, path) -> None:
    c = model.cfg
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        header = [c.k, c.transform_width, c.transform_hidden,
                  len(c.edge_widths), *c.edge_widths, c.agg_width,
                  len(c.head_widths), *c.head_widths]
        fh.write(struct.pack("<I", len(header)))
        fh.write(struct.pack(f"<{len(header)}I", *header))
        for store in (model.params, model.state):
            for value in store.values():
                fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_model(path) -> SegModel:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a boltpipe model file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = list(struct.unpack(f"<{n}I", fh.read(4 * n)))
        k, tw, th = header[:3]
        ne = header[3]
        edge_widths = tuple(header[4:4 + ne])
        agg = header[4 + ne]
        nh = header[5 + ne]
        head_widths = tuple(header[6 + ne:6 + ne + nh])
        cfg = SegConfig(k=k, transform_width=tw, transform_hidden=th,
                        edge_widths=edge_widths, agg_width=agg,
                        head_widths=head_widths)
        model = SegModel(cfg, seed=0)
        for store in (model.params, model.state):
            for key, value in store.items():
                raw = fh.read(8 * value.size)
                if len(raw) != 8 * value.size:
                    raise ValueError(f"{path}: truncated tensor {key!r}")
                store[key] = np.frombuffer(raw, dtype="<f8").reshape(
                    value.shape
                ).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return model
