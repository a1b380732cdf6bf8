"""Multi-stream anatomical spiking embedding.

Identity, temporal-difference and along-bone difference streams of the input
are projected separately, concatenated on the channel axis in the order
(identity, spatial, temporal) and fed to a parametric LIF node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .energy import OpCounter
from .neurons import LIF, LIFParams
from .tensor import ParamStore, Projection
from .topology import SkeletonGraph, spatial_gradient

MODALITIES = ("joint", "bone", "joint_motion", "bone_motion")


@dataclass
class KinematicInput:
    x: np.ndarray  # [T, B, C_in, N]
    modality: str = "joint"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")


def stream_widths(D: int) -> tuple[int, int, int]:
    """Channel widths of the identity/spatial/temporal streams; the temporal stream absorbs the remainder."""
    w = math.ceil(D / 3)
    widths = (w, w, D - 2 * w)
    if widths[2] <= 0:
        raise ValueError(f"embedding dim D={D} too small for three streams")
    return widths


def temporal_difference(x: np.ndarray) -> np.ndarray:
    """``x[t] - x[t-1]`` along axis 0, with the first step set to zero."""
    out = np.zeros_like(x)
    out[1:] = x[1:] - x[:-1]
    return out


def kinematic_streams(x: np.ndarray, g: SkeletonGraph):
    """Return ``(x0, xT, xS)``: identity, temporal difference and spatial gradient."""
    return x, temporal_difference(x), spatial_gradient(x, g)


def derive_modality(x: np.ndarray, kind: str, g: SkeletonGraph) -> KinematicInput:
    """Derive bone / motion modalities from joint coordinates ``[T, ..., N]``."""
    if kind == "joint":
        raise ValueError("joint is the base modality; use the coordinates directly")
    if kind == "bone":
        y = spatial_gradient(x, g)
    elif kind == "joint_motion":
        y = temporal_difference(x)
    elif kind == "bone_motion":
        y = temporal_difference(spatial_gradient(x, g))
    else:
        raise ValueError(f"unknown modality {kind!r}")
    return KinematicInput(y, kind)


class MASE:
    """Embedding layer.  With ``multi_stream=False`` only the identity stream is used (width D)."""

    def __init__(
        self,
        store: ParamStore,
        graph: SkeletonGraph,
        c_in: int,
        D: int,
        lif: LIFParams,
        rng: np.random.Generator,
        multi_stream: bool = True,
        dtype=np.float32,
        name: str = "embed",
    ):
        self.graph = graph
        self.multi_stream = multi_stream
        self.widths = stream_widths(D) if multi_stream else (D,)
        tags = ("f0", "fS", "fT")[: len(self.widths)]
        self.proj = [Projection(store, f"{name}.{t}", c_in, w, rng, dtype) for t, w in zip(tags, self.widths)]
        self.lif = LIF(store, f"{name}.lif", lif, dtype)
        self.name = name

    def streams(self, x: np.ndarray):
        if not self.multi_stream:
            return (x,)
        x0, xT, xS = kinematic_streams(x, self.graph)
        return x0, xS, xT

    def forward(self, x: np.ndarray, mode="train", soft=False, counter: OpCounter | None = None, folded=False):
        streams = self.streams(x)
        z = np.concatenate([p.forward(s, mode, folded) for p, s in zip(self.proj, streams)], axis=2)
        s = self.lif.forward(z, soft=soft)
        if counter is not None:
            for p, xs in zip(self.proj, streams):
                counter.synapse(f"{self.name}.{p.name.rsplit('.', 1)[1]}", xs, p.c_out, "real")
            counter.neurons(f"{self.name}.LIF", s)
        return s

    def backward(self, grad_spikes: np.ndarray) -> None:
        gz = self.lif.backward(grad_spikes)
        edges = np.cumsum(self.widths)[:-1]
        for p, g in zip(self.proj, np.split(gz, edges, axis=2)):
            p.backward(g)
