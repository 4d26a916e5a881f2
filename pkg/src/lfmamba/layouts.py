"""Light-field tensor container and the three mosaic layouts.

A light field is logically (U, V, C, H, W): angular grid of views, channels,
spatial extent per view.  Three physical arrangements are used:

* ``SAI_STACK``   (U*V, C, H, W)   - views stacked as a batch axis
* ``SAIS_MOSAIC`` (C, U*H, V*W)    - view (u,v) occupies tile (u,v)
* ``MACPI``       (C, H*U, W*V)    - each spatial site holds a U x V
                                     block of angular samples

Conversions are pure index rearrangements and round-trip bit-exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Layout(enum.Enum):
    SAI_STACK = "sai_stack"
    SAIS_MOSAIC = "sais_mosaic"
    MACPI = "macpi"


@dataclass
class LightFieldTensor:
    u: int
    v: int
    c: int
    h: int
    w: int
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        expect = self.expected_shape(self.layout)
        if tuple(self.data.shape) != expect:
            raise ValueError(
                f"data shape {tuple(self.data.shape)} does not match layout "
                f"{self.layout.value} extents {expect}"
            )

    def expected_shape(self, layout: Layout) -> tuple[int, ...]:
        u, v, c, h, w = self.u, self.v, self.c, self.h, self.w
        if layout is Layout.SAI_STACK:
            return (u * v, c, h, w)
        if layout is Layout.SAIS_MOSAIC:
            return (c, u * h, v * w)
        return (c, h * u, w * v)

    @property
    def num_views(self) -> int:
        return self.u * self.v

    def view_grid(self) -> np.ndarray:
        """Logical (U, V, C, H, W) array (always from the SAI stack)."""
        stack = self.convert(Layout.SAI_STACK)
        return stack.data.reshape(self.u, self.v, self.c, self.h, self.w)

    def convert(self, target: Layout) -> "LightFieldTensor":
        if target is self.layout:
            return LightFieldTensor(self.u, self.v, self.c, self.h, self.w, target, self.data.copy())
        u, v, c, h, w = self.u, self.v, self.c, self.h, self.w
        d = self.data
        if self.layout is Layout.SAI_STACK:
            g = d.reshape(u, v, c, h, w)
        elif self.layout is Layout.SAIS_MOSAIC:
            g = d.reshape(c, u, h, v, w).transpose(1, 3, 0, 2, 4)
        else:  # MACPI
            g = d.reshape(c, h, u, w, v).transpose(2, 4, 0, 1, 3)
        if target is Layout.SAI_STACK:
            out = g.reshape(u * v, c, h, w)
        elif target is Layout.SAIS_MOSAIC:
            out = g.transpose(2, 0, 3, 1, 4).reshape(c, u * h, v * w)
        else:
            out = g.transpose(2, 3, 0, 4, 1).reshape(c, h * u, w * v)
        return LightFieldTensor(u, v, c, h, w, target, np.ascontiguousarray(out))


def layout_convert(x: LightFieldTensor, target: Layout) -> LightFieldTensor:
    """Rearrange a well-formed light field into ``target`` layout."""
    return x.convert(target)
