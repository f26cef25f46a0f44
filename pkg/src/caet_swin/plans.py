"""Architecture dimension plans.

``FULL`` carries the published sizes.  ``SCALED`` keeps every structural
element (five conv/pool stages, three encoder blocks, four Swin stages with
alternating shifted windows, four fusion layers) at sizes a single CPU core
trains in minutes.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CAEPlan:
    input_side: int = 256
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    bottleneck: int = 256

    @property
    def grid(self) -> int:
        return self.input_side // 2 ** len(self.channels)


@dataclass(frozen=True)
class CAETPlan:
    d_model: int = 256
    heads: int = 5
    d_k: int = 128
    d_v: int = 128
    depth: int = 3
    mlp_hidden: int = 256
    max_slices: int = 25
    out_dim: int = 32


@dataclass(frozen=True)
class SwinPlan:
    img_size: int = 224
    patch_size: int = 4
    in_ch: int = 1
    embed_dim: int = 128
    depths: tuple[int, ...] = (2, 2, 18, 2)
    heads: tuple[int, ...] = (4, 8, 16, 32)
    window: int = 7
    mlp_ratio: int = 4
    patch_norm: bool = True

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2**i for i in range(len(self.depths)))

    @property
    def grids(self) -> tuple[int, ...]:
        g = self.img_size // self.patch_size
        return tuple(g // 2**i for i in range(len(self.depths)))

    @property
    def out_dim(self) -> int:
        return self.dims[-1]


@dataclass(frozen=True)
class FusionPlan:
    hidden: tuple[int, ...] = (512, 128, 32)
    n_classes: int = 2
    dropout: float = 0.1


@dataclass(frozen=True)
class ModelPlan:
    name: str
    cae: CAEPlan
    caet: CAETPlan
    swin: SwinPlan
    fusion: FusionPlan

    @property
    def fusion_in(self) -> int:
        return self.caet.out_dim + self.swin.out_dim


FULL = ModelPlan("full", CAEPlan(), CAETPlan(), SwinPlan(), FusionPlan())

SCALED = ModelPlan(
    "scaled",
    CAEPlan(input_side=32, channels=(4, 8, 8, 16, 32), bottleneck=32),
    CAETPlan(d_model=32, heads=2, d_k=16, d_v=16, depth=3, mlp_hidden=32),
    SwinPlan(img_size=56, patch_size=7, embed_dim=32, depths=(2, 2, 2, 2), heads=(1, 2, 4, 8), window=4),
    FusionPlan(),
)

PLANS = {"full": FULL, "scaled": SCALED}


def get_plan(name: str) -> ModelPlan:
    try:
        return PLANS[name]
    except KeyError:
        raise ValueError(f"unknown plan {name!r}; expected one of {sorted(PLANS)}") from None
