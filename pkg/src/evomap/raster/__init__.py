from .forward import (CONTRIB_CAP, DEPTH_FLOOR, TRANSMITTANCE_CUTOFF,
                      RenderOutput, brute_force_render, render)
from .backward import ParamGrads, backward

__all__ = [
    "CONTRIB_CAP", "DEPTH_FLOOR", "TRANSMITTANCE_CUTOFF", "RenderOutput",
    "render", "brute_force_render", "ParamGrads", "backward",
]
