from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units; ``u`` is the column, ``v`` the row."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @classmethod
    def default(cls, width: int = 64, height: int = 64) -> "CameraIntrinsics":
        """Pixel-scaled intrinsics: focal length equal to the image width."""
        return cls(float(width), float(width), width / 2, height / 2, width, height)

    @classmethod
    def unit(cls, width: int, height: int) -> "CameraIntrinsics":
        """Unit focal length, principal point at the image centre."""
        return cls(1.0, 1.0, width / 2, height / 2, width, height)

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}
