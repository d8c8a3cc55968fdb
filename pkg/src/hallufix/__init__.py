"""Mesh outlier refinement and outlier-risk evaluation."""

from hallufix.errors import HallufixError
from hallufix.mesh import (
    PointCloud,
    TriangleMesh,
    corrupt,
    icosphere,
    load_mesh,
    normalize_to_unit_box,
    sample_surface,
    save_mesh,
    vertex_normals,
)

__version__ = "0.1.0"

__all__ = [
    "HallufixError",
    "PointCloud",
    "TriangleMesh",
    "corrupt",
    "icosphere",
    "load_mesh",
    "normalize_to_unit_box",
    "sample_surface",
    "save_mesh",
    "vertex_normals",
]
