from .mesh import (
    Mesh,
    PointCloud,
    edge_lengths,
    normalize_to_unit,
    sample_surface,
    sample_surface_with_faces,
    signed_volume,
)
from .meshio import LoadReport, MeshParseError, load_mesh, read_mesh, save_mesh
from .spatial import SpatialIndex, brute_force_nearest, chamfer
from .intersect import (
    BoundingVolumeHierarchy,
    count_triangle_intersections,
    count_triangle_intersections_bruteforce,
    triangles_intersect,
)

__all__ = [
    'Mesh',
    'PointCloud',
    'edge_lengths',
    'normalize_to_unit',
    'sample_surface',
    'sample_surface_with_faces',
    'signed_volume',
    'LoadReport',
    'MeshParseError',
    'load_mesh',
    'read_mesh',
    'save_mesh',
    'SpatialIndex',
    'brute_force_nearest',
    'chamfer',
    'BoundingVolumeHierarchy',
    'count_triangle_intersections',
    'count_triangle_intersections_bruteforce',
    'triangles_intersect',
]
