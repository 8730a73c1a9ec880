"""
Planar geometry for phantom primitives.
- Primitives become shapely polygons (ellipses as fine polygonal buffers)
- Membership of voxel centers is tested with vectorized shapely predicates
"""

import logging
from functools import lru_cache

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import Point, box

from models.schemas import Primitive

logger = logging.getLogger(__name__)

# Segments per quarter circle; the inscribed polygon deviates from the true
# ellipse by less than 2e-5 of its semi-axis
ELLIPSE_QUAD_SEGS = 128


@lru_cache(maxsize=1)
def _unit_disk():
    return Point(0.0, 0.0).buffer(1.0, quad_segs=ELLIPSE_QUAD_SEGS)


def primitive_geometry(primitive: Primitive):
    """
    Build the shapely polygon for one phantom primitive.

    Args:
        primitive: ellipse or rectangle with center, semi-axes/half extents
            and rotation in degrees (counter-clockwise)

    Returns:
        shapely Polygon in image coordinates
    """
    if primitive.kind == "ellipse":
        shape = affinity.scale(_unit_disk(), primitive.rx, primitive.ry, origin=(0.0, 0.0))
    else:
        shape = box(-primitive.rx, -primitive.ry, primitive.rx, primitive.ry)

    if primitive.rotation_deg:
        shape = affinity.rotate(shape, primitive.rotation_deg, origin=(0.0, 0.0))
    return affinity.translate(shape, primitive.cx, primitive.cy)


def centers_inside(geometry, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """
    Boolean mask of the points (xs, ys) lying in the closed polygon.

    Points outside the polygon's bounding box are rejected before the
    exact shapely test.
    """
    min_x, min_y, max_x, max_y = geometry.bounds
    mask = np.zeros(xs.shape, dtype=bool)
    candidates = (xs >= min_x) & (xs <= max_x) & (ys >= min_y) & (ys <= max_y)
    if not candidates.any():
        return mask
    mask[candidates] = shapely.intersects_xy(geometry, xs[candidates], ys[candidates])
    return mask
