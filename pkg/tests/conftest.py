import numpy as np
import pytest

from kpnet.geom import Polygon


def rect_polygon(x0, y0, x1, y1):
    return Polygon(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


def rotated_rect(cx, cy, length, height, ang):
    c, s = np.cos(ang), np.sin(ang)
    rot = np.array([[c, -s], [s, c]])
    corners = np.array([
        [-length / 2, -height / 2], [length / 2, -height / 2],
        [length / 2, height / 2], [-length / 2, height / 2],
    ]) @ rot.T + (cx, cy)
    return Polygon(tuple(map(tuple, corners)))


def band_polygon(cx, cy, r_mid, thickness, a0, span, n_arc=32):
    angs = np.linspace(a0, a0 + span, n_arc)
    outer = np.stack([np.cos(angs), np.sin(angs)], 1) * (r_mid + thickness / 2)
    inner = np.stack([np.cos(angs), np.sin(angs)], 1) * (r_mid - thickness / 2)
    ring = np.vstack([outer, inner[::-1]]) + (cx, cy)
    return Polygon(tuple(map(tuple, ring)))


@pytest.fixture
def crescent():
    # upper half annulus, radii 10 and 16, mid radius 13
    return band_polygon(0.0, 0.0, 13.0, 6.0, 0.0, np.pi, n_arc=48)
