"""Rational polynomial (RPC) camera: projection, localization, rays and crops.

Monomial order follows the RPC00B convention with ``L`` the normalized
easting, ``P`` the normalized northing and ``H`` the normalized height::

    1 L P H LP LH PH L² P² H² PLH L³ LP² LH² L²P P³ PH² L²H P²H H³
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Aabb3, Ray

# Normalized coordinates beyond this magnitude are extrapolation.
DOMAIN_LIMIT = 1.5


class OutOfDomainError(ValueError):
    pass


class LocalizationError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateRayError(ValueError):
    pass


def rpc_monomials(L, P, H) -> np.ndarray:
    """The 20 cubic monomials, stacked on the last axis."""
    one = np.ones_like(L)
    return np.stack([
        one, L, P, H, L * P, L * H, P * H, L * L, P * P, H * H,
        P * L * H, L ** 3, L * P * P, L * H * H, L * L * P, P ** 3, P * H * H,
        L * L * H, P * P * H, H ** 3,
    ], axis=-1)


@dataclass(frozen=True)
class RationalCamera:
    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray
    # ground offsets/scales in (easting, northing, height) order
    ground_offset: np.ndarray
    ground_scale: np.ndarray
    # image offsets/scales in (line, sample) order
    image_offset: np.ndarray
    image_scale: np.ndarray
    image_size: tuple = (0, 0)

    def __post_init__(self):
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (20,):
                raise ValueError(f"{name} must have 20 coefficients")
            object.__setattr__(self, name, v)
        for name, n in (("ground_offset", 3), ("ground_scale", 3),
                        ("image_offset", 2), ("image_scale", 2)):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (n,):
                raise ValueError(f"{name} must have {n} entries")
            object.__setattr__(self, name, v)
        if self.line_den[0] != 1.0 or self.samp_den[0] != 1.0:
            raise ValueError("denominator constant terms must be 1")
        if np.any(self.ground_scale <= 0) or np.any(self.image_scale <= 0):
            raise ValueError("scales must be strictly positive")
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    # -- forward model -------------------------------------------------

    def normalize_ground(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.ground_offset) / self.ground_scale

    def denormalize_ground(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.ground_scale + self.ground_offset

    def _check_domain(self, n):
        if np.any(np.abs(n) > DOMAIN_LIMIT):
            worst = float(np.abs(n).max())
            raise OutOfDomainError(f"normalized ground coordinate {worst:.3f} exceeds {DOMAIN_LIMIT}")

    def project_normalized(self, n: np.ndarray) -> np.ndarray:
        m = rpc_monomials(n[..., 0], n[..., 1], n[..., 2])
        line = (m @ self.line_num) / (m @ self.line_den)
        samp = (m @ self.samp_num) / (m @ self.samp_den)
        return np.stack([line, samp], axis=-1)

    def project(self, ground_points, check: bool = True) -> np.ndarray:
        """Ground ``(..., 3)`` to continuous ``(row, col)`` pixel coordinates."""
        n = self.normalize_ground(ground_points)
        if check:
            self._check_domain(n)
        return self.project_normalized(n) * self.image_scale + self.image_offset

    # -- inverse model -------------------------------------------------

    def localize(self, pixels, height, tol: float = 1e-4, max_iter: int = 50,
                 damping: float = 1.0) -> np.ndarray:
        """Ground ``(easting, northing)`` at ``height`` that projects to ``pixels``.

        Damped Newton on the 2x2 Jacobian, estimated by forward differences
        with a step of 1e-6 of the ground scale, started at the ground offset.
        """
        px = np.asarray(pixels, dtype=np.float64)
        single = px.ndim == 1
        px = np.atleast_2d(px)
        h = np.broadcast_to(np.asarray(height, dtype=np.float64), px.shape[:1])
        xy = np.tile(self.ground_offset[:2], (len(px), 1))
        steps = 1e-6 * self.ground_scale[:2]
        resid = np.full(len(px), np.inf)
        active = np.ones(len(px), dtype=bool)
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            p3 = np.column_stack([xy[idx], h[idx]])
            f0 = self.project(p3, check=False)
            r = f0 - px[idx]
            resid[idx] = np.hypot(r[:, 0], r[:, 1])
            done = resid[idx] < tol
            active[idx[done]] = False
            idx, p3, f0, r = idx[~done], p3[~done], f0[~done], r[~done]
            if idx.size == 0:
                break
            J = np.empty((len(idx), 2, 2))
            for j in range(2):
                q = p3.copy()
                q[:, j] += steps[j]
                J[:, :, j] = (self.project(q, check=False) - f0) / steps[j]
            try:
                delta = np.linalg.solve(J, r[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise LocalizationError("singular localization Jacobian", resid.max()) from exc
            xy[idx] -= damping * delta
        if active.any():
            raise LocalizationError(
                f"localization did not converge for {int(active.sum())} pixel(s) after "
                f"{max_iter} iterations", float(resid[active].max()))
        return xy[0] if single else xy

    # -- rays and crops -----------------------------------------------

    def rays_from_pixels(self, pixels, z_min: float, z_max: float):
        """Origins at ``z_max`` and unit directions toward the ``z_min`` point."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        top = self.localize(px, z_max)
        bottom = self.localize(px, z_min)
        o = np.column_stack([top, np.full(len(px), z_max)])
        e = np.column_stack([bottom, np.full(len(px), z_min)])
        d = e - o
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(norm < 1e-9) or np.any(d[:, 2] >= 0):
            raise DegenerateRayError("zero-length or upward ray baseline between z_max and z_min")
        return o, d / norm

    def ray_from_pixel(self, pixel, z_min: float, z_max: float, target_color=None,
                       image_id=None) -> Ray:
        """Single :class:`Ray` through a continuous pixel coordinate."""
        o, d = self.rays_from_pixels(np.asarray(pixel, dtype=np.float64)[None], z_min, z_max)
        pix = tuple(int(np.floor(v)) for v in pixel)
        return Ray(o[0], d[0], image_id, pix, target_color)

    def crop_for_tile(self, tile_box: Aabb3, margin_px: int = 4, image_id=None, tile_id=None):
        """Pixel rectangle holding the projections of the 8 box corners, dilated."""
        proj = self.project(tile_box.corners(), check=False)
        rows, cols = self.image_size
        r0 = int(np.floor(proj[:, 0].min())) - margin_px
        r1 = int(np.ceil(proj[:, 0].max())) + margin_px
        c0 = int(np.floor(proj[:, 1].min())) - margin_px
        c1 = int(np.ceil(proj[:, 1].max())) + margin_px
        r0, r1 = max(r0, 0), min(r1, rows)
        c0, c1 = max(c0, 0), min(c1, cols)
        if r0 >= r1 or c0 >= c1:
            return None
        return CropSpec(image_id, tile_id, (r0, r1, c0, c1))

    # -- persistence ----------------------------------------------------

    def to_text(self) -> str:
        values = (("LINE_OFF", self.image_offset[0]), ("SAMP_OFF", self.image_offset[1]),
                  ("LAT_OFF", self.ground_offset[1]), ("LONG_OFF", self.ground_offset[0]),
                  ("HEIGHT_OFF", self.ground_offset[2]),
                  ("LINE_SCALE", self.image_scale[0]), ("SAMP_SCALE", self.image_scale[1]),
                  ("LAT_SCALE", self.ground_scale[1]), ("LONG_SCALE", self.ground_scale[0]),
                  ("HEIGHT_SCALE", self.ground_scale[2]))
        lines = [f"{k} = {float(v)!r}" for k, v in values]
        for key, vec in (("LINE_NUM_COEFF", self.line_num), ("LINE_DEN_COEFF", self.line_den),
                         ("SAMP_NUM_COEFF", self.samp_num), ("SAMP_DEN_COEFF", self.samp_den)):
            lines += [f"{key}_{i + 1} = {float(v)!r}" for i, v in enumerate(vec)]
        lines += [f"NUM_ROWS = {self.image_size[0]}", f"NUM_COLS = {self.image_size[1]}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RationalCamera":
        kv = {}
        for raw in text.splitlines():
            raw = raw.split("#", 1)[0].strip()
            if not raw:
                continue
            key, _, val = raw.partition("=")
            kv[key.strip()] = float(val)
        coeff = {k: np.array([kv[f"{k}_{i}"] for i in range(1, 21)])
                 for k in ("LINE_NUM_COEFF", "LINE_DEN_COEFF", "SAMP_NUM_COEFF", "SAMP_DEN_COEFF")}
        return cls(
            coeff["LINE_NUM_COEFF"], coeff["LINE_DEN_COEFF"],
            coeff["SAMP_NUM_COEFF"], coeff["SAMP_DEN_COEFF"],
            np.array([kv["LONG_OFF"], kv["LAT_OFF"], kv["HEIGHT_OFF"]]),
            np.array([kv["LONG_SCALE"], kv["LAT_SCALE"], kv["HEIGHT_SCALE"]]),
            np.array([kv["LINE_OFF"], kv["SAMP_OFF"]]),
            np.array([kv["LINE_SCALE"], kv["SAMP_SCALE"]]),
            (int(kv["NUM_ROWS"]), int(kv["NUM_COLS"])),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "RationalCamera":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class CropSpec:
    image_id: object
    tile_id: object
    pixel_rect: tuple  # (row_min, row_max, col_min, col_max), max exclusive

    @property
    def shape(self) -> tuple:
        r0, r1, c0, c1 = self.pixel_rect
        return (r1 - r0, c1 - c0)

    def contains(self, rows, cols) -> np.ndarray:
        r0, r1, c0, c1 = self.pixel_rect
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        return (rows >= r0) & (rows < r1) & (cols >= c0) & (cols < c1)


def identity_camera(image_size=(2, 2)) -> RationalCamera:
    """Row = easting, col = northing; offsets 0 and unit scales."""
    line_num = np.zeros(20)
    line_num[1] = 1.0
    samp_num = np.zeros(20)
    samp_num[2] = 1.0
    den = np.zeros(20)
    den[0] = 1.0
    return RationalCamera(line_num, den, samp_num, den.copy(), np.zeros(3), np.ones(3),
                          np.zeros(2), np.ones(2), image_size)


def fit_rpc(ground: np.ndarray, pixels: np.ndarray, image_size, ridge: float = 1e-12,
            ground_offset: Optional[np.ndarray] = None,
            ground_scale: Optional[np.ndarray] = None) -> RationalCamera:
    """Least-squares RPC fit to ground/pixel correspondences.

    Each image coordinate is fitted independently by linearizing
    ``num(x) - y * (den(x) - 1) = y`` with a small ridge penalty.
    """
    ground = np.asarray(ground, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    if ground_offset is None:
        ground_offset = 0.5 * (ground.min(axis=0) + ground.max(axis=0))
    if ground_scale is None:
        ground_scale = np.maximum(0.5 * (ground.max(axis=0) - ground.min(axis=0)), 1e-9)
    image_offset = 0.5 * (pixels.min(axis=0) + pixels.max(axis=0))
    image_scale = np.maximum(0.5 * (pixels.max(axis=0) - pixels.min(axis=0)), 1e-9)
    n = (ground - ground_offset) / ground_scale
    y = (pixels - image_offset) / image_scale
    m = rpc_monomials(n[:, 0], n[:, 1], n[:, 2])
    coeffs = []
    for k in range(2):
        A = np.hstack([m, -y[:, k:k + 1] * m[:, 1:]])
        lhs = A.T @ A + ridge * np.eye(A.shape[1])
        sol = np.linalg.solve(lhs, A.T @ y[:, k])
        coeffs.append((sol[:20], np.concatenate([[1.0], sol[20:]])))
    return RationalCamera(coeffs[0][0], coeffs[0][1], coeffs[1][0], coeffs[1][1],
                          ground_offset, ground_scale, image_offset, image_scale, image_size)
