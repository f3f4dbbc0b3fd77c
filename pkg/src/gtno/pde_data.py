"""Desk-scale PDE dataset generators and the binary dataset format.

Three built-in problem families, all on rectangular 2-D domains:

* darcy      steady flow  -div(a grad u) = beta on (0,1)^2, u = 0 on the
             boundary. a is a random two-value coefficient field (smooth
             Gaussian field thresholded at its median to {3, 12}). Solved
             with a conservative 5-point scheme, harmonic-mean face
             coefficients, matrix-free conjugate gradients.
* swe        shallow water on [-2.5, 2.5]^2, gravity 1, flat bottom,
             radial dam break (depth 2 inside a random radius, 1 outside).
             Unsplit Rusanov finite volumes, reflective walls. Only the
             depth field is stored.
* diffreact  FitzHugh-Nagumo style diffusion-reaction on [-1, 1]^2,
             Du=1e-3, Dv=5e-3, k=5e-3, R_u = u - u^3 - k - v, R_v = u - v,
             no-flux boundaries, explicit Euler in flux form.

Random fields come from an explicit truncated Fourier series, so the same
continuous field can be discretized at any resolution; nested-resolution
families reuse per-sample coefficients (and the threshold level) across
resolutions and share a nonzero family id in the header.

File format (little-endian):

    magic "HMLT" | u16 version | u8 kind | u8 ndim | u32 N nx ny L c out
    t_in t_out | f64 bounds[4] | f64 params[6] | u64 seed | u64 family |
    [positions L*2 f64 when kind=external] | per sample: theta (L*c),
    target (max(t_out,1)*L*out)

Sample generation is embarrassingly parallel in principle: sample i draws
from its own generator seeded [base_seed, i], so any worker layout produces
identical bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatError,
    MagicError,
    NumericFaultError,
    ShapeError,
    TruncationError,
    VersionError,
)
from .graph import PointSet, cell_centers_grid, uniform_grid
from .training import TrainSample

__all__ = [
    "Dataset",
    "SpectralField",
    "gen_darcy",
    "gen_darcy_family",
    "gen_swe",
    "gen_diffreact",
    "solve_darcy",
    "simulate_swe",
    "simulate_diffreact",
    "write_dataset",
    "read_dataset",
    "convert_pointcloud_csv",
    "as_samples",
]

MAGIC = b"HMLT"
DATA_VERSION = 1
_KINDS = ("darcy", "swe", "diffreact", "external")

DARCY_BOUNDS = ((0.0, 1.0), (0.0, 1.0))
SWE_BOUNDS = ((-2.5, 2.5), (-2.5, 2.5))
DR_BOUNDS = ((-1.0, 1.0), (-1.0, 1.0))


@dataclass
class Dataset:
    """A bundle of samples on one shared point layout.

    thetas[i] is (L, c); targets[i] is (L, out) when t_out == 0 (steady) and
    (t_out, L, out) otherwise. positions is the shared cloud for external
    datasets, None for grid kinds.
    """

    kind: str
    nx: int
    ny: int
    bounds: np.ndarray
    t_in: int
    t_out: int
    params: tuple
    seed: int
    family: int
    thetas: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    positions: np.ndarray | None = None
    _points: PointSet | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.thetas)

    @property
    def c(self) -> int:
        return int(self.thetas[0].shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.targets[0].shape[-1])

    @property
    def n_points(self) -> int:
        return int(self.thetas[0].shape[0])

    def points(self) -> PointSet:
        """Shared PointSet (node lattice for darcy/diffreact, cell centers
        for swe, the stored cloud for external)."""
        if self._points is None:
            if self.kind == "external":
                self._points = PointSet(self.positions, self.bounds)
            elif self.kind == "swe":
                self._points = cell_centers_grid(self.nx, self.ny, self.bounds)
            else:
                self._points = uniform_grid(self.nx, self.ny, self.bounds)
        return self._points


def as_samples(ds: Dataset) -> list[TrainSample]:
    pts = ds.points()
    return [
        TrainSample(points=pts, theta=th, queries=pts, target=tg)
        for th, tg in zip(ds.thetas, ds.targets)
    ]


# ---------------------------------------------------------------------------
# random fields


class SpectralField:
    """Gaussian random field as an explicit truncated Fourier series.

    psi(x) = sum_k lambda_k (g_k cos(2 pi k.xi) + h_k sin(2 pi k.xi)) over
    integer modes |k|_inf <= modes (half-space, so each basis function appears
    once), lambda_k = (4 pi^2 |k|^2 + offset)^(-tau/2), xi = position mapped
    to the unit square. Being an explicit series, the same draw evaluates
    consistently on any point set, which is what nested-resolution families
    rely on.
    """

    def __init__(self, rng: np.random.Generator, modes: int = 12, tau: float = 3.0,
                 offset: float = 9.0):
        ks = []
        for kx in range(0, modes + 1):
            ky_lo = 0 if kx == 0 else -modes
            for ky in range(ky_lo, modes + 1):
                ks.append((kx, ky))
        k = np.asarray(ks, dtype=np.float64)
        lam = (4.0 * math.pi**2 * (k[:, 0] ** 2 + k[:, 1] ** 2) + offset) ** (-tau / 2.0)
        self.k = k
        self.cg = lam * rng.standard_normal(k.shape[0])
        self.ch = lam * rng.standard_normal(k.shape[0])

    def eval(self, positions: np.ndarray, bounds) -> np.ndarray:
        bnd = np.asarray(bounds, dtype=np.float64)
        xi = (np.asarray(positions, dtype=np.float64) - bnd[:, 0]) / (bnd[:, 1] - bnd[:, 0])
        phase = 2.0 * math.pi * (xi @ self.k.T)
        return np.cos(phase) @ self.cg + np.sin(phase) @ self.ch


# ---------------------------------------------------------------------------
# darcy


def darcy_coefficient(psi_values: np.ndarray, threshold: float,
                      lo: float = 3.0, hi: float = 12.0) -> np.ndarray:
    return np.where(psi_values >= threshold, hi, lo)


def solve_darcy(a: np.ndarray, beta: float, tol: float = 1e-10,
                max_iter: int | None = None) -> np.ndarray:
    """Solve -div(a grad u) = beta, u=0 on the boundary of the unit square.

    a is nodal (ny, nx) on the lattice including the boundary. Conservative
    5-point stencil with harmonic-mean face coefficients; matrix-free CG to a
    relative residual of tol. Returns u (ny, nx) with zero boundary.
    """
    a = np.asarray(a, dtype=np.float64)
    ny, nx = a.shape
    if nx < 3 or ny < 3:
        raise ShapeError("darcy solve needs at least a 3x3 lattice")
    if np.any(a <= 0):
        raise ShapeError("coefficient field must be positive")
    hx = 1.0 / (nx - 1)
    hy = 1.0 / (ny - 1)
    ax = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])  # x faces (ny, nx-1)
    ay = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])  # y faces (ny-1, nx)

    def apply_op(u_int: np.ndarray) -> np.ndarray:
        u = np.zeros((ny, nx))
        u[1:-1, 1:-1] = u_int
        c = u[1:-1, 1:-1]
        return (
            ax[1:-1, 1:] * (c - u[1:-1, 2:]) + ax[1:-1, :-1] * (c - u[1:-1, :-2])
        ) / hx**2 + (
            ay[1:, 1:-1] * (c - u[2:, 1:-1]) + ay[:-1, 1:-1] * (c - u[:-2, 1:-1])
        ) / hy**2

    b = np.full((ny - 2, nx - 2), float(beta))
    bnorm = math.sqrt(float(np.sum(b * b)))
    u = np.zeros((ny, nx))
    if bnorm == 0.0:
        return u
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(np.sum(r * r))
    limit = max_iter if max_iter is not None else 20 * b.size
    for _ in range(limit):
        ap = apply_op(p)
        alpha = rs / float(np.sum(p * ap))
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.sum(r * r))
        if math.sqrt(rs_new) <= tol * bnorm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        raise NumericFaultError("darcy CG failed to reach the residual target")
    u[1:-1, 1:-1] = x
    return u


def _darcy_theta_target(a: np.ndarray, beta: float):
    u = solve_darcy(a, beta)
    theta = a.reshape(-1, 1)
    target = u.reshape(-1, 1)
    return theta, target


def gen_darcy(seed: int, n: int, nx: int = 16, ny: int = 16, beta: float = 1.0,
              family: int = 0, threshold_at=None) -> Dataset:
    """n Darcy samples on an nx-by-ny node lattice.

    threshold_at: optional list of per-sample threshold levels (used by
    nested families so all resolutions binarize the same continuous field at
    the same level).
    """
    if n < 1:
        raise ShapeError("need n >= 1 samples")
    pts = uniform_grid(nx, ny, DARCY_BOUNDS)
    ds = Dataset(
        kind="darcy", nx=nx, ny=ny, bounds=np.asarray(DARCY_BOUNDS, dtype=np.float64),
        t_in=0, t_out=0, params=(beta, 3.0, 3.0, 12.0, 0.0, 0.0),
        seed=seed, family=family,
    )
    for i in range(n):
        fld = SpectralField(np.random.default_rng([seed, i]))
        psi = fld.eval(pts.positions, DARCY_BOUNDS)
        level = float(np.median(psi)) if threshold_at is None else float(threshold_at[i])
        av = darcy_coefficient(psi, level).reshape(ny, nx)
        theta, target = _darcy_theta_target(av, beta)
        ds.thetas.append(theta)
        ds.targets.append(target)
    return ds


def _family_id(seed: int, resolutions: tuple) -> int:
    h = 1469598103934665603
    for v in (seed, 9176, *resolutions):
        h = ((h ^ (int(v) & 0xFFFFFFFF)) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return h or 1


def gen_darcy_family(seed: int, n: int, resolutions: list[int], beta: float = 1.0,
                     family: int | None = None) -> dict[int, Dataset]:
    """Darcy datasets at several resolutions sampling the same continuous
    coefficient fields (same per-sample draws, threshold fixed at the finest
    resolution's median). All returned datasets share a family id (pass
    family explicitly to put separate train/test generations in one family).
    """
    res = sorted(set(int(r) for r in resolutions))
    if len(res) < 2:
        raise ShapeError("a family needs at least two resolutions")
    fam = _family_id(seed, tuple(res)) if family is None else family
    finest = uniform_grid(res[-1], res[-1], DARCY_BOUNDS)
    levels = []
    for i in range(n):
        fld = SpectralField(np.random.default_rng([seed, i]))
        levels.append(float(np.median(fld.eval(finest.positions, DARCY_BOUNDS))))
    return {
        r: gen_darcy(seed, n, r, r, beta, family=fam, threshold_at=levels) for r in res
    }


# ---------------------------------------------------------------------------
# shallow water


def _swe_flux_x(h, hu, hv, g):
    u = hu / h
    return hu, hu * u + 0.5 * g * h * h, hv * u


def _swe_flux_y(h, hu, hv, g):
    v = hv / h
    return hv, hu * v, hv * v + 0.5 * g * h * h


def simulate_swe(nx: int, ny: int, n_frames: int, t_end: float = 1.0,
                 dam_radius: float = 0.5, g: float = 1.0, cfl: float = 0.4,
                 h0: np.ndarray | None = None, h_min: float = 1e-6) -> np.ndarray:
    """Radial dam break with reflective walls; returns depth frames
    (n_frames, ny, nx) at times linspace(0, t_end, n_frames).

    Unsplit Rusanov fluxes on cell centers. Reflective ghost cells mirror the
    depth and negate the normal momentum, which makes the wall mass flux
    exactly zero. Aborts if any cell dries below h_min.
    """
    pts = cell_centers_grid(nx, ny, SWE_BOUNDS)
    xy = pts.positions.reshape(ny, nx, 2)
    dx = 5.0 / nx
    dy = 5.0 / ny
    if h0 is None:
        rr = np.sqrt(xy[:, :, 0] ** 2 + xy[:, :, 1] ** 2)
        h = np.where(rr <= dam_radius, 2.0, 1.0)
    else:
        h = np.asarray(h0, dtype=np.float64).copy()
        if h.shape != (ny, nx):
            raise ShapeError("h0 must be (ny, nx)")
    hu = np.zeros_like(h)
    hv = np.zeros_like(h)
    times = np.linspace(0.0, t_end, n_frames)
    frames = np.empty((n_frames, ny, nx))
    frames[0] = h
    t = 0.0
    for f in range(1, n_frames):
        t_goal = float(times[f])
        while t < t_goal - 1e-14:
            if np.any(h < h_min):
                raise NumericFaultError("shallow water cell dried out")
            c = np.sqrt(g * h)
            speed = float(np.max(np.abs(hu / h) + c) + np.max(np.abs(hv / h) + c))
            speed = max(speed, 1e-12)
            dt = min(cfl * min(dx, dy) / speed, t_goal - t)

            # pad with reflective ghosts
            hp = np.pad(h, 1, mode="edge")
            hup = np.pad(hu, 1, mode="edge")
            hvp = np.pad(hv, 1, mode="edge")
            hup[:, 0] = -hup[:, 1]
            hup[:, -1] = -hup[:, -2]
            hvp[0, :] = -hvp[1, :]
            hvp[-1, :] = -hvp[-2, :]

            # x faces: states (ny, nx+1) left/right
            hL, hR = hp[1:-1, :-1], hp[1:-1, 1:]
            huL, huR = hup[1:-1, :-1], hup[1:-1, 1:]
            hvL, hvR = hvp[1:-1, :-1], hvp[1:-1, 1:]
            fL = _swe_flux_x(hL, huL, hvL, g)
            fR = _swe_flux_x(hR, huR, hvR, g)
            a = np.maximum(np.abs(huL / hL) + np.sqrt(g * hL),
                           np.abs(huR / hR) + np.sqrt(g * hR))
            fx = [0.5 * (l + r) - 0.5 * a * (qR - qL)
                  for l, r, qL, qR in zip(fL, fR, (hL, huL, hvL), (hR, huR, hvR))]

            # y faces: states (ny+1, nx)
            hB, hT = hp[:-1, 1:-1], hp[1:, 1:-1]
            huB, huT = hup[:-1, 1:-1], hup[1:, 1:-1]
            hvB, hvT = hvp[:-1, 1:-1], hvp[1:, 1:-1]
            gB = _swe_flux_y(hB, huB, hvB, g)
            gT = _swe_flux_y(hT, huT, hvT, g)
            b = np.maximum(np.abs(hvB / hB) + np.sqrt(g * hB),
                           np.abs(hvT / hT) + np.sqrt(g * hT))
            fy = [0.5 * (lo + hi) - 0.5 * b * (qT - qB)
                  for lo, hi, qB, qT in zip(gB, gT, (hB, huB, hvB), (hT, huT, hvT))]

            for q, fxq, fyq in zip((h, hu, hv), fx, fy):
                q -= dt / dx * (fxq[:, 1:] - fxq[:, :-1])
                q -= dt / dy * (fyq[1:, :] - fyq[:-1, :])
            t += dt
        frames[f] = h
    if not np.all(np.isfinite(frames)):
        raise NumericFaultError("shallow water produced non-finite depths")
    return frames


def gen_swe(seed: int, n: int, nx: int = 24, ny: int = 24, t_in: int = 4,
            t_out: int = 10, t_end: float = 1.0, family: int = 0) -> Dataset:
    """Dam-break depth sequences: first t_in frames in, next t_out out."""
    if n < 1:
        raise ShapeError("need n >= 1 samples")
    ds = Dataset(
        kind="swe", nx=nx, ny=ny, bounds=np.asarray(SWE_BOUNDS, dtype=np.float64),
        t_in=t_in, t_out=t_out, params=(1.0, 0.4, 0.3, 0.7, t_end, 0.0),
        seed=seed, family=family,
    )
    L = nx * ny
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        r0 = rng.uniform(0.3, 0.7)
        frames = simulate_swe(nx, ny, t_in + t_out, t_end=t_end, dam_radius=r0)
        flat = frames.reshape(t_in + t_out, L)
        ds.thetas.append(np.ascontiguousarray(flat[:t_in].T))
        ds.targets.append(flat[t_in:].reshape(t_out, L, 1).copy())
    return ds


# ---------------------------------------------------------------------------
# diffusion-reaction


def _div_grad(f: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Flux-form Laplacian with zero-flux boundary faces."""
    gx = np.diff(f, axis=1) / hx
    gy = np.diff(f, axis=0) / hy
    out = np.zeros_like(f)
    out[:, :-1] += gx / hx
    out[:, 1:] -= gx / hx
    out[:-1, :] += gy / hy
    out[1:, :] -= gy / hy
    return out


def simulate_diffreact(nx: int, ny: int, n_frames: int, t_end: float = 5.0,
                       du: float = 1e-3, dv: float = 5e-3, k: float = 5e-3,
                       init: tuple[np.ndarray, np.ndarray] | None = None,
                       seed: int = 0, include_reactions: bool = True) -> np.ndarray:
    """FitzHugh-Nagumo dynamics; returns (n_frames, ny, nx, 2) for (u, v).

    Explicit Euler with dt = 0.2 * min(hx,hy)^2 / (4 max(Du,Dv)), capped at
    1e-2 and subdivided so frame times are hit exactly. include_reactions=False
    runs pure diffusion (used to verify discrete mass conservation).
    """
    hx = 2.0 / (nx - 1)
    hy = 2.0 / (ny - 1)
    if init is not None:
        u = np.asarray(init[0], dtype=np.float64).copy()
        v = np.asarray(init[1], dtype=np.float64).copy()
        if u.shape != (ny, nx) or v.shape != (ny, nx):
            raise ShapeError("init fields must be (ny, nx)")
    else:
        pts = uniform_grid(nx, ny, DR_BOUNDS)
        rng = np.random.default_rng(seed)
        fu = SpectralField(rng, modes=8, tau=2.5)
        fv = SpectralField(rng, modes=8, tau=2.5)
        u = _normalized(fu.eval(pts.positions, DR_BOUNDS)).reshape(ny, nx)
        v = _normalized(fv.eval(pts.positions, DR_BOUNDS)).reshape(ny, nx)
    dt_max = min(0.2 * min(hx, hy) ** 2 / (4.0 * max(du, dv)), 1e-2)
    times = np.linspace(0.0, t_end, n_frames)
    frames = np.empty((n_frames, ny, nx, 2))
    frames[0, :, :, 0] = u
    frames[0, :, :, 1] = v
    for f in range(1, n_frames):
        span = float(times[f] - times[f - 1])
        nsub = max(1, math.ceil(span / dt_max))
        dt = span / nsub
        for _ in range(nsub):
            lap_u = _div_grad(u, hx, hy)
            lap_v = _div_grad(v, hx, hy)
            if include_reactions:
                ru = u - u**3 - k - v
                rv = u - v
            else:
                ru = 0.0
                rv = 0.0
            u = u + dt * (du * lap_u + ru)
            v = v + dt * (dv * lap_v + rv)
        frames[f, :, :, 0] = u
        frames[f, :, :, 1] = v
    if not np.all(np.isfinite(frames)):
        raise NumericFaultError("diffusion-reaction produced non-finite values")
    return frames


def _normalized(x: np.ndarray, scale: float = 0.5) -> np.ndarray:
    s = float(np.std(x))
    if s == 0.0:
        return np.zeros_like(x)
    return (x - float(np.mean(x))) / s * scale


def gen_diffreact(seed: int, n: int, nx: int = 24, ny: int = 24, t_in: int = 4,
                  t_out: int = 10, t_end: float = 5.0, family: int = 0) -> Dataset:
    """Activator-inhibitor sequences; theta channels per node are
    [u_t0, v_t0, u_t1, v_t1, ...] over the first t_in frames."""
    if n < 1:
        raise ShapeError("need n >= 1 samples")
    ds = Dataset(
        kind="diffreact", nx=nx, ny=ny, bounds=np.asarray(DR_BOUNDS, dtype=np.float64),
        t_in=t_in, t_out=t_out, params=(1e-3, 5e-3, 5e-3, t_end, 0.0, 0.0),
        seed=seed, family=family,
    )
    L = nx * ny
    for i in range(n):
        frames = simulate_diffreact(nx, ny, t_in + t_out, t_end=t_end, seed=[seed, i])
        flat = frames.reshape(t_in + t_out, L, 2)
        theta = np.ascontiguousarray(flat[:t_in].transpose(1, 0, 2).reshape(L, 2 * t_in))
        ds.thetas.append(theta)
        ds.targets.append(flat[t_in:].copy())
    return ds


# ---------------------------------------------------------------------------
# binary I/O


_HEADER = struct.Struct("<2B8I4d6d2Q")


def write_dataset(path: str, ds: Dataset) -> None:
    if ds.kind not in _KINDS:
        raise FormatError(f"unknown dataset kind {ds.kind!r}")
    n = ds.n_samples
    if n == 0:
        raise ShapeError("refusing to write an empty dataset")
    L, c, out = ds.n_points, ds.c, ds.out_channels
    params = tuple(ds.params) + (0.0,) * (6 - len(ds.params))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", DATA_VERSION))
        f.write(
            _HEADER.pack(
                _KINDS.index(ds.kind), 2, n, ds.nx, ds.ny, L, c, out, ds.t_in,
                ds.t_out, *np.asarray(ds.bounds, dtype=np.float64).ravel(),
                *params, ds.seed & 0xFFFFFFFFFFFFFFFF, ds.family & 0xFFFFFFFFFFFFFFFF,
            )
        )
        if ds.kind == "external":
            f.write(np.ascontiguousarray(ds.positions, dtype="<f8").tobytes())
        frames = max(ds.t_out, 1)
        for th, tg in zip(ds.thetas, ds.targets):
            if th.shape != (L, c):
                raise ShapeError(f"theta shape {th.shape} != ({L}, {c})")
            want = (frames, L, out) if ds.t_out > 0 else (L, out)
            if tg.shape != want:
                raise ShapeError(f"target shape {tg.shape} != {want}")
            f.write(np.ascontiguousarray(th, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(tg, dtype="<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncationError(f"dataset ends inside {what}")
    return buf


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != DATA_VERSION:
            raise VersionError(f"unsupported dataset version {version}")
        raw = _read_exact(f, _HEADER.size, "header")
        vals = _HEADER.unpack(raw)
        kind_i, ndim = vals[0], vals[1]
        n, nx, ny, L, c, out, t_in, t_out = vals[2:10]
        bounds = np.asarray(vals[10:14], dtype=np.float64).reshape(2, 2)
        params = tuple(vals[14:20])
        seed, family = vals[20], vals[21]
        if kind_i >= len(_KINDS):
            raise FormatError(f"unknown kind byte {kind_i}")
        if ndim != 2:
            raise FormatError(f"unsupported ndim {ndim}")
        kind = _KINDS[kind_i]
        if n < 1 or L < 1 or c < 1 or out < 1:
            raise FormatError("degenerate header counts")
        if kind != "external" and nx * ny != L:
            raise FormatError(f"grid {nx}x{ny} does not match L={L}")
        if np.any(bounds[:, 1] <= bounds[:, 0]):
            raise FormatError("bad bounds in header")
        ds = Dataset(
            kind=kind, nx=nx, ny=ny, bounds=bounds, t_in=t_in, t_out=t_out,
            params=params, seed=seed, family=family,
        )
        if kind == "external":
            pos = np.frombuffer(_read_exact(f, 16 * L, "positions"), dtype="<f8")
            ds.positions = np.ascontiguousarray(pos.reshape(L, 2))
        frames = max(t_out, 1)
        tshape = (frames, L, out) if t_out > 0 else (L, out)
        for i in range(n):
            th = np.frombuffer(_read_exact(f, 8 * L * c, f"theta of sample {i}"), dtype="<f8")
            tg = np.frombuffer(
                _read_exact(f, 8 * frames * L * out, f"target of sample {i}"), dtype="<f8"
            )
            ds.thetas.append(np.ascontiguousarray(th.reshape(L, c)))
            ds.targets.append(np.ascontiguousarray(tg.reshape(tshape)))
        if f.read(1):
            raise FormatError("trailing bytes after the last sample")
    return ds


def convert_pointcloud_csv(csv_path: str, out_path: str, bounds=None) -> Dataset:
    """Convert a delimited point-cloud table to the binary dataset format.

    Expected header: sample,x,y,theta_*...,target_*... Every sample must list
    the same positions in the same order. bounds defaults to the exact min/max
    of the coordinates.
    """
    import csv as _csv

    with open(csv_path, newline="") as f:
        rows = list(_csv.reader(f))
    if not rows or len(rows) < 2:
        raise FormatError("empty point-cloud table")
    head = [h.strip() for h in rows[0]]
    if head[:3] != ["sample", "x", "y"]:
        raise FormatError("header must start with sample,x,y")
    th_cols = [i for i, h in enumerate(head) if h.startswith("theta")]
    tg_cols = [i for i, h in enumerate(head) if h.startswith("target")]
    if not th_cols or not tg_cols:
        raise FormatError("need at least one theta_* and one target_* column")
    by_sample: dict[int, list] = {}
    for r in rows[1:]:
        if not r:
            continue
        sid = int(r[0])
        by_sample.setdefault(sid, []).append(r)
    sids = sorted(by_sample)
    pos0 = None
    thetas, targets = [], []
    for sid in sids:
        rs = by_sample[sid]
        pos = np.asarray([[float(r[1]), float(r[2])] for r in rs])
        th = np.asarray([[float(r[i]) for i in th_cols] for r in rs])
        tg = np.asarray([[float(r[i]) for i in tg_cols] for r in rs])
        if pos0 is None:
            pos0 = pos
        elif pos.shape != pos0.shape or not np.array_equal(pos, pos0):
            raise FormatError(f"sample {sid} positions differ from sample {sids[0]}")
        thetas.append(th)
        targets.append(tg)
    if bounds is None:
        bounds = np.stack([pos0.min(axis=0), pos0.max(axis=0)], axis=1)
    ds = Dataset(
        kind="external", nx=0, ny=0, bounds=np.asarray(bounds, dtype=np.float64),
        t_in=0, t_out=0, params=(0.0,) * 6, seed=0, family=0,
        thetas=thetas, targets=targets, positions=pos0,
    )
    ds.points()  # validates in-bounds, distinct positions
    write_dataset(out_path, ds)
    return ds
