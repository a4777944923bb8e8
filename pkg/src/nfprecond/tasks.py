"""Benchmark problems, losses and quality metrics."""
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import elementwise
from .errors import FormatError

# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise ValueError("inputs and targets must have the same, positive, number of rows")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.targets[idx], self.kind, self.meta)


def make_1d_task(n_points=256, domain=(-1.0, 1.0)):
    """Uniform grid samples of sin(2 pi x) + sin(6 pi x)."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    x = np.linspace(domain[0], domain[1], n_points)
    y = np.sin(2 * np.pi * x) + np.sin(6 * np.pi * x)
    return Dataset(x[:, None], y[:, None], "1d", {"domain": tuple(domain)})


# ---------------------------------------------------------------------------
# images


def read_ppm(path):
    """Binary P6 with maxval 255; returns uint8 array (H, W, 3)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit channels are supported (maxval {maxval})")
    raster = data[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: raster shorter than {w}x{h}x3")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image):
    """Write an (H, W, 3) image; floats are taken in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def to_uint8(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def pixel_grid(h, w):
    """Pixel-centre coordinates in [-1, 1]^2, row-major, columns (x, y)."""
    xs = (np.arange(w) + 0.5) * (2.0 / w) - 1.0
    ys = (np.arange(h) + 0.5) * (2.0 / h) - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def builtin_image(name, size=64):
    """Procedural RGB test images in [0, 1], quantized to 8 bits."""
    g = pixel_grid(size, size)
    x, y = g[:, 0], g[:, 1]
    r = np.sqrt(x * x + y * y)
    if name == "chirp":
        # radial chirp, frequency rising with radius, one band per channel
        red = 0.5 + 0.5 * np.cos(2 * np.pi * (1.0 * r + 2.5 * r * r))
        green = 0.5 + 0.5 * np.cos(2 * np.pi * (0.5 * r + 3.5 * r * r) + np.arctan2(y, x))
        blue = 0.5 + 0.4 * np.cos(3 * np.pi * x) * np.cos(2 * np.pi * y) * np.exp(-r * r)
        img = np.stack([red, green, blue], axis=1)
    elif name == "checker":
        c = ((np.floor((x + 1) * 4) + np.floor((y + 1) * 4)) % 2).astype(float)
        img = np.stack([c, 1 - c, 0.5 * np.ones_like(c)], axis=1)
    elif name == "gradient":
        img = np.stack([(x + 1) / 2, (y + 1) / 2, 1 - (x + 1) / 2], axis=1)
    elif name == "gray":
        img = np.full((size * size, 3), 128 / 255)
    else:
        raise FormatError(f"unknown builtin image {name!r}")
    return to_uint8(img).reshape(size, size, 3)


def image_from_source(source, size=None):
    if source.startswith("builtin:"):
        return builtin_image(source.split(":", 1)[1], size or 64)
    if not os.path.exists(source):
        try:
            return builtin_image(source, size or 64)
        except FormatError:
            raise FormatError(f"image source {source!r} is neither a file nor a builtin pattern") from None
    img = read_ppm(source)
    if size and (img.shape[0] != size or img.shape[1] != size):
        rows = (np.arange(size) * img.shape[0]) // size
        cols = (np.arange(size) * img.shape[1]) // size
        img = img[rows][:, cols]
    return img


def make_image_task(source="builtin:chirp", size=None):
    img = image_from_source(source, size)
    h, w = img.shape[:2]
    targets = img.reshape(-1, 3).astype(np.float64) / 255.0
    return Dataset(pixel_grid(h, w), targets, "image", {"height": h, "width": w})


def render_image(dataset, values):
    """Per-pixel predictions back to an (H, W, 3) uint8 image."""
    h, w = dataset.meta["height"], dataset.meta["width"]
    return to_uint8(np.asarray(values).reshape(h, w, 3))


# ---------------------------------------------------------------------------
# occupancy shapes


class Shape:
    def sdf(self, p):
        raise NotImplementedError

    def surface_area(self):
        raise NotImplementedError

    def sample_surface(self, n, rng):
        raise NotImplementedError

    def inside(self, p):
        return self.sdf(p) <= 0.0


class Sphere(Shape):
    def __init__(self, radius=0.5, center=(0.0, 0.0, 0.0)):
        self.radius, self.center = float(radius), np.asarray(center, dtype=float)

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def surface_area(self):
        return 4 * math.pi * self.radius ** 2

    def sample_surface(self, n, rng):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d


class Box(Shape):
    def __init__(self, half=(0.4, 0.3, 0.25), center=(0.0, 0.0, 0.0)):
        self.half, self.center = np.asarray(half, dtype=float), np.asarray(center, dtype=float)

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def _face_areas(self):
        hx, hy, hz = self.half
        return np.array([4 * hy * hz, 4 * hx * hz, 4 * hx * hy])

    def surface_area(self):
        return 2 * self._face_areas().sum()

    def sample_surface(self, n, rng):
        areas = np.repeat(self._face_areas(), 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * self.half
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * self.half[axis]
        return self.center + pts


class Torus(Shape):
    """Ring in the xy-plane: major radius R, tube radius r."""

    def __init__(self, major=0.5, minor=0.2, center=(0.0, 0.0, 0.0)):
        self.R, self.r, self.center = float(major), float(minor), np.asarray(center, dtype=float)

    def sdf(self, p):
        q = p - self.center
        ring = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2) - self.R
        return np.sqrt(ring ** 2 + q[..., 2] ** 2) - self.r

    def surface_area(self):
        return 4 * math.pi ** 2 * self.R * self.r

    def sample_surface(self, n, rng):
        out = np.empty((0, 2))
        while out.shape[0] < n:
            th = rng.uniform(0, 2 * math.pi, size=2 * n)
            keep = rng.uniform(0, 1, size=2 * n) < (self.R + self.r * np.cos(th)) / (self.R + self.r)
            phi = rng.uniform(0, 2 * math.pi, size=2 * n)
            out = np.concatenate([out, np.stack([th[keep], phi[keep]], axis=1)])
        th, phi = out[:n, 0], out[:n, 1]
        rad = self.R + self.r * np.cos(th)
        pts = np.stack([rad * np.cos(phi), rad * np.sin(phi), self.r * np.sin(th)], axis=1)
        return self.center + pts


class Union(Shape):
    def __init__(self, parts):
        self.parts = list(parts)

    def sdf(self, p):
        return np.min([s.sdf(p) for s in self.parts], axis=0)

    def surface_area(self):
        return sum(s.surface_area() for s in self.parts)

    def sample_surface(self, n, rng):
        areas = np.array([s.surface_area() for s in self.parts])
        chunks = []
        got = 0
        while got < n:
            which = rng.choice(len(self.parts), size=n, p=areas / areas.sum())
            for i, s in enumerate(self.parts):
                k = int((which == i).sum())
                if not k:
                    continue
                pts = s.sample_surface(k, rng)
                others = [o.sdf(pts) for j, o in enumerate(self.parts) if j != i]
                if others:
                    pts = pts[np.min(others, axis=0) >= -1e-12]
                chunks.append(pts)
                got += pts.shape[0]
        return np.concatenate(chunks)[:n]


class TriangleMesh(Shape):
    """Closed triangle mesh; inside test by ray-crossing parity."""

    RAY = np.array([0.8017837, 0.5345225, 0.2672612])

    def __init__(self, vertices, faces, normalize=True):
        v = np.asarray(vertices, dtype=float)
        f = np.asarray(faces, dtype=np.int64)
        if f.ndim != 2 or f.shape[1] != 3 or f.size == 0:
            raise FormatError("mesh must contain triangles only")
        if f.min() < 0 or f.max() >= len(v):
            raise FormatError("mesh face references a missing vertex")
        self._check_watertight(f)
        if normalize:
            lo, hi = v.min(axis=0), v.max(axis=0)
            v = (v - (lo + hi) / 2) * (0.8 / max((hi - lo).max() / 2, 1e-12))
        self.vertices, self.faces = v, f
        self.tri = v[f]

    @staticmethod
    def _check_watertight(f):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts != 2):
            raise FormatError("mesh is not watertight (every edge must be shared by exactly two triangles)")

    def _areas(self):
        a, b, c = self.tri[:, 0], self.tri[:, 1], self.tri[:, 2]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self):
        return float(self._areas().sum())

    def sample_surface(self, n, rng):
        areas = self._areas()
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        u, v = rng.uniform(size=n), rng.uniform(size=n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        t = self.tri[idx]
        return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])

    def inside(self, p, chunk=2048):
        p = np.atleast_2d(p)
        a = self.tri[:, 0]
        e1, e2 = self.tri[:, 1] - a, self.tri[:, 2] - a
        h = np.cross(self.RAY, e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(det) > 1e-14
        a, e1, e2, h, inv = a[ok], e1[ok], e2[ok], h[ok], 1.0 / det[ok]
        out = np.empty(len(p), dtype=bool)
        for s in range(0, len(p), chunk):
            q = p[s:s + chunk, None, :] - a[None]
            u = np.einsum("nmj,mj->nm", q, h) * inv
            qe = np.cross(q, e1[None])
            v = (qe @ self.RAY) * inv
            t = np.einsum("nmj,mj->nm", qe, e2) * inv
            hit = (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
            out[s:s + chunk] = hit.sum(axis=1) % 2 == 1
        return out

    def sdf(self, p):
        # sign only; magnitude is not a distance
        return np.where(self.inside(p), -1.0, 1.0)


def read_mesh(path):
    ext = os.path.splitext(path)[1].lower()
    try:
        with open(path) as fh:
            lines = [ln.split("#", 1)[0].strip() for ln in fh]
    except OSError as exc:
        raise FormatError(f"cannot read mesh {path}: {exc}") from exc
    lines = [ln for ln in lines if ln]
    try:
        if ext == ".off":
            if not lines or not lines[0].startswith("OFF"):
                raise FormatError(f"{path}: missing OFF header")
            head = lines[0][3:].split() or lines.pop(1).split()
            nv, nf = int(head[0]), int(head[1])
            body = lines[1:]
            verts = [list(map(float, body[i].split()[:3])) for i in range(nv)]
            faces = []
            for i in range(nv, nv + nf):
                tok = body[i].split()
                if int(tok[0]) != 3:
                    raise FormatError(f"{path}: non-triangle face")
                faces.append([int(t) for t in tok[1:4]])
        elif ext == ".obj":
            verts, faces = [], []
            for ln in lines:
                tok = ln.split()
                if tok[0] == "v":
                    verts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "f":
                    if len(tok) != 4:
                        raise FormatError(f"{path}: non-triangle face")
                    faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
        else:
            raise FormatError(f"{path}: unsupported mesh extension {ext!r} (OFF or OBJ)")
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed mesh: {exc}") from exc
    return TriangleMesh(verts, faces)


SHAPES = {
    "sphere": lambda: Sphere(0.5),
    "torus": lambda: Torus(0.5, 0.2),
    "box": lambda: Box((0.4, 0.3, 0.25)),
    "union": lambda: Union([Sphere(0.35, (-0.3, 0.0, 0.0)), Box((0.25, 0.25, 0.25), (0.3, 0.0, 0.0))]),
}


def resolve_shape(shape):
    if isinstance(shape, Shape):
        return shape
    if shape in SHAPES:
        return SHAPES[shape]()
    if os.path.exists(shape):
        return read_mesh(shape)
    raise FormatError(f"unknown shape {shape!r}: expected one of {sorted(SHAPES)} or a mesh file")


SURFACE_NOISE = (0.1, 0.01)


def occupancy_split(n):
    """(uniform, coarse-noise, fine-noise) sample counts."""
    n_u = -(-n // 3)
    rest = n - n_u
    return n_u, rest - rest // 2, rest // 2


def make_occupancy_task(shape="sphere", n_points=30000, seed=0):
    """Uniform third in [-1,1]^3, remainder near the surface with N(0, 0.1^2) / N(0, 0.01^2) noise."""
    if n_points < 3:
        raise ValueError("n_points must be >= 3")
    sh = resolve_shape(shape)
    rng = np.random.default_rng(seed)
    n_u, n_a, n_b = occupancy_split(n_points)
    parts = [rng.uniform(-1.0, 1.0, size=(n_u, 3))]
    for count, sigma in zip((n_a, n_b), SURFACE_NOISE):
        surf = sh.sample_surface(count, rng)
        parts.append(surf + sigma * rng.standard_normal(surf.shape))
    pts = np.clip(np.concatenate(parts), -1.0, 1.0)
    labels = sh.inside(pts).astype(np.float64)
    return Dataset(pts, labels[:, None], "occupancy",
                   {"shape": shape if isinstance(shape, str) else type(sh).__name__,
                    "groups": (n_u, n_a, n_b)})


# ---------------------------------------------------------------------------
# losses and metrics


def mse_loss(pred, target):
    d = pred - target
    return (d * d).mean()


def bce_loss(logits, target):
    """Mean binary cross-entropy on raw logits: softplus(z) - y z."""
    sp = elementwise(logits, kernels.SOFTPLUS, name="softplus")
    return (sp - logits * target).mean()


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


PSNR_CAP = 99.0


def psnr(pred, gt):
    mse = float(np.mean((np.asarray(pred, dtype=float) - np.asarray(gt, dtype=float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def iou(pred_prob, gt, threshold=0.5):
    p = np.asarray(pred_prob).reshape(-1) > threshold
    g = np.asarray(gt).reshape(-1) > 0.5
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchSchedule:
    batch_size: int
    seed: int = 0
    epoch: int = 0


def epoch_order(n, seed, epoch):
    return np.random.default_rng([int(seed), 7919, int(epoch)]).permutation(n)


def epoch_batches(n, batch_size, seed, epoch):
    """Index arrays for one epoch; the last batch may be short."""
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} outside [1, {n}]")
    order = epoch_order(n, seed, epoch) if batch_size < n else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def minibatches(dataset, schedule, epochs=1):
    """Yield (inputs, targets), advancing ``schedule.epoch`` after each epoch."""
    for _ in range(epochs):
        for idx in epoch_batches(len(dataset), schedule.batch_size, schedule.seed, schedule.epoch):
            yield dataset.inputs[idx], dataset.targets[idx]
        schedule.epoch += 1


def loss_for(kind):
    return bce_loss if kind == "occupancy" else mse_loss
