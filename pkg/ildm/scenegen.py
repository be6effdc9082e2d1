"""
Procedural synthetic scenes with analytically exact intrinsics.

A scene is a handful of spheres, boxes and vertical cylinders resting on a ground plane, seen by an orthographic
camera tilted away from straight down. Every pixel's ray is intersected analytically with every object, so depth,
surface normals, instance ids and edges come from the same geometry as the shaded image.

World coordinates: the ground is the plane z = GROUND_HEIGHT, objects sit on it within [-1, 1] x [-1, 1].
Camera frame: x to the right, y up in the image, z pointing back towards the camera, so a surface facing the
camera has normal (0, 0, 1).
"""
import enum
import math
import multiprocessing
from collections import namedtuple

import numpy as np
from tqdm import tqdm

from ildm.codec import (IntrinsicStack, apply_colormap, encode_normals, line_field, normalize_depth_scalar,
                        segmentation_palette, stack_to_array, NUM_INTRINSIC_CHANNELS, INTRINSIC_NAMES)
from ildm.container import TensorContainer
from ildm.errors import ConfigError, ContractError

DEFAULT_RESOLUTION = 64
MAX_OBJECTS = 5
GROUND_HEIGHT = 0.0
GROUND_ALBEDO = (0.55, 0.55, 0.55)
AMBIENT = 0.3
TILT_DEGREES = 30.0
VIEW_HALF_EXTENT = 1.2
CAMERA_DISTANCE = 5.0
PLACEMENT_EXTENT = 0.8
MIN_CENTER_SEPARATION = 0.7  # fraction of r1 + r2, i.e. at most 30% overlap of footprints
# Depth discontinuity threshold for the line drawing, on the [-1, 1] normalised depth scale (5% of its range)
LINE_DEPTH_THRESHOLD = 0.1
CAPTION_LENGTH = 24

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.2, 0.7, 0.25),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "purple": (0.6, 0.25, 0.75),
    "orange": (0.95, 0.55, 0.1),
    "white": (0.92, 0.92, 0.92),
}
COUNT_WORDS = ("one", "two", "three", "four", "five")


class Primitive(enum.Enum):
    Sphere = 1
    Box = 2
    Cylinder = 3

    def __str__(self):
        return str(self.name.lower())

    def plural(self):
        return {Primitive.Sphere: "spheres", Primitive.Box: "boxes", Primitive.Cylinder: "cylinders"}[self]


class SceneObject:
    """
    One primitive standing on the ground. ``size`` is the radius of spheres and cylinders and the half edge of
    (cube-shaped) boxes; ``height`` is only used by cylinders.
    """

    def __init__(self, kind, x, y, size, color, instance_id, height=None):
        self.kind = kind
        self.x = float(x)
        self.y = float(y)
        self.size = float(size)
        self.color = color
        self.instance_id = int(instance_id)
        self.height = float(height) if height is not None else 2.0 * self.size

    @property
    def albedo(self):
        return np.array(COLORS[self.color])

    def footprint_radius(self):
        return self.size

    def bounding_sphere(self):
        """(center, radius) of a sphere enclosing the object."""
        if self.kind is Primitive.Sphere:
            return np.array([self.x, self.y, GROUND_HEIGHT + self.size]), self.size
        if self.kind is Primitive.Box:
            return np.array([self.x, self.y, GROUND_HEIGHT + self.size]), self.size * math.sqrt(3.0)
        half = self.height / 2.0
        return np.array([self.x, self.y, GROUND_HEIGHT + half]), math.hypot(self.size, half)

    def __repr__(self):
        return f"SceneObject({self.kind}, x={self.x:.3f}, y={self.y:.3f}, size={self.size:.3f}, {self.color}, " \
               f"id={self.instance_id})"


class Camera:
    """Orthographic camera looking at the origin, tilted by ``tilt_degrees`` from straight down."""

    def __init__(self, tilt_degrees=TILT_DEGREES, half_extent=VIEW_HALF_EXTENT, distance=CAMERA_DISTANCE):
        th = math.radians(tilt_degrees)
        self.right = np.array([1.0, 0.0, 0.0])
        self.up = np.array([0.0, math.cos(th), math.sin(th)])
        self.forward = np.array([0.0, math.sin(th), -math.cos(th)])
        self.half_extent = half_extent
        self.distance = distance

    def pixel_center(self, i, j, resolution):
        """Image-plane coordinates (u, v) of pixel (row i, column j)."""
        u = ((j + 0.5) / resolution * 2.0 - 1.0) * self.half_extent
        v = (1.0 - (i + 0.5) / resolution * 2.0) * self.half_extent
        return u, v

    def project(self, point):
        point = np.asarray(point, dtype=np.float64)
        return float(point @ self.right), float(point @ self.up)

    def rays(self, resolution):
        """Ray origins [H*W, 3] (on the camera plane) and the shared unit direction."""
        i, j = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
        u, v = self.pixel_center(i.ravel(), j.ravel(), resolution)
        origins = u[:, None] * self.right + v[:, None] * self.up - self.distance * self.forward
        return origins, self.forward

    def to_camera_frame(self, normals):
        return np.stack([normals @ self.right, normals @ self.up, -(normals @ self.forward)], axis=-1)


def in_frame(obj, camera):
    """True when the projection of the object's bounding sphere lies inside the image."""
    center, radius = obj.bounding_sphere()
    u, v = camera.project(center)
    limit = camera.half_extent
    return abs(u) + radius <= limit and abs(v) + radius <= limit


class SceneSpec:
    """A scene: ground plane, 0 to MAX_OBJECTS objects, a light direction and the camera."""

    def __init__(self, objects, light=(0.3, -0.2, 1.0), camera=None):
        self.objects = list(objects)
        light = np.asarray(light, dtype=np.float64)
        self.light = light / np.linalg.norm(light)
        self.camera = camera if camera is not None else Camera()
        self.validate()

    def validate(self):
        if len(self.objects) > MAX_OBJECTS:
            raise ContractError(f"A scene holds at most {MAX_OBJECTS} objects, not {len(self.objects)}",
                                key="objects")
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids) or any(i < 1 or i > 255 for i in ids):
            raise ContractError(f"Instance ids must be unique and in [1, 255], got {ids}", key="instance_id")
        for o in self.objects:
            if not self.in_frame(o):
                raise ContractError(f"{o} does not fit in the camera frame", key="objects")

    def in_frame(self, obj):
        return in_frame(obj, self.camera)

    @classmethod
    def random(cls, rng, max_tries=200):
        """
        Object count uniform in 1..5, primitive types and colours uniform, positions rejection-sampled so that
        footprints overlap by at most 30% (centre distance >= 0.7 (r1 + r2)). An object that cannot be placed
        within ``max_tries`` draws is left out.
        """
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        camera = Camera()
        objects = []
        color_names = list(COLORS)
        for k in range(count):
            kind = list(Primitive)[int(rng.integers(len(Primitive)))]
            color = color_names[int(rng.integers(len(color_names)))]
            if kind is Primitive.Sphere:
                size, height = rng.uniform(0.15, 0.3), None
            elif kind is Primitive.Box:
                size, height = rng.uniform(0.12, 0.22), None
            else:
                size, height = rng.uniform(0.1, 0.2), rng.uniform(0.25, 0.5)
            for _ in range(max_tries):
                x, y = rng.uniform(-PLACEMENT_EXTENT, PLACEMENT_EXTENT, size=2)
                candidate = SceneObject(kind, x, y, size, color, len(objects) + 1, height)
                separated = all(math.hypot(x - o.x, y - o.y) >= MIN_CENTER_SEPARATION * (size + o.size)
                                for o in objects)
                if separated and in_frame(candidate, camera):
                    objects.append(candidate)
                    break
        light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
        return cls(objects, light=light, camera=camera)


SceneSample = namedtuple("SceneSample", ["image", "intrinsics", "caption", "seed", "instance_ids", "depth_scalar"])
SceneSample.__doc__ = """\
image: H x W x 3 in [-1, 1]; intrinsics: IntrinsicStack; caption: token ids (CAPTION_LENGTH); seed: generation seed;
instance_ids: H x W uint8 (0 = ground); depth_scalar: the normalised depth before the colormap, H x W in [-1, 1]."""


# ********
# Ray intersection (vectorised over all pixel rays, shared direction d)
# ********


def _intersect_plane(origins, d, height):
    t = (height - origins[:, 2]) / d[2]
    normals = np.broadcast_to(np.array([0.0, 0.0, 1.0]), origins.shape)
    return np.where(t > 0, t, np.inf), normals


def _intersect_sphere(origins, d, center, radius):
    oc = origins - center
    b = oc @ d
    c = np.einsum("ij,ij->i", oc, oc) - radius ** 2
    disc = b * b - c
    hit = disc >= 0
    t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
    t = np.where(t > 0, t, np.inf)
    normals = (origins + t[:, None] * d - center) / radius
    return t, np.nan_to_num(normals)


def _intersect_box(origins, d, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (center - half - origins) * inv
        t2 = (center + half - origins) * inv
    t_min = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    t_max = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    t_near = t_min.max(axis=1)
    t_far = t_max.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 0) & (t_near > 0)
    axis = t_min.argmax(axis=1)
    normals = np.zeros_like(origins)
    normals[np.arange(len(origins)), axis] = -np.sign(d[axis])
    return np.where(hit, t_near, np.inf), normals


def _intersect_cylinder(origins, d, cx, cy, radius, bottom, top):
    # side: 2D quadratic in the xy plane
    ox, oy = origins[:, 0] - cx, origins[:, 1] - cy
    a = d[0] ** 2 + d[1] ** 2
    b = ox * d[0] + oy * d[1]
    c = ox ** 2 + oy ** 2 - radius ** 2
    disc = b * b - a * c
    hit = (disc >= 0) & (a > 0)
    t_side = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / max(a, 1e-300), np.inf)
    z_side = origins[:, 2] + t_side * d[2]
    t_side = np.where((t_side > 0) & (z_side >= bottom) & (z_side <= top), t_side, np.inf)

    t_cap = (top - origins[:, 2]) / d[2]
    px = origins[:, 0] + t_cap * d[0] - cx
    py = origins[:, 1] + t_cap * d[1] - cy
    t_cap = np.where((t_cap > 0) & (px ** 2 + py ** 2 <= radius ** 2), t_cap, np.inf)

    t = np.minimum(t_side, t_cap)
    p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    side_normals = np.stack([(p[:, 0] - cx) / radius, (p[:, 1] - cy) / radius, np.zeros(len(p))], axis=-1)
    cap_normals = np.broadcast_to(np.array([0.0, 0.0, 1.0]), origins.shape)
    normals = np.where((t_side <= t_cap)[:, None], side_normals, cap_normals)
    return t, normals


def _intersect(obj, origins, d):
    if obj.kind is Primitive.Sphere:
        return _intersect_sphere(origins, d, np.array([obj.x, obj.y, GROUND_HEIGHT + obj.size]), obj.size)
    if obj.kind is Primitive.Box:
        return _intersect_box(origins, d, np.array([obj.x, obj.y, GROUND_HEIGHT + obj.size]), obj.size)
    return _intersect_cylinder(origins, d, obj.x, obj.y, obj.size, GROUND_HEIGHT, GROUND_HEIGHT + obj.height)


def derive_line_field(depth_scalar, instance_ids, threshold=LINE_DEPTH_THRESHOLD):
    """
    Edge map: a pixel is on a line when any 4-neighbour lies across a depth jump larger than ``threshold`` (on the
    normalised depth scale) or belongs to a different instance.
    """
    edges = np.zeros(depth_scalar.shape, dtype=bool)
    for axis in (0, 1):
        jump = np.abs(np.diff(depth_scalar, axis=axis)) > threshold
        jump |= np.diff(instance_ids.astype(np.int32), axis=axis) != 0
        if axis == 0:
            edges[:-1, :] |= jump
            edges[1:, :] |= jump
        else:
            edges[:, :-1] |= jump
            edges[:, 1:] |= jump
    return edges


def render(spec, resolution=DEFAULT_RESOLUTION, seed=0):
    """Render the shaded image and the four exact intrinsics of a scene."""
    if resolution < 4:
        raise ConfigError(f"Resolution must be at least 4, not {resolution}", key="resolution")
    origins, d = spec.camera.rays(resolution)
    depth, normals = _intersect_plane(origins, d, GROUND_HEIGHT)
    normals = np.array(normals)
    ids = np.zeros(len(origins), dtype=np.uint8)
    albedo = np.broadcast_to(np.array(GROUND_ALBEDO), origins.shape).copy()
    for obj in spec.objects:
        with np.errstate(invalid="ignore", over="ignore"):
            t, n = _intersect(obj, origins, d)
        closer = t < depth
        depth = np.where(closer, t, depth)
        normals[closer] = n[closer]
        ids[closer] = obj.instance_id
        albedo[closer] = obj.albedo

    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ spec.light, 0.0, 1.0)
    image = (albedo * shade[:, None]).reshape(resolution, resolution, 3)
    shape = (resolution, resolution)
    depth = depth.reshape(shape)
    ids = ids.reshape(shape)
    camera_normals = spec.camera.to_camera_frame(normals).reshape(resolution, resolution, 3)

    depth_scalar = normalize_depth_scalar(depth).astype(np.float32)
    stack = IntrinsicStack(depth=apply_colormap(depth_scalar),
                           normal=encode_normals(camera_normals),
                           segmentation=segmentation_palette(ids),
                           line=line_field(derive_line_field(depth_scalar, ids)))
    caption = Vocabulary().encode(caption_for(spec))
    return SceneSample(image=(image * 2.0 - 1.0).astype(np.float32), intrinsics=stack, caption=caption, seed=seed,
                       instance_ids=ids, depth_scalar=depth_scalar)


# ********
# Captions
# ********


class Vocabulary:
    """Fixed caption vocabulary. Token 0 is the null (unconditional) token, token 1 pads captions."""

    NULL = "<null>"
    PAD = "<pad>"

    def __init__(self):
        words = [self.NULL, self.PAD, "a", "and", "on", "plane"] + list(COUNT_WORDS) + list(COLORS)
        for p in Primitive:
            words += [str(p), p.plural()]
        self.words = words
        self.index = {w: k for k, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    def encode(self, caption, length=CAPTION_LENGTH):
        tokens = caption.split()
        unknown = [t for t in tokens if t not in self.index]
        if unknown:
            raise ContractError(f"Words outside the caption vocabulary: {unknown}", key="caption")
        if len(tokens) > length:
            raise ContractError(f"Caption has {len(tokens)} tokens, at most {length} fit", key="caption")
        ids = [self.index[t] for t in tokens] + [self.index[self.PAD]] * (length - len(tokens))
        return np.array(ids, dtype=np.int64)

    def decode(self, ids):
        words = [self.words[int(k)] for k in ids]
        return " ".join(w for w in words if w not in (self.NULL, self.PAD))

    def null_caption(self, length=CAPTION_LENGTH):
        return np.zeros(length, dtype=np.int64)


def caption_for(spec):
    """
    "<count> <colour> <type(s)> and ... on a plane", one phrase per (type, colour) group in a fixed order.
    The empty scene is just "a plane".
    """
    groups = {}
    for o in spec.objects:
        key = (o.kind.value, list(COLORS).index(o.color))
        groups[key] = groups.get(key, 0) + 1
    phrases = []
    for (kind, color), count in sorted(groups.items()):
        primitive = Primitive(kind)
        noun = str(primitive) if count == 1 else primitive.plural()
        phrases.append(f"{COUNT_WORDS[count - 1]} {list(COLORS)[color]} {noun}")
    if not phrases:
        return "a plane"
    return " and ".join(phrases) + " on a plane"


# ********
# Datasets
# ********


def shard_paths(out):
    """The two container files of a dataset shard: (images, intrinsics)."""
    out = str(out)
    return f"{out}.images.ildm", f"{out}.intrinsics.ildm"


def _render_one(args):
    seed, index, resolution = args
    rng = np.random.default_rng([seed, index])
    return render(SceneSpec.random(rng), resolution, seed=seed)


def generate_dataset(n, seed, resolution=DEFAULT_RESOLUTION, out=None, workers=1, quiet=True):
    """
    Render ``n`` random scenes (sample k drawn from a generator seeded with (seed, k)) and, when ``out`` is
    given, write them as a shard. Returns the SceneDataset.
    """
    if n < 1:
        raise ConfigError(f"A dataset needs at least one sample, not {n}", key="n")
    jobs = [(seed, k, resolution) for k in range(n)]
    if workers > 1:
        with multiprocessing.Pool(processes=workers) as pool:
            samples = list(tqdm(pool.imap(_render_one, jobs), total=n, desc="scenes", disable=quiet))
    else:
        samples = [_render_one(j) for j in tqdm(jobs, desc="scenes", disable=quiet)]

    dataset = SceneDataset(
        images=np.stack([s.image for s in samples]),
        captions=np.stack([s.caption for s in samples]),
        intrinsics=np.stack([stack_to_array(s.intrinsics) for s in samples]),
        depth_scalar=np.stack([s.depth_scalar for s in samples]),
        instance_ids=np.stack([s.instance_ids for s in samples]),
        header={"seed": int(seed), "n": int(n), "resolution": int(resolution), "vocabulary": Vocabulary().words})
    if out is not None:
        dataset.save(out)
    return dataset


class SceneDataset:
    """
    A shard of rendered scenes held in memory. ``intrinsics`` is [N, H, W, 12] (or None when only the image
    half was loaded).
    """

    def __init__(self, images, captions, intrinsics=None, depth_scalar=None, instance_ids=None, header=None):
        self.images = images
        self.captions = captions
        self.intrinsics = intrinsics
        self.depth_scalar = depth_scalar
        self.instance_ids = instance_ids
        self.header = header or {}

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return self.images.shape[1]

    def stack(self, k):
        f = self.intrinsics[k]
        return IntrinsicStack(*[f[..., 3 * j:3 * j + 3] for j in range(len(INTRINSIC_NAMES))])

    def subset(self, idx):
        pick = (lambda a: a[idx] if a is not None else None)
        return SceneDataset(self.images[idx], self.captions[idx], pick(self.intrinsics), pick(self.depth_scalar),
                            pick(self.instance_ids), dict(self.header))

    def save(self, out):
        image_path, intrinsic_path = shard_paths(out)
        images = TensorContainer({"images": self.images.astype(np.float32),
                                  "captions": self.captions.astype(np.uint8)})
        images.set_header(self.header)
        images.save(image_path)
        if self.intrinsics is not None:
            fields = {name: self.intrinsics[..., 3 * k:3 * k + 3].astype(np.float32)
                      for k, name in enumerate(INTRINSIC_NAMES)}
            fields["depth_scalar"] = self.depth_scalar.astype(np.float32)
            fields["instance_ids"] = self.instance_ids.astype(np.uint8)
            intrinsics = TensorContainer(fields)
            intrinsics.set_header(self.header)
            intrinsics.save(intrinsic_path)

    @classmethod
    def load(cls, out, with_intrinsics=True):
        image_path, intrinsic_path = shard_paths(out)
        images = TensorContainer.load(image_path)
        dataset = cls(np.array(images["images"]), np.array(images["captions"]).astype(np.int64),
                      header=images.header())
        if with_intrinsics:
            fields = TensorContainer.load(intrinsic_path)
            dataset.intrinsics = np.concatenate([np.array(fields[name]) for name in INTRINSIC_NAMES], axis=-1)
            dataset.depth_scalar = np.array(fields["depth_scalar"])
            dataset.instance_ids = np.array(fields["instance_ids"])
            if dataset.intrinsics.shape[-1] != NUM_INTRINSIC_CHANNELS:
                raise ContractError("Intrinsic shard has the wrong number of channels", key=intrinsic_path)
        return dataset
