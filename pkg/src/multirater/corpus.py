"""Synthetic segmentation corpus with controllable annotation noise.

Each sample is a grayscale image containing one or two smooth random blobs
(soft intensity gradients over a textured background, in the spirit of
paired lung fields) plus a clean ground-truth mask. Noisy annotations are
derived from the clean mask by five noise operators, one operator per
annotation source:

    source 0 -> erode_dilate    disc erosion or dilation, 50/50
    source 1 -> constant_shift  translate right by a constant pixel count
    source 2 -> square_reverse  invert labels inside one random square
    source 3 -> polygonize      resample the boundary through a closed
                                Catmull-Rom cubic spline
    source 4 -> random_erase    drop one connected component with prob p

Severities are calibrated per operator by bisection so the corpus-mean Dice
of the noisy annotations against clean truth hits a requested target.

All randomness is derived from the corpus seed through per-sample
SeedSequences, so generation is order-independent and bitwise reproducible.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as draw_polygon
from skimage.measure import find_contours

from .metrics import dice

NOISE_KINDS = (
    "erode_dilate",
    "constant_shift",
    "square_reverse",
    "polygonize",
    "random_erase",
)

# (least severe, most severe) magnitude per kind; polygonize counts control
# points, so its least severe end is the upper bound
MAGNITUDE_BOUNDS = {
    "erode_dilate": (0.0, 8.0),
    "constant_shift": (0.0, 16.0),
    "square_reverse": (0.0, 24.0),
    "polygonize": (64.0, 3.0),
    "random_erase": (0.0, 1.0),
}


class CorpusError(ValueError):
    pass


class CalibrationError(CorpusError):
    def __init__(self, kind, target, achieved_bracket):
        self.kind = kind
        self.target = target
        self.achieved_bracket = achieved_bracket
        lo, hi = achieved_bracket
        super().__init__(
            f"{kind}: target mean Dice {target} unreachable within magnitude "
            f"bounds; achieved bracket [{lo:.4f}, {hi:.4f}]"
        )


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    magnitude: float
    seed: int

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise CorpusError(f"unknown noise kind {self.kind!r}")
        lo, hi = sorted(MAGNITUDE_BOUNDS[self.kind])
        if not lo <= self.magnitude <= hi:
            raise CorpusError(
                f"{self.kind} magnitude {self.magnitude} outside [{lo}, {hi}]"
            )


@dataclass
class Sample:
    id: str
    image: np.ndarray         # (H,W) float64 in [0,1]
    clean_mask: np.ndarray    # (H,W) uint8 {0,1}
    annotations: np.ndarray   # (M,H,W) uint8 {0,1}


@dataclass
class Corpus:
    samples: list
    num_sources: int
    height: int
    width: int
    seed: int
    noise: dict = field(default_factory=dict)       # kind -> magnitude
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def split(self, which):
        wanted = {"train": self.train_ids, "test": self.test_ids}[which]
        by_id = {s.id: s for s in self.samples}
        return [by_id[i] for i in wanted]


# -- clean sample generation --------------------------------------------------

def _blob_mask(rng, h, w, cx, cy, r0):
    yy, xx = np.mgrid[0:h, 0:w]
    theta = np.arctan2(yy - cy, xx - cx)
    dist = np.hypot(yy - cy, xx - cx)
    radius = np.full_like(theta, r0)
    for k in range(2, 6):
        amp = rng.uniform(0.0, 0.45 / k)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        radius = radius + r0 * amp * np.cos(k * theta + phase)
    return dist <= radius


def _render_sample(rng, h, w):
    two_blobs = rng.random() < 0.7
    mask = np.zeros((h, w), dtype=bool)
    blobs = []
    if two_blobs:
        centers = [(rng.uniform(0.22, 0.34) * w, rng.uniform(0.4, 0.6) * h),
                   (rng.uniform(0.66, 0.78) * w, rng.uniform(0.4, 0.6) * h)]
        radii = [rng.uniform(0.13, 0.20) * min(h, w) for _ in range(2)]
    else:
        centers = [(rng.uniform(0.35, 0.65) * w, rng.uniform(0.35, 0.65) * h)]
        radii = [rng.uniform(0.18, 0.30) * min(h, w)]
    for (cx, cy), r0 in zip(centers, radii):
        blob = _blob_mask(rng, h, w, cx, cy, r0)
        blobs.append(blob)
        mask |= blob

    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), 2.0)
    texture = texture / max(np.abs(texture).max(), 1e-9)
    body = ndimage.gaussian_filter(mask.astype(float), 1.2)
    tilt = (rng.uniform(-0.06, 0.06) * np.linspace(-1, 1, w)[None, :]
            + rng.uniform(-0.06, 0.06) * np.linspace(-1, 1, h)[:, None])
    image = 0.30 + 0.10 * texture + 0.45 * body + tilt
    image = np.clip(image, 0.0, 1.0)
    # quantize to the 8-bit grid so file round trips are bitwise exact
    image = np.round(image * 255.0) / 255.0
    return image, mask, len(blobs)


def generate_clean(n, h, w, seed):
    """n deterministic (image, clean_mask) pairs of smooth random blobs.

    Rejection-samples each blob layout until the mask has foreground
    fraction in [0.05, 0.5] and one connected component per blob.
    """
    if n <= 0:
        raise CorpusError(f"sample count must be positive, got {n}")
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 17, i)))
        for _attempt in range(64):
            image, mask, n_blobs = _render_sample(rng, h, w)
            frac = mask.mean()
            _, n_comp = ndimage.label(mask)
            if 0.05 <= frac <= 0.5 and 1 <= n_comp <= n_blobs:
                break
        else:
            raise CorpusError(f"could not draw a valid sample for index {i}")
        out.append((image, mask.astype(np.uint8)))
    return out


# -- noise operators ----------------------------------------------------------

def _randomized_round(value, rng):
    base = int(np.floor(value))
    frac = value - base
    return base + (1 if rng.random() < frac else 0)


def _erode_dilate(mask, radius, rng):
    erode = rng.random() < 0.5
    # dither the disc radius per sample so the corpus-mean severity response
    # is continuous (Euclidean distances form a lattice shared by all masks)
    r = radius + rng.uniform(-0.5, 0.5)
    if r < 1.0:  # no pixel is closer than 1 to the opposite phase
        return mask.copy()
    if erode:
        return (ndimage.distance_transform_edt(mask) > r).astype(np.uint8)
    grown = ndimage.distance_transform_edt(~mask.astype(bool)) <= r
    return (grown | mask.astype(bool)).astype(np.uint8)


def _constant_shift(mask, pixels, rng):
    d = _randomized_round(pixels, rng)
    out = np.zeros_like(mask)
    if d == 0:
        return mask.copy()
    if d < mask.shape[1]:
        out[:, d:] = mask[:, :-d]
    return out


def _square_reverse(mask, side, rng):
    s = _randomized_round(side, rng)
    out = mask.copy()
    if s <= 0:
        return out
    h, w = mask.shape
    s = min(s, h, w)
    r0 = int(rng.integers(0, h - s + 1))
    c0 = int(rng.integers(0, w - s + 1))
    out[r0:r0 + s, c0:c0 + s] = 1 - out[r0:r0 + s, c0:c0 + s]
    return out


def _catmull_rom_closed(points, samples_per_segment=16):
    """Closed interpolating cubic spline through the given (row,col) points."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)
    curve = []
    for i in range(n):
        p0, p1, p2, p3 = pts[(i - 1) % n], pts[i], pts[(i + 1) % n], pts[(i + 2) % n]
        t2, t3 = t * t, t * t * t
        seg = (0.5 * ((2 * p1)
                      + np.outer(t, -p0 + p2)
                      + np.outer(t2, 2 * p0 - 5 * p1 + 4 * p2 - p3)
                      + np.outer(t3, -p0 + 3 * p1 - 3 * p2 + p3)))
        curve.append(seg)
    return np.concatenate(curve)


def _polygonize(mask, n_points, rng):
    k = max(3, _randomized_round(n_points, rng))
    out = np.zeros_like(mask)
    padded = np.pad(mask, 1).astype(float)
    for contour in find_contours(padded, 0.5):
        contour = contour - 1.0  # undo padding offset
        if len(contour) < 4:
            continue
        # k uniformly random positions along the traced boundary, kept in
        # traversal order so the reconnecting spline stays a simple loop
        pos = np.sort(rng.random(k)) * (len(contour) - 1)
        anchors = contour[pos.astype(int)]
        curve = _catmull_rom_closed(anchors)
        rr, cc = draw_polygon(curve[:, 0], curve[:, 1], shape=mask.shape)
        out[rr, cc] = 1
    return out


def _random_erase(mask, prob, rng):
    roll = rng.random()
    labels, n_comp = ndimage.label(mask)
    out = mask.copy()
    if n_comp == 0 or roll >= prob:
        return out
    victim = int(rng.integers(1, n_comp + 1))
    out[labels == victim] = 0
    return out


_NOISE_FNS = {
    "erode_dilate": _erode_dilate,
    "constant_shift": _constant_shift,
    "square_reverse": _square_reverse,
    "polygonize": _polygonize,
    "random_erase": _random_erase,
}


def apply_noise(mask, spec):
    """Apply one noise operator; deterministic given (mask, spec)."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise CorpusError("mask must be binary {0,1}")
    mask = mask.astype(np.uint8)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    out = _NOISE_FNS[spec.kind](mask, spec.magnitude, rng)
    return out.astype(np.uint8)


# -- severity calibration -----------------------------------------------------

def _noise_seed(corpus_seed, sample_index, source):
    # stable per-(sample, source) stream, independent of generation order
    return int(np.random.SeedSequence(
        (corpus_seed, 29, sample_index, source)).generate_state(1)[0])


def _mean_dice_at(kind, magnitude, masks, seeds):
    scores = [
        dice(apply_noise(mask, NoiseSpec(kind, magnitude, seed)), mask)
        for mask, seed in zip(masks, seeds)
    ]
    return float(np.mean(scores))


def calibrate_noise(masks, target_mean_dice, tol, seeds_by_kind,
                    kinds=NOISE_KINDS, max_iter=40):
    """Bisect each operator's magnitude to hit the target corpus-mean Dice.

    seeds_by_kind maps kind -> per-mask seed list (the same seeds later used
    to synthesize the annotations, so the measured Dice is the achieved one).
    Returns (magnitudes, achieved) dicts. Raises CalibrationError when a
    target cannot be bracketed within the documented magnitude bounds.
    """
    if not 0.5 < target_mean_dice <= 1.0:
        raise CorpusError(f"target mean Dice must be in (0.5, 1], got {target_mean_dice}")
    if tol <= 0.0:
        raise CorpusError(f"tol must be positive, got {tol}")
    magnitudes = {}
    achieved = {}
    for kind in kinds:
        gentle, harsh = MAGNITUDE_BOUNDS[kind]
        seeds = seeds_by_kind[kind]
        d_gentle = _mean_dice_at(kind, gentle, masks, seeds)
        if d_gentle <= target_mean_dice:
            # least severe setting already at/below target
            if abs(d_gentle - target_mean_dice) <= tol:
                magnitudes[kind], achieved[kind] = gentle, d_gentle
                continue
            raise CalibrationError(kind, target_mean_dice,
                                   (d_gentle, d_gentle))
        d_harsh = _mean_dice_at(kind, harsh, masks, seeds)
        if d_harsh > target_mean_dice:
            raise CalibrationError(kind, target_mean_dice, (d_harsh, d_gentle))
        lo, hi = gentle, harsh  # dice(lo) > target >= dice(hi)
        best_mag, best_dice = harsh, d_harsh
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            d_mid = _mean_dice_at(kind, mid, masks, seeds)
            if abs(d_mid - target_mean_dice) < abs(best_dice - target_mean_dice):
                best_mag, best_dice = mid, d_mid
            if abs(d_mid - target_mean_dice) <= 0.25 * tol:
                break
            if d_mid > target_mean_dice:
                lo = mid
            else:
                hi = mid
        if abs(best_dice - target_mean_dice) > tol:
            raise CalibrationError(kind, target_mean_dice,
                                   (min(best_dice, d_gentle), max(best_dice, d_gentle)))
        magnitudes[kind], achieved[kind] = best_mag, best_dice
    return magnitudes, achieved


# -- corpus assembly ----------------------------------------------------------

def majority_vote(annotations):
    """Pixelwise fusion: foreground iff at least half the sources vote 1."""
    ann = np.asarray(annotations, dtype=np.float64)
    if ann.ndim != 3 or ann.shape[0] < 1:
        raise CorpusError(f"expected (M,H,W) annotations, got {ann.shape}")
    return (ann.mean(axis=0) >= 0.5).astype(np.uint8)


def build_corpus(n, h, w, num_sources, target_dice, tol, seed,
                 test_fraction=0.2):
    """Generate, calibrate, and annotate a full corpus."""
    if not 1 <= num_sources <= len(NOISE_KINDS):
        raise CorpusError(
            f"num_sources must be in [1, {len(NOISE_KINDS)}], got {num_sources}"
        )
    if not 0.0 <= test_fraction < 1.0:
        raise CorpusError(f"test_fraction must be in [0,1), got {test_fraction}")
    clean = generate_clean(n, h, w, seed)
    masks = [mask for _, mask in clean]
    kinds = NOISE_KINDS[:num_sources]
    seeds_by_kind = {
        kind: [_noise_seed(seed, i, src) for i in range(n)]
        for src, kind in enumerate(kinds)
    }
    magnitudes, achieved = calibrate_noise(
        masks, target_dice, tol, seeds_by_kind, kinds=kinds)
    samples = []
    for i, (image, mask) in enumerate(clean):
        anns = np.stack([
            apply_noise(mask, NoiseSpec(kind, magnitudes[kind],
                                        seeds_by_kind[kind][i]))
            for kind in kinds
        ])
        samples.append(Sample(id=f"s{i:04d}", image=image, clean_mask=mask,
                              annotations=anns))
    n_test = int(round(n * test_fraction))
    n_train = n - n_test
    ids = [s.id for s in samples]
    return Corpus(
        samples=samples, num_sources=num_sources, height=h, width=w,
        seed=seed, noise=magnitudes,
        train_ids=ids[:n_train], test_ids=ids[n_train:],
        meta={"target_dice": target_dice, "tol": tol,
              "achieved_dice": achieved, "test_fraction": test_fraction},
    )


def mean_annotation_dice(corpus):
    """Corpus-mean Dice of every annotation against its clean mask."""
    scores = [
        dice(s.annotations[m], s.clean_mask)
        for s in corpus.samples
        for m in range(s.annotations.shape[0])
    ]
    return float(np.mean(scores))


# -- corpus directory I/O -------------------------------------------------------
#
# Layout: manifest.json + binary 8-bit P5 graymaps: img/<id>.pgm (intensities),
# gt/<id>.pgm and ann/<id>_<m>.pgm (masks with pixels strictly in {0, 255}).

def _write_pgm(path, data_u8):
    h, w = data_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data_u8, dtype=np.uint8).tobytes())


def _read_pgm(path):
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise CorpusError(f"{path}: not a binary P5 graymap")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise CorpusError(f"{path}: expected maxval 255, got {maxval}")
    pixels = raw[m.end():]
    if len(pixels) != h * w:
        raise CorpusError(f"{path}: expected {h * w} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def _read_mask_pgm(path, field_name):
    data = _read_pgm(path)
    bad = set(np.unique(data)) - {0, 255}
    if bad:
        raise CorpusError(
            f"{path}: {field_name} has non-binary byte(s) {sorted(bad)}; "
            "masks must contain only 0 and 255"
        )
    return (data // 255).astype(np.uint8)


def save_corpus(corpus, out_dir):
    out = Path(out_dir)
    for sub in ("img", "gt", "ann"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": corpus.seed,
        "num_sources": corpus.num_sources,
        "height": corpus.height,
        "width": corpus.width,
        "noise": [
            {"source": m, "kind": kind, "magnitude": corpus.noise[kind]}
            for m, kind in enumerate(NOISE_KINDS[:corpus.num_sources])
        ],
        "train_ids": corpus.train_ids,
        "test_ids": corpus.test_ids,
        "samples": [s.id for s in corpus.samples],
        "meta": corpus.meta,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    for s in corpus.samples:
        _write_pgm(out / "img" / f"{s.id}.pgm",
                   np.round(s.image * 255.0).astype(np.uint8))
        _write_pgm(out / "gt" / f"{s.id}.pgm", s.clean_mask * 255)
        for m in range(s.annotations.shape[0]):
            _write_pgm(out / "ann" / f"{s.id}_{m}.pgm", s.annotations[m] * 255)


def load_corpus(in_dir):
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorpusError(f"{manifest_path}: missing manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{manifest_path}: malformed manifest: {exc}") from None
    for key in ("seed", "num_sources", "height", "width", "samples"):
        if key not in manifest:
            raise CorpusError(f"{manifest_path}: manifest missing field {key!r}")
    ids = manifest["samples"]
    on_disk = sorted(p.stem for p in (root / "img").glob("*.pgm"))
    if sorted(ids) != on_disk:
        raise CorpusError(
            f"{manifest_path}: manifest lists {len(ids)} samples but img/ "
            f"holds {len(on_disk)}"
        )
    h, w = manifest["height"], manifest["width"]
    num_sources = manifest["num_sources"]
    samples = []
    for sid in ids:
        image = _read_pgm(root / "img" / f"{sid}.pgm").astype(np.float64) / 255.0
        gt = _read_mask_pgm(root / "gt" / f"{sid}.pgm", "clean_mask")
        anns = np.stack([
            _read_mask_pgm(root / "ann" / f"{sid}_{m}.pgm", f"annotation {m}")
            for m in range(num_sources)
        ])
        for name, arr in (("image", image), ("clean_mask", gt)):
            if arr.shape != (h, w):
                raise CorpusError(
                    f"{sid}: {name} has shape {arr.shape}, manifest says {(h, w)}"
                )
        samples.append(Sample(id=sid, image=image, clean_mask=gt,
                              annotations=anns))
    noise = {entry["kind"]: entry["magnitude"]
             for entry in manifest.get("noise", [])}
    return Corpus(
        samples=samples, num_sources=num_sources, height=h, width=w,
        seed=manifest["seed"], noise=noise,
        train_ids=manifest.get("train_ids", []),
        test_ids=manifest.get("test_ids", []),
        meta=manifest.get("meta", {}),
    )
