"""Landmark-distance metrics with per-frame similarity normalization.

F-LMD averages the landmark Euclidean error over 68 face points, M-LMD over
the 20 mouth points. Before measuring, each generated frame is aligned to the
ground-truth frame with the least-squares similarity transform (scale,
proper rotation, translation), which removes head-pose and viewpoint effects.

There is no renderer or landmark detector here: a fixed ``LandmarkBasis``
maps 70-dim motion to 68 2-D landmarks. Facial coefficients act linearly and
head pose acts as an exact 2-D similarity transform.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .motion import FACIAL_DIM, FULL_DIM, DEFAULT_LAYOUT

N_LANDMARKS = 68
MOUTH_LANDMARKS = tuple(range(48, 68))


class DegenerateError(ValueError):
    """Source points have no spread, so no similarity transform is defined."""


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * points @ self.rotation.T + self.translation


def kabsch_umeyama(src, dst):
    """Least-squares similarity transform mapping ``src`` onto ``dst`` (both L x k).

    Uses the SVD of the centered cross-covariance with the sign correction
    that keeps det(R) = +1 even when the best orthogonal fit is a reflection.
    """
    P = np.asarray(src, dtype=np.float64)
    Q = np.asarray(dst, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2:
        raise ValueError(f"point sets must share an (L, k) shape, got {P.shape} and {Q.shape}")
    if P.shape[0] < 2:
        raise ValueError("need at least two points")
    mu_p, mu_q = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mu_p, Q - mu_q
    var_p = (Pc * Pc).sum() / P.shape[0]
    if var_p <= 1e-300:
        raise DegenerateError("source points are all coincident")
    cov = Qc.T @ Pc / P.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(P.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[-1] = -1.0
    R = (U * S) @ Vt
    s = float((D * S).sum() / var_p)
    t = mu_q - s * R @ mu_p
    return SimilarityTransform(s, R, t)


def align_frames(gen, gt):
    """Per-frame similarity alignment of (F, L, 2) ``gen`` onto ``gt``.

    Returns (aligned, valid) where ``valid`` flags frames with non-degenerate
    source points; invalid frames are left unaligned.
    """
    gen = np.ascontiguousarray(gen, dtype=np.float64)
    gt = np.ascontiguousarray(gt, dtype=np.float64)
    if gen.shape[-1] == 2:
        scale, angle, trans, _ = kernels.umeyama2d_batch(gen, gt)
        c, s = np.cos(angle), np.sin(angle)
        x, y = gen[..., 0], gen[..., 1]
        aligned = np.stack([c[:, None] * x - s[:, None] * y, s[:, None] * x + c[:, None] * y], axis=-1)
        aligned = scale[:, None, None] * aligned + trans[:, None, :]
        spread = ((gen - gen.mean(axis=1, keepdims=True)) ** 2).sum(axis=(1, 2))
        return aligned, spread > 1e-300
    aligned = gen.copy()
    valid = np.ones(gen.shape[0], dtype=bool)
    for i in range(gen.shape[0]):
        try:
            aligned[i] = kabsch_umeyama(gen[i], gt[i]).apply(gen[i])
        except DegenerateError:
            valid[i] = False
    return aligned, valid


@dataclass
class LmdResult:
    value: float
    per_frame: np.ndarray
    skipped: int


def lmd_details(gen, gt):
    gen = np.asarray(gen, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if gen.shape != gt.shape or gen.ndim != 3:
        raise ValueError(f"landmark sequences must share an (N, L, k) shape, got {gen.shape} and {gt.shape}")
    aligned, valid = align_frames(gen, gt)
    per_frame = np.linalg.norm(aligned - gt, axis=-1).mean(axis=1)
    if not valid.any():
        raise DegenerateError("every frame is degenerate")
    per_frame = np.where(valid, per_frame, np.nan)
    return LmdResult(float(np.nanmean(per_frame)), per_frame, int((~valid).sum()))


def lmd(gen, gt):
    """Mean over frames of the mean landmark distance after per-frame alignment."""
    return lmd_details(gen, gt).value


# ---------------------------------------------------------------- toy projector

def _template_face(rng):
    """68 dlib-ordered points on a 256 x 256 canvas, lightly jittered."""
    pts = []
    a = np.linspace(np.pi * 0.95, np.pi * 0.05, 17)
    pts += list(zip(128 + 80 * np.cos(a), 120 + 95 * np.sin(a)))             # jaw 0-16
    for cx in (88, 168):                                                     # brows 17-26
        pts += [(cx + dx, 80 - 6 * np.cos(dx / 25)) for dx in np.linspace(-25, 25, 5)]
    pts += [(128, y) for y in np.linspace(95, 140, 4)]                       # nose bridge 27-30
    pts += [(128 + dx, 150 - abs(dx) / 4) for dx in np.linspace(-16, 16, 5)]  # nose base 31-35
    for cx in (92, 164):                                                     # eyes 36-47
        e = np.linspace(0, 2 * np.pi, 7)[:-1]
        pts += list(zip(cx + 15 * np.cos(e), 102 + 6 * np.sin(e)))
    m = np.linspace(np.pi, -np.pi, 13)[:-1]
    pts += list(zip(128 + 32 * np.cos(m), 185 + 14 * np.sin(m)))             # outer lip 48-59
    m = np.linspace(np.pi, -np.pi, 9)[:-1]
    pts += list(zip(128 + 20 * np.cos(m), 185 + 6 * np.sin(m)))              # inner lip 60-67
    pts = np.asarray(pts, dtype=np.float64)
    return pts + rng.normal(0, 0.5, pts.shape)


@dataclass
class LandmarkBasis:
    template: np.ndarray        # (68, 2)
    facial: np.ndarray          # (64, 68, 2) landmark displacement per facial coefficient
    rotation_gain: float = 0.2  # radians per unit roll
    translation_gain: float = 10.0
    log_scale_gain: float = 0.1
    mouth_landmarks: tuple = MOUTH_LANDMARKS

    def __post_init__(self):
        flat = self.facial.reshape(FACIAL_DIM, -1)
        if np.linalg.matrix_rank(flat) < FACIAL_DIM:
            raise ValueError("facial landmark map must have full column rank")

    @property
    def center(self):
        return self.template.mean(axis=0)

    def facial_landmarks(self, motion):
        m = np.asarray(motion, dtype=np.float64)
        return self.template + np.tensordot(m[..., :FACIAL_DIM], self.facial, axes=(-1, 0))

    def pose_transform(self, pose):
        """Per-frame (scale, angle, translation) from the six pose values.

        Roll rotates in the image plane, x/y translation shifts, z translation
        scales; pitch and yaw have no effect in this orthographic toy.
        """
        pose = np.asarray(pose, dtype=np.float64)
        return (np.exp(self.log_scale_gain * pose[..., 5]), self.rotation_gain * pose[..., 2],
                self.translation_gain * pose[..., 3:5])

    def project(self, motion):
        """(N, 70) motion -> (N, 68, 2) landmarks."""
        m = np.asarray(motion, dtype=np.float64)
        if m.shape[-1] != FULL_DIM:
            raise ValueError(f"projection needs {FULL_DIM}-dim motion, got {m.shape[-1]}")
        pts = self.facial_landmarks(m) - self.center
        s, ang, t = self.pose_transform(m[..., FACIAL_DIM:])
        c, sn = np.cos(ang)[..., None], np.sin(ang)[..., None]
        x, y = pts[..., 0], pts[..., 1]
        rot = np.stack([c * x - sn * y, sn * x + c * y], axis=-1)
        return s[..., None, None] * rot + self.center + t[..., None, :]


def make_landmark_basis(seed=0, layout=DEFAULT_LAYOUT, gain=1.5, structured=True):
    """Random basis; when ``structured``, mouth coefficients move only mouth
    landmarks and expression coefficients move only the other landmarks."""
    rng = np.random.default_rng(seed)
    template = _template_face(rng)
    facial = rng.normal(0.0, gain, (FACIAL_DIM, N_LANDMARKS, 2))
    if structured:
        mouth_pts = np.zeros(N_LANDMARKS, dtype=bool)
        mouth_pts[list(MOUTH_LANDMARKS)] = True
        for i in range(FACIAL_DIM):
            if i in layout.mouth_indices:
                facial[i, ~mouth_pts] = 0.0
            else:
                facial[i, mouth_pts] = 0.0
    return LandmarkBasis(template, facial)


def f_lmd(gen70, gt70, basis):
    return lmd(basis.project(gen70), basis.project(gt70))


def m_lmd(gen70, gt70, basis):
    idx = list(basis.mouth_landmarks)
    return lmd(basis.project(gen70)[:, idx], basis.project(gt70)[:, idx])


# ---------------------------------------------------------------- run evaluation

@dataclass
class EvalReport:
    rows: list           # dicts with id, f_lmd, m_lmd, frames
    unmatched_generated: list
    unmatched_ground_truth: list

    @property
    def mean_f_lmd(self):
        return float(np.mean([r["f_lmd"] for r in self.rows]))

    @property
    def mean_m_lmd(self):
        return float(np.mean([r["m_lmd"] for r in self.rows]))

    def summary(self):
        return {"clips": len(self.rows), "mean_f_lmd": self.mean_f_lmd, "mean_m_lmd": self.mean_m_lmd,
                "unmatched_generated": self.unmatched_generated,
                "unmatched_ground_truth": self.unmatched_ground_truth}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps({"rows": self.rows, "summary": self.summary()}, indent=1, sort_keys=True))
        with open(out / "table.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["clip_id", "f_lmd", "m_lmd", "frames"])
            for r in self.rows:
                w.writerow([r["id"], repr(r["f_lmd"]), repr(r["m_lmd"]), r["frames"]])
        return out / "report.json", out / "table.csv"


def evaluate_motion_pairs(pairs, basis):
    """``pairs`` maps clip id -> (generated N x 70, ground truth N x 70).

    Sequences of different length are compared on their common prefix.
    """
    rows = []
    for clip_id in sorted(pairs):
        gen, gt = pairs[clip_id]
        n = min(len(gen), len(gt))
        rows.append({"id": clip_id, "f_lmd": f_lmd(gen[:n], gt[:n], basis),
                     "m_lmd": m_lmd(gen[:n], gt[:n], basis), "frames": n})
    return rows


def evaluate_run(gen_dir, manifest, basis, split="test"):
    """Score every exported motion in ``gen_dir`` against ground-truth clips."""
    from .dataset import read_clip
    from .pipeline import find_exports, read_export

    gen_dir = Path(gen_dir)
    if not gen_dir.is_dir():
        raise FileNotFoundError(f"generation directory not found: {gen_dir}")
    exports = find_exports(gen_dir)
    gt_ids = set(manifest.ids(split))
    matched = sorted(set(exports) & gt_ids)
    if not matched:
        raise ValueError(f"no generated clip matches a {split} clip in the manifest")
    pairs = {cid: (read_export(exports[cid])[0], read_clip(manifest, cid).motion) for cid in matched}
    return EvalReport(evaluate_motion_pairs(pairs, basis),
                      sorted(set(exports) - gt_ids), sorted(gt_ids - set(exports)))
