"""Loss functions over a basis field and sample data.

Each loss exists in two forms: a tape-building function (suffix ``_t``)
that composes with the autodiff engine for fitting, and a plain-float
wrapper with the documented operation signature. The float wrappers
evaluate on a throwaway constant tape, so both forms share one
implementation of the math.

Hinge conventions: the surface and free-space hinges default to punishing
violations *outside* the margin (loss is zero whenever the constraint holds
within eps). The alternative ``"paper-min"`` convention, which activates
inside the margin instead, is selectable for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import FieldError
from .field import BasisField, FieldProgram
from .geom import PointCloud, SampleSet

HINGE_CONVENTIONS = ("outside", "paper-min")


@dataclass
class LossWeights:
    """Weights and constants for the composite objectives."""

    smooth: float = 0.5
    reg: float = 0.01            # offset-regularizer weight during epoch 0
    face: float = 1.0
    pos: float = 10.0
    adj: float = 10.0
    stable: float = 0.1
    hinge_eps: float = 0.005
    adj_sharp_surface: float = 10000.0
    adj_sharp_balance: float = 1000.0
    hinge_convention: str = "outside"

    def __post_init__(self):
        for name in ("smooth", "reg", "face", "pos", "adj", "stable",
                     "hinge_eps", "adj_sharp_surface", "adj_sharp_balance"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights.{name} must be >= 0")
        if self.hinge_convention not in HINGE_CONVENTIONS:
            raise ValueError(f"unknown hinge convention {self.hinge_convention!r}")

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LossWeights":
        return cls(**doc)


@dataclass
class Anchor:
    """Reference copies of the centers and latents being refined."""

    centers: np.ndarray
    latents: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.latents = np.asarray(self.latents, dtype=np.float64)

    @classmethod
    def from_field(cls, field: BasisField) -> "Anchor":
        return cls(field.centers.copy(), field.latents.copy())

    def check_matches(self, field: BasisField) -> None:
        if self.centers.shape != field.centers.shape or \
                self.latents.shape != field.latents.shape:
            raise FieldError(
                f"anchor shape {self.centers.shape}/{self.latents.shape} does not "
                f"match field {field.centers.shape}/{field.latents.shape}"
            )


@dataclass
class RefineInputs:
    """Point sets consumed by the post-fit refinement objective."""

    surface: PointCloud
    positive: PointCloud
    adjacency: PointCloud


# ---------------------------------------------------------------------------
# Tape-building losses


def loss_sdf_t(prog: FieldProgram, pts: np.ndarray, targets: np.ndarray) -> Var:
    """Blend-weighted absolute error of both selected bases (data term)."""
    blend = prog.blend(pts)
    return _sdf_from_blend(blend, targets)


def _sdf_from_blend(blend, targets: np.ndarray) -> Var:
    r_p = ad.absolute(ad.sub(blend.f_p, targets))
    r_q = ad.absolute(ad.sub(blend.f_q, targets))
    per = ad.add(ad.mul(blend.a_p, r_p), ad.mul(blend.a_q, r_q))
    return ad.vmean(per)


def loss_smooth_t(prog: FieldProgram, pts: np.ndarray) -> Var:
    """Mean |f_p - f_q|: penalizes disagreement of the two selected bases."""
    if prog.field.n_bases == 1:
        return prog.tape.constant(0.0)
    return _smooth_from_blend(prog.blend(pts))


def _smooth_from_blend(blend) -> Var:
    return ad.vmean(ad.absolute(ad.sub(blend.f_p, blend.f_q)))


def loss_sdf_euc_t(prog: FieldProgram, pts: np.ndarray, targets: np.ndarray) -> Var:
    """Absolute error of the Euclidean-nearest basis (ignores blend weights)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    k = prog.field.nearest_center_index(pts)
    prog.tape.note_branch(k)
    f_k = prog.decode(pts, k)
    return ad.vmean(ad.absolute(ad.sub(f_k, targets)))


def loss_reg_t(prog: FieldProgram) -> Var:
    """Mean L1 norm of the center offsets."""
    offs = prog.leaves["offsets"]
    n = prog.field.n_bases
    return ad.vsum(ad.absolute(offs)) * (1.0 / n)


def loss_inte_t(prog: FieldProgram, pts: np.ndarray, targets: np.ndarray,
                weights: LossWeights, epoch: int
                ) -> tuple[Var, dict[str, float], int]:
    """Integrated fitting objective; also returns per-term floats and the
    underflow-fallback count for diagnostics."""
    blend, f_k = prog.blend_with_nearest(pts)
    l_sdf = _sdf_from_blend(blend, targets)
    l_euc = ad.vmean(ad.absolute(ad.sub(f_k, targets)))
    if prog.field.n_bases == 1:
        l_smooth = prog.tape.constant(0.0)
    else:
        l_smooth = _smooth_from_blend(blend)
    l_reg = loss_reg_t(prog)
    reg_w = weights.reg if epoch == 0 else 0.0
    total = ad.add(ad.add(l_sdf, l_euc),
                   ad.add(l_smooth * weights.smooth, l_reg * reg_w))
    parts = {
        "sdf": float(l_sdf.value),
        "sdf_euc": float(l_euc.value),
        "smooth": float(l_smooth.value),
        "reg": float(l_reg.value),
    }
    return total, parts, blend.n_fallback


def loss_face_t(prog: FieldProgram, pts: np.ndarray, eps: float,
                convention: str = "outside") -> Var:
    """Squared hinge keeping |sdf| within eps on surface points."""
    s = prog.blend(pts).sdf
    t = ad.sub(ad.absolute(s), eps)
    h = ad.maximum(t, 0.0) if convention == "outside" else ad.minimum(t, 0.0)
    return ad.vmean(ad.mul(h, h))


def loss_pos_t(prog: FieldProgram, pts: np.ndarray, eps: float,
               convention: str = "outside") -> Var:
    """Squared hinge keeping sdf positive (with margin) on free-space points."""
    s = prog.blend(pts).sdf
    if convention == "outside":
        h = ad.maximum(ad.sub(eps, s), 0.0)
    else:
        h = ad.minimum(ad.sub(ad.neg(s), eps), 0.0)
    return ad.vmean(ad.mul(h, h))


def loss_adj_t(prog: FieldProgram, pts: np.ndarray, weights: LossWeights) -> Var:
    """Weighted agreement of adjacent bases, sharpest near the surface and
    where the two domain weights are balanced."""
    if prog.field.n_bases == 1:
        return prog.tape.constant(0.0)
    blend = prog.blend(pts)
    diff = ad.sub(blend.f_p, blend.f_q)
    m = ad.minimum(ad.absolute(blend.f_p), ad.absolute(blend.f_q))
    w1 = ad.exp(ad.neg(ad.mul(m, m) * weights.adj_sharp_surface))
    dg = ad.sub(blend.g_p, blend.g_q)
    w2 = ad.exp(ad.neg(ad.mul(dg, dg) * weights.adj_sharp_balance))
    return ad.vmean(ad.mul(ad.mul(w1, w2), ad.mul(diff, diff)))


def loss_stable_t(prog: FieldProgram, anchor: Anchor) -> Var:
    """Mean squared drift of centers and latents from their anchors."""
    anchor.check_matches(prog.field)
    dc = ad.sub(prog.leaves["centers"], anchor.centers)
    dz = ad.sub(prog.leaves["latents"], anchor.latents)
    n = prog.field.n_bases
    return (ad.vsum(ad.mul(dc, dc)) + ad.vsum(ad.mul(dz, dz))) * (1.0 / n)


def loss_opt_t(prog: FieldProgram, inputs: RefineInputs, weights: LossWeights,
               anchor: Anchor) -> tuple[Var, dict[str, float]]:
    """Refinement objective: surface + free-space hinges, adjacency
    agreement, and drift control."""
    conv = weights.hinge_convention
    l_face = loss_face_t(prog, inputs.surface.points, weights.hinge_eps, conv)
    l_pos = loss_pos_t(prog, inputs.positive.points, weights.hinge_eps, conv)
    l_adj = loss_adj_t(prog, inputs.adjacency.points, weights)
    l_stable = loss_stable_t(prog, anchor)
    total = ad.add(ad.add(l_face * weights.face, l_pos * weights.pos),
                   ad.add(l_adj * weights.adj, l_stable * weights.stable))
    parts = {
        "face": float(l_face.value),
        "pos": float(l_pos.value),
        "adj": float(l_adj.value),
        "stable": float(l_stable.value),
    }
    return total, parts


# ---------------------------------------------------------------------------
# Float wrappers (documented operation signatures)


def _const_prog(field: BasisField) -> FieldProgram:
    tape = Tape()
    return FieldProgram(tape, field.to_params().leaves(tape, trainable=set()), field)


def loss_sdf(field: BasisField, samples: SampleSet) -> float:
    if len(samples) == 0:
        raise ValueError("samples must be nonempty")
    return float(loss_sdf_t(_const_prog(field), samples.points, samples.targets).value)


def loss_smooth(field: BasisField, samples: SampleSet) -> float:
    return float(loss_smooth_t(_const_prog(field), samples.points).value)


def loss_sdf_euc(field: BasisField, samples: SampleSet) -> float:
    return float(loss_sdf_euc_t(_const_prog(field), samples.points,
                                samples.targets).value)


def loss_reg(field: BasisField) -> float:
    return float(loss_reg_t(_const_prog(field)).value)


def loss_inte(field: BasisField, samples: SampleSet, weights: LossWeights,
              epoch: int) -> float:
    total, _, _ = loss_inte_t(_const_prog(field), samples.points,
                              samples.targets, weights, epoch)
    return float(total.value)


def loss_face(field: BasisField, surface_pts: PointCloud, eps: float,
              convention: str = "outside") -> float:
    return float(loss_face_t(_const_prog(field), surface_pts.points, eps,
                             convention).value)


def loss_pos(field: BasisField, pos_pts: PointCloud, eps: float,
             convention: str = "outside") -> float:
    return float(loss_pos_t(_const_prog(field), pos_pts.points, eps,
                            convention).value)


def loss_adj(field: BasisField, samples: PointCloud,
             weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return float(loss_adj_t(_const_prog(field), samples.points, weights).value)


def loss_stable(field: BasisField, anchor: Anchor) -> float:
    return float(loss_stable_t(_const_prog(field), anchor).value)


def loss_opt(field: BasisField, inputs: RefineInputs, weights: LossWeights,
             anchor: Anchor) -> float:
    total, _ = loss_opt_t(_const_prog(field), inputs, weights, anchor)
    return float(total.value)


def loss_chamfer(a: PointCloud, b: PointCloud) -> float:
    """Two-sided mean of unsquared nearest-neighbor distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer objective requires nonempty point sets")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return float(d_ab.mean() + d_ba.mean())
