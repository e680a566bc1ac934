"""Feature-level alignment between modalities: project each side's instance
features into a shared latent space, pair up spatially coincident points with
a radius-bounded nearest-neighbor match, and pull the primary side's shared
features toward the auxiliary side's.

The auxiliary features are always treated as constants here: the auxiliary
network stays frozen while the primary one learns to imitate it, so gradients
flow into the primary projection only.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .autodiff import (
    MlpSpec, ParamStore, Tensor, constant, gather_rows, init_mlp, mlp_forward,
    rows_l2norm, trace_event,
)
from .errors import ContractError, ShapeMismatchError

DEFAULT_MATCH_RADIUS = 1.0
SIDES = ("primary", "auxiliary")


@dataclass(frozen=True)
class ProjectionConfig:
    """Widths of the two projection MLPs; both land in the same shared width."""

    primary_width: int
    auxiliary_width: int
    shared_width: int

    def __post_init__(self):
        if min(self.primary_width, self.auxiliary_width, self.shared_width) < 1:
            raise ContractError("projection widths must be positive")

    def spec(self, which: str) -> MlpSpec:
        if which not in SIDES:
            raise ContractError(f"which must be one of {SIDES}, got {which!r}")
        w = self.primary_width if which == "primary" else self.auxiliary_width
        f = self.shared_width
        return MlpSpec((w, f, f, f), final_activation="none")


@dataclass
class MatchMatrix:
    """Binary primary-to-auxiliary assignment; at most one 1 per row."""

    pm: np.ndarray  # (N, M) float 0/1
    n_pairs: int

    def __post_init__(self):
        rows = self.pm.sum(axis=1)
        if ((rows != 0) & (rows != 1)).any():
            raise ContractError("match matrix rows must sum to 0 or 1")
        if self.n_pairs != int(self.pm.sum()):
            raise ContractError("n_pairs disagrees with the matrix")


def init_projection(store: ParamStore, prefix: str, cfg: ProjectionConfig) -> None:
    init_mlp(store, f"{prefix}.pri", cfg.spec("primary"))
    init_mlp(store, f"{prefix}.aux", cfg.spec("auxiliary"))


def project_features(
    features: Tensor, which: str, cfg: ProjectionConfig, store: ParamStore, prefix: str
) -> Tensor:
    """Map one side's instance features into the shared space."""
    sub = "pri" if which == "primary" else "aux"
    return mlp_forward(store, f"{prefix}.{sub}", cfg.spec(which), features)


def selective_match(
    primary_positions: np.ndarray,
    auxiliary_positions: np.ndarray,
    radius: float = DEFAULT_MATCH_RADIUS,
) -> MatchMatrix:
    """For each primary point, a single 1 at the nearest auxiliary point
    within radius (ties to the lowest auxiliary index), else an empty row."""
    if radius <= 0:
        raise ContractError("match radius must be positive")
    n = primary_positions.shape[0]
    m = auxiliary_positions.shape[0]
    nn = geo.radius_nn(primary_positions, auxiliary_positions, radius)
    pm = np.zeros((n, m))
    hit = nn >= 0
    pm[np.flatnonzero(hit), nn[hit]] = 1.0
    # Pairing is a discrete decision; gradient checks must skip coordinates
    # that re-paired the points.
    trace_event(pm)
    return MatchMatrix(pm=pm, n_pairs=int(hit.sum()))


def match_pairs(
    match: MatchMatrix, primary_positions: np.ndarray, auxiliary_positions: np.ndarray
) -> list[dict]:
    """Diagnostic view of the matched pairs: [{"pri", "aux", "dist"}, ...]."""
    out = []
    for i, j in zip(*np.nonzero(match.pm)):
        d = float(np.linalg.norm(primary_positions[i] - auxiliary_positions[j]))
        out.append({"pri": int(i), "aux": int(j), "dist": d})
    return out


def feature_matching_loss(h: Tensor, h_aux, match: MatchMatrix) -> Tensor:
    """Mean Euclidean distance between matched shared features.

    h_aux may be a Tensor or an array; it is used as a constant target either
    way. Zero pairs yield a zero loss with zero gradients.
    """
    aux_data = h_aux.data if isinstance(h_aux, Tensor) else np.asarray(h_aux, dtype=np.float64)
    if h.data.shape[1] != aux_data.shape[1]:
        raise ShapeMismatchError(
            f"shared widths differ: {h.data.shape[1]} vs {aux_data.shape[1]}"
        )
    if match.pm.shape != (h.data.shape[0], aux_data.shape[0]):
        raise ShapeMismatchError("match matrix does not cover the feature rows")
    if match.n_pairs == 0:
        return constant(0.0)
    rows, cols = np.nonzero(match.pm)
    diff = gather_rows(h, rows) - constant(aux_data[cols])
    return rows_l2norm(diff).sum() / match.n_pairs
