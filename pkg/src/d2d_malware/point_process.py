"""Device placement: a linear Poisson process on every street (a Cox process in the plane)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .street_system import StreetPoint, StreetSystem, nearest_street_point

PLACEMENT_MODES = ("nearest-street", "nearest-device")


@dataclass(frozen=True)
class Placement:
    """Susceptible devices as parallel ``edges``/``offsets`` arrays plus the infected origin.

    ``origin_index`` is the agent id of the initially infected device: ``n`` (an
    added agent) in ``nearest-street`` mode, or the converted device's index.
    """

    edges: np.ndarray
    offsets: np.ndarray
    origin: StreetPoint
    origin_index: int
    theta: float

    @property
    def n_agents(self) -> int:
        return len(self.edges)


def sample_devices(S: StreetSystem, theta: float, rng: np.random.Generator):
    """Draw ``Poisson(theta * L)`` uniform points on each edge of length ``L``.

    Returns ``(edges, offsets)`` ordered by edge id.
    """
    if theta < 0:
        raise ValueError(f"theta must be non-negative, got {theta}")
    counts = rng.poisson(theta * S.lengths)
    edges = np.repeat(np.arange(S.n_edges, dtype=np.int64), counts)
    offsets = rng.uniform(0.0, 1.0, size=len(edges)) * S.lengths[edges]
    return edges, offsets


def place_initial_infected(
    S: StreetSystem, devices: tuple[np.ndarray, np.ndarray], mode: str = "nearest-street"
) -> tuple[StreetPoint, int | None]:
    """Locate the initially infected device near the window centre.

    Returns the street point and, in ``nearest-device`` mode, the index of the
    converted device (``None`` when a new device is added).
    """
    if S.n_edges == 0:
        raise ValueError("empty street system")
    center = np.array([S.H / 2, S.H / 2])
    if mode == "nearest-street":
        return nearest_street_point(S, center), None
    if mode == "nearest-device":
        edges, offsets = devices
        if len(edges) == 0:
            raise ValueError("nearest-device mode needs at least one device")
        d = np.hypot(*(S.xy(edges, offsets) - center).T)
        i = int(np.argmin(d))
        return S.point(int(edges[i]), float(offsets[i])), i
    raise ValueError(f"unknown placement mode {mode!r}; expected one of {PLACEMENT_MODES}")


def place_agents(
    S: StreetSystem, theta: float, rng: np.random.Generator, mode: str = "nearest-street"
) -> Placement:
    edges, offsets = sample_devices(S, theta, rng)
    origin, converted = place_initial_infected(S, (edges, offsets), mode)
    if converted is None:
        edges = np.append(edges, origin.edge)
        offsets = np.append(offsets, origin.offset)
        converted = len(edges) - 1
    return Placement(edges, offsets, origin, converted, theta)
