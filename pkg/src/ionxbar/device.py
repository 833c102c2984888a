"""Single-device model of the ion-intercalation memristor.

Programming drives Li+ ions across the electrolyte into a polymer buffer
layer; the intercalated charge ``q`` sets the buffer conductance. The read
electrodes sit on an axis orthogonal to the programming field, so reading
never moves charge.

Charge dynamics under a programming voltage ``v_p``::

    I_p    = e * c0 * mu_ion * (v_p / d) * (l_x * l_z)
    dq/dt  = I_p * (1 - q / q_max)      v_p > 0   (site filling)
    dq/dt  = I_p * (q / q_max)          v_p < 0   (extraction)

Conductance seen by the read electrodes::

    G(q) = g0 + mu_e * q / (l_x * l_y)

The ideal (baseline-free) model gives the flux/charge relation
``phi(q) = K ln q + C'`` and memristance ``M(q) = K / q``.

All functions are pure: states are frozen dataclasses and every update
returns a new instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ELEMENTARY_CHARGE = 1.602176634e-19

#: Largest charge increment allowed in one integration sub-step, as a
#: fraction of ``q_max``.
MAX_STEP_FRACTION = 1e-3
# batches up to this size are integrated element by element in plain floats
_SCALAR_BATCH = 8

HRS_OHM = 1.0e6
LRS_OHM = 550.0e3
PROGRAMMING_VOLTAGE = 3.6
RETENTION_WINDOW_S = 48 * 3600.0
#: Relaxation constant for which q(48 h) / q(0) = 1/20.
CALIBRATED_TAU_RETENTION = RETENTION_WINDOW_S / math.log(20.0)
#: Time constant q_max / I_p(3.6 V) of the calibrated preset.
CALIBRATED_PROGRAMMING_TAU = 60.0


@dataclass(frozen=True)
class PhysicalConstants:
    e: float = ELEMENTARY_CHARGE

    def __post_init__(self):
        if not self.e > 0:
            raise ValueError("elementary charge must be positive")


@dataclass(frozen=True)
class DeviceGeometry:
    """Cell geometry in metres.

    ``d`` is the cathode-to-anode distance, ``l_x`` the readout electrode
    spacing, ``l_y`` the polymer layer thickness and ``l_z`` the readout
    electrode height.
    """

    d: float
    l_x: float
    l_y: float
    l_z: float

    def __post_init__(self):
        for name in ("d", "l_x", "l_y", "l_z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"geometry.{name} must be > 0")

    @property
    def area(self) -> float:
        """Cross-section ``l_x * l_z`` crossed by the programming current."""
        return self.l_x * self.l_z


@dataclass(frozen=True)
class MaterialParams:
    c0: float
    mu_ion: float
    mu_e: float
    g0: float
    q_max: float
    tau_retention: float = 0.0

    def __post_init__(self):
        for name in ("c0", "mu_ion", "mu_e", "q_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"material.{name} must be > 0")
        if not self.g0 >= 0:
            raise ValueError("material.g0 must be >= 0")
        if not self.tau_retention >= 0:
            raise ValueError("material.tau_retention must be >= 0")


@dataclass(frozen=True)
class DeviceParams:
    geometry: DeviceGeometry
    material: MaterialParams
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    # |v_p| below this leaves q untouched; 0 is the threshold-less worst case
    v_threshold: float = 0.0

    def __post_init__(self):
        if not self.v_threshold >= 0:
            raise ValueError("v_threshold must be >= 0")

    @property
    def q_max(self) -> float:
        return self.material.q_max

    @property
    def ion_conductance(self) -> float:
        """Programming current per volt, ``e c0 mu_ion A / d`` (siemens)."""
        g = self.geometry
        m = self.material
        return self.constants.e * m.c0 * m.mu_ion * g.area / g.d

    @property
    def ohmic_constant(self) -> float:
        """``l_x l_y / mu_e``: resistance-charge product of the ionic term."""
        return self.geometry.l_x * self.geometry.l_y / self.material.mu_e

    @property
    def g_min(self) -> float:
        return conductance_of_charge(0.0, self)

    @property
    def g_max(self) -> float:
        return conductance_of_charge(self.q_max, self)

    def with_tau_retention(self, tau: float) -> "DeviceParams":
        return replace(self, material=replace(self.material, tau_retention=tau))

    def to_dict(self) -> dict:
        g, m = self.geometry, self.material
        return {
            "d": g.d,
            "l_x": g.l_x,
            "l_y": g.l_y,
            "l_z": g.l_z,
            "c0": m.c0,
            "mu_ion": m.mu_ion,
            "mu_e": m.mu_e,
            "g0": m.g0,
            "q_max": m.q_max,
            "tau_retention": m.tau_retention,
            "v_threshold": self.v_threshold,
            "e": self.constants.e,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceParams":
        return cls(
            geometry=DeviceGeometry(d=data["d"], l_x=data["l_x"], l_y=data["l_y"], l_z=data["l_z"]),
            material=MaterialParams(
                c0=data["c0"],
                mu_ion=data["mu_ion"],
                mu_e=data["mu_e"],
                g0=data["g0"],
                q_max=data["q_max"],
                tau_retention=data.get("tau_retention", 0.0),
            ),
            constants=PhysicalConstants(e=data.get("e", ELEMENTARY_CHARGE)),
            v_threshold=data.get("v_threshold", 0.0),
        )


def paper_calibrated(tau_retention: float = 0.0, v_threshold: float = 0.0) -> DeviceParams:
    """Preset anchored to the measured HRS (1 MOhm) and LRS (550 kOhm).

    The geometry, electrolyte concentration and capacity are nominal
    bench-cell values. The two mobilities are then solved for so that
    ``G(0) = 1 uS``, ``G(q_max) = 1/550 kOhm`` and ``q_max / I_p(3.6 V)``
    equals :data:`CALIBRATED_PROGRAMMING_TAU`.
    """
    geometry = DeviceGeometry(d=2e-3, l_x=1e-3, l_y=5e-5, l_z=2e-3)
    e = ELEMENTARY_CHARGE
    c0 = 1.0e27  # ~1.66 mol/L Li+
    q_max = 1.0e-4
    g0 = 1.0 / HRS_OHM
    i_p = q_max / CALIBRATED_PROGRAMMING_TAU
    mu_ion = i_p * geometry.d / (e * c0 * PROGRAMMING_VOLTAGE * geometry.area)
    mu_e = (1.0 / LRS_OHM - g0) * geometry.l_x * geometry.l_y / q_max
    material = MaterialParams(
        c0=c0, mu_ion=mu_ion, mu_e=mu_e, g0=g0, q_max=q_max, tau_retention=tau_retention
    )
    return DeviceParams(geometry=geometry, material=material, v_threshold=v_threshold)


PRESETS = {
    "paper-calibrated": paper_calibrated,
    "paper-calibrated-retention": lambda: paper_calibrated(tau_retention=CALIBRATED_TAU_RETENTION),
}


def preset(name: str) -> DeviceParams:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class DeviceState:
    q: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class DerivedModel:
    """Constants of the ideal flux/charge law ``phi(q) = K ln q + C'``."""

    K: float
    C_prime: float = 0.0

    @classmethod
    def from_params(cls, params: DeviceParams, read_current: float, v_p: float = PROGRAMMING_VOLTAGE):
        i_p = programming_current(params, v_p)
        if not (read_current > 0 and i_p > 0):
            raise ValueError("derived model needs positive read and programming currents")
        k = params.geometry.l_x * params.geometry.l_y * read_current / (params.material.mu_e * i_p)
        # integration constant of phi(t) taken as 0, so C' = -K ln I_p
        return cls(K=k, C_prime=-k * math.log(i_p))

    def phi(self, q: float) -> float:
        if not q > 0:
            raise ValueError("flux undefined for non-positive charge")
        return self.K * math.log(q) + self.C_prime


def programming_current(params: DeviceParams, v_p: float) -> float:
    return params.ion_conductance * v_p


def conductance_of_charge(q, params: DeviceParams):
    """Vectorised ``G(q)``; accepts scalars or arrays."""
    return params.material.g0 + params.material.mu_e * q / (params.geometry.l_x * params.geometry.l_y)


def charge_of_conductance(g, params: DeviceParams):
    """Inverse of :func:`conductance_of_charge`."""
    return (g - params.material.g0) * params.ohmic_constant


def conductance(state: DeviceState, params: DeviceParams) -> float:
    return conductance_of_charge(state.q, params)


def resistance(state: DeviceState, params: DeviceParams) -> float:
    return 1.0 / conductance(state, params)


def _drift(q, rate, q_max):
    # rate = signed I_p; insertion fills free sites, extraction drains held ions
    return np.where(rate > 0, rate * (1.0 - q / q_max), rate * (q / q_max))


def _substeps(rate, dt, q_max):
    return max(1, math.ceil(abs(rate) * dt / (MAX_STEP_FRACTION * q_max)))


def _integrate_one(q: float, rate: float, dt: float, q_max: float) -> float:
    # same operation sequence as the vectorised loop below, in plain floats
    if rate == 0 or dt == 0:
        return q
    n = _substeps(rate, dt, q_max)
    h = dt / n
    if rate > 0:
        f = lambda x: rate * (1.0 - x / q_max)  # noqa: E731
    else:
        f = lambda x: rate * (x / q_max)  # noqa: E731
    for _ in range(n):
        k1 = f(q)
        k2 = f(q + 0.5 * h * k1)
        k3 = f(q + 0.5 * h * k2)
        k4 = f(q + h * k3)
        q = min(max(q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0), q_max)
    return q


def integrate_charge(q, rate, dt, q_max: float):
    """Advance charges ``q`` under constant programming currents ``rate``.

    Classic RK4 with a per-element sub-step count chosen so that
    ``|rate| * h <= MAX_STEP_FRACTION * q_max``; since ``|dq/dt| <= |rate|``
    this bounds every sub-step's charge increment. Elements never share a
    step size, so a cell's result does not depend on which other cells are
    integrated alongside it (small batches take a scalar path that performs
    the same floating-point operations).
    """
    q = np.array(q, dtype=float, copy=True)
    rate = np.broadcast_to(np.asarray(rate, dtype=float), q.shape)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), q.shape)
    if np.any(dt < 0):
        raise ValueError("dt must be >= 0")
    if q.size <= _SCALAR_BATCH:
        flat = q.reshape(-1)
        for k, (r, d) in enumerate(zip(rate.reshape(-1), dt.reshape(-1))):
            flat[k] = _integrate_one(float(flat[k]), float(r), float(d), q_max)
        return flat.reshape(q.shape)
    moving = (rate != 0) & (dt > 0)
    n = np.zeros(q.shape, dtype=np.int64)
    n[moving] = np.maximum(1, np.ceil(np.abs(rate[moving]) * dt[moving] / (MAX_STEP_FRACTION * q_max)))
    h = np.where(moving, dt / np.maximum(n, 1), 0.0)
    for k in range(int(n.max(initial=0))):
        active = k < n
        k1 = _drift(q, rate, q_max)
        k2 = _drift(q + 0.5 * h * k1, rate, q_max)
        k3 = _drift(q + 0.5 * h * k2, rate, q_max)
        k4 = _drift(q + h * k3, rate, q_max)
        stepped = q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        q = np.where(active, np.minimum(np.maximum(stepped, 0.0), q_max), q)
    return q


def effective_rate(params: DeviceParams, v_p):
    """Signed programming current, zeroed where ``|v_p|`` is below threshold."""
    v_p = np.asarray(v_p, dtype=float)
    rate = params.ion_conductance * v_p
    if params.v_threshold > 0:
        rate = np.where(np.abs(v_p) < params.v_threshold, 0.0, rate)
    return rate


def program_step(state: DeviceState, params: DeviceParams, v_p: float, dt: float) -> DeviceState:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    q = integrate_charge(state.q, effective_rate(params, v_p), dt, params.q_max)
    return DeviceState(q=float(q), t=state.t + dt)


def relax_step(state: DeviceState, params: DeviceParams, dt: float) -> DeviceState:
    """Zero-bias hold; charge leaks out with time constant ``tau_retention``."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    tau = params.material.tau_retention
    q = state.q if tau == 0 else state.q * math.exp(-dt / tau)
    return DeviceState(q=q, t=state.t + dt)


def memristance(q: float, model: DerivedModel) -> float:
    if q == 0:
        raise ValueError("ideal memristance undefined at zero charge")
    if q < 0:
        raise ValueError("ideal memristance undefined for negative charge")
    return model.K / q


def memristance_rate(t: float, model: DerivedModel, i_p: float) -> float:
    """Time derivative of ``M(t) = K / (I_p t)`` under linear charging."""
    if not t > 0:
        raise ValueError("t must be > 0")
    return -model.K / (i_p * t * t)


def flux(q1: float, q2: float, model: DerivedModel) -> float:
    """Flux swept while the charge moves from ``q1`` to ``q2``."""
    if not (q1 > 0 and q2 > 0):
        raise ValueError("flux undefined for non-positive charge")
    return model.K * math.log(q2 / q1)
