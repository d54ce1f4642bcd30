"""Quantitative phase reconstruction from four phase-shifted interferograms.

The acquisition model per pixel is

    I_k = background + modulation * cos(g + k * shift_step),   k = 0..3,

where g is the phase gradient accumulated over the shear distance. For
the canonical shift step of pi/2 the gradient demodulates in closed form
as g = atan2(I4 - I2, I1 - I3); other steps use least-squares
demodulation. The gradient map is then integrated along the shear axis
by regularized inversion of the periodic forward-difference operator in
the Fourier domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .imagecore import RasterImage

_AXES = ("x", "y")


@dataclass(frozen=True)
class InterferogramStack:
    """Four phase-shifted intensity frames of one field."""

    frames: tuple
    shift_step_rad: float = math.pi / 2
    shear_axis: str = "x"
    shear_px: int = 1

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) != 4:
            raise ShapeError(f"expected exactly 4 frames, got {len(frames)}")
        dims = {(f.height, f.width) for f in frames}
        if len(dims) != 1:
            raise ShapeError(f"frame dims differ: {sorted(dims)}")
        if not 0.0 < self.shift_step_rad <= math.pi:
            raise ConfigError(f"shift_step_rad must be in (0, pi], got {self.shift_step_rad}")
        if self.shear_axis not in _AXES:
            raise ConfigError(f"shear_axis must be one of {_AXES}, got {self.shear_axis!r}")
        if int(self.shear_px) < 1:
            raise ConfigError(f"shear_px must be >= 1, got {self.shear_px}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "shear_px", int(self.shear_px))


@dataclass(frozen=True)
class GradientMap:
    """Demodulated phase gradient (radians per shear step) and fringe amplitude."""

    values: RasterImage
    amplitude: RasterImage


@dataclass(frozen=True)
class IntegrationConfig:
    regularization_eps: float = 1e-3
    zero_mean_output: bool = True

    def __post_init__(self):
        if not self.regularization_eps > 0:
            raise ConfigError(f"regularization_eps must be > 0, got {self.regularization_eps}")


def _wrap_pi(g: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]: atan2 can return exactly -pi."""
    return np.where(g <= -math.pi, g + 2 * math.pi, g)


def extract_phase_gradient(stack: InterferogramStack) -> GradientMap:
    """Demodulate a four-frame stack to a phase-gradient map.

    For shift_step_rad == pi/2 the closed form is used:

        g = atan2(I4 - I2, I1 - I3),  amplitude = hypot(I4 - I2, I1 - I3) / 2.

    Other steps solve the per-pixel least-squares system for
    (background, m*cos g, m*sin g). A step of exactly pi makes the sine
    component unobservable (rank-2 design); the minimum-norm solution is
    returned there.

    The recovered gradient is invariant under any positive affine
    transform applied identically to all four frames.
    """
    arrs = [f.pixels for f in stack.frames]
    if not all(np.all(np.isfinite(a)) for a in arrs):
        raise ShapeError("non-finite input frame")
    theta = stack.shift_step_rad
    if abs(theta - math.pi / 2) < 1e-12:
        s = arrs[3] - arrs[1]
        c = arrs[0] - arrs[2]
    else:
        # I_k = b + u1*cos(k*theta) - u2*sin(k*theta) with u1 = m*cos(g), u2 = m*sin(g)
        k = np.arange(4.0)
        design = np.stack([np.ones(4), np.cos(k * theta), -np.sin(k * theta)], axis=1)
        pinv = np.linalg.pinv(design)  # (3, 4)
        stacked = np.stack(arrs, axis=0).reshape(4, -1)
        coef = pinv @ stacked
        shape = arrs[0].shape
        c = coef[1].reshape(shape)
        s = coef[2].reshape(shape)
        c = 2.0 * c  # match the closed form's scale so amplitude = modulation depth
        s = 2.0 * s
    g = _wrap_pi(np.arctan2(s, c))
    amp = 0.5 * np.hypot(s, c)
    ref = stack.frames[0]
    return GradientMap(
        values=RasterImage(g, ref.pixel_size_um, "radians"),
        amplitude=RasterImage(amp, ref.pixel_size_um, "intensity_au"),
    )


def integrate_gradient(grad: GradientMap, shear_axis: str = "x", shear_px: int = 1,
                       cfg: IntegrationConfig | None = None) -> RasterImage:
    """Integrate a phase-gradient map along the shear axis.

    Solves phi(x + s) - phi(x) = g(x) per row in the Fourier domain:

        Phi(k) = G(k) * conj(D(k)) / (|D(k)|^2 + eps),  D(k) = exp(2*pi*i*k*s/N) - 1,

    with the DC bin pinned to zero. Boundary handling is periodic
    (FFT-native); callers should crop margins if edge ringing matters.
    When ``zero_mean_output`` the result mean is subtracted exactly.
    """
    if cfg is None:
        cfg = IntegrationConfig()
    if shear_axis not in _AXES:
        raise ConfigError(f"shear_axis must be one of {_AXES}, got {shear_axis!r}")
    g = grad.values.pixels
    if shear_axis == "y":
        g = g.T
    n = g.shape[1]
    freq = np.fft.fftfreq(n)
    d = np.exp(2j * math.pi * freq * shear_px) - 1.0
    spec = np.fft.fft(g, axis=1)
    denom = np.abs(d) ** 2 + cfg.regularization_eps
    phi_spec = spec * np.conj(d)[None, :] / denom[None, :]
    phi_spec[:, 0] = 0.0
    phi = np.fft.ifft(phi_spec, axis=1).real
    if shear_axis == "y":
        phi = phi.T
    if cfg.zero_mean_output:
        phi = phi - phi.mean()
    src = grad.values
    return RasterImage(phi, src.pixel_size_um, "radians")


def reconstruct_phase(stack: InterferogramStack, cfg: IntegrationConfig | None = None) -> RasterImage:
    """Full reconstruction: demodulate then integrate. Output units: radians."""
    grad = extract_phase_gradient(stack)
    return integrate_gradient(grad, stack.shear_axis, stack.shear_px, cfg)


def synthesize_frames(phase: RasterImage, background: float, modulation: float,
                      shear_axis: str = "x", shear_px: int = 1,
                      shift_step_rad: float = math.pi / 2) -> InterferogramStack:
    """Render four interferogram frames from a known phase map (test oracle).

    g is the periodic forward difference of the phase over ``shear_px``
    along the shear axis; I_k = background + modulation*cos(g + k*step).
    background >= modulation keeps intensities nonnegative.
    """
    if not modulation > 0:
        raise ConfigError(f"modulation must be > 0, got {modulation}")
    if background < modulation:
        raise ConfigError("background must be >= modulation (nonnegative intensity)")
    axis = 1 if shear_axis == "x" else 0
    phi = phase.pixels
    g = np.roll(phi, -shear_px, axis=axis) - phi
    frames = tuple(
        RasterImage(background + modulation * np.cos(g + k * shift_step_rad),
                    phase.pixel_size_um, "intensity_au")
        for k in range(4)
    )
    return InterferogramStack(frames, shift_step_rad, shear_axis, shear_px)
