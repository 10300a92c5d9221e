"""Real-time adaptive pooling (RAP) planning.

Given the sampling rate, the kernel sizes of the downsampling pooling stages
and the online task (window length ``T_w``, update frequency ``f_u``), derive
the kernel and stride of every pooling layer so that the final pooling layer
slides a ``T_w``-long window with a hop of ``1/f_u`` seconds over the
intermediate feature sequence. The plan has no learnable parameters.

All arithmetic goes through :class:`fractions.Fraction`, so divisibility checks
are exact and never silently floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import DomainError, IncompatibleTaskError, IndexOutOfRangeError


def _frac(value: float | int | Fraction) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    # decimal literals such as 4.75 or 0.0625 are recovered exactly
    return Fraction(repr(float(value)))


def _as_number(f: Fraction) -> int | float:
    return int(f) if f.denominator == 1 else float(f)


@dataclass(frozen=True)
class OnlineTaskSpec:
    """Requirements of the online decoding task.

    Attributes
    ----------
    window_length : float
        ``T_w`` in seconds.
    update_frequency : float
        ``f_u`` in Hz.
    trial_length : float, optional
        ``T_t`` in seconds; needed for window counts and the gain.
    """

    window_length: float
    update_frequency: float
    trial_length: float | None = None

    def __post_init__(self) -> None:
        if not self.window_length > 0:
            raise DomainError(f"window length must be positive, got {self.window_length}")
        if not self.update_frequency > 0:
            raise DomainError(f"update frequency must be positive, got {self.update_frequency}")
        if self.trial_length is not None and self.trial_length < self.window_length:
            raise DomainError(
                f"trial length {self.trial_length} s is shorter than the window length {self.window_length} s"
            )

    def require_trial_length(self) -> float:
        if self.trial_length is None:
            raise DomainError("this computation needs the trial length")
        return self.trial_length


@dataclass(frozen=True)
class RapPlan:
    """Kernel sizes and strides of all ``P`` pooling layers.

    The first ``P-1`` layers downsample (kernel equals stride); the last one
    extracts the sliding windows.
    """

    kernel_sizes: tuple[int, ...]
    strides: tuple[int, ...]
    intermediate_frequency: float
    sampling_frequency: float

    @property
    def pooling_layer_count(self) -> int:
        return len(self.kernel_sizes)

    @property
    def downsampling_kernels(self) -> tuple[int, ...]:
        return self.kernel_sizes[:-1]

    @property
    def downsampling_factor(self) -> int:
        return math.prod(self.downsampling_kernels)

    @property
    def window_kernel(self) -> int:
        return self.kernel_sizes[-1]

    @property
    def window_stride(self) -> int:
        return self.strides[-1]

    def output_positions(self, n_samples: int) -> int:
        """Number of window positions emitted for an input of ``n_samples``.

        Returns 0 when the input is shorter than one window; raises when the
        length does not respect the downsampling grid.
        """
        if n_samples % self.downsampling_factor:
            raise DomainError(
                f"input length {n_samples} is not a multiple of the downsampling factor {self.downsampling_factor}"
            )
        m = n_samples // self.downsampling_factor
        if m < self.window_kernel:
            return 0
        return (m - self.window_kernel) // self.window_stride + 1

    def to_dict(self) -> dict:
        return {
            "k": list(self.kernel_sizes),
            "s": list(self.strides),
            "f_inter": self.intermediate_frequency,
        }


def plan_rap(
    sampling_frequency: float,
    downsampling_kernels: Sequence[int],
    task: OnlineTaskSpec,
) -> RapPlan:
    """Derive the pooling plan for a model and an online task.

    Parameters
    ----------
    sampling_frequency : float
        ``f_s`` of the model input in Hz.
    downsampling_kernels : sequence of int
        Kernel (= stride) of each of the first ``P-1`` pooling layers; empty for
        a single-pooling-layer model, where ``f_inter = f_s``.
    task : OnlineTaskSpec

    Raises
    ------
    IncompatibleTaskError
        If ``f_inter`` is not a positive integer multiple of ``f_u`` or the final
        kernel/stride are not integers. The message names the compatible
        update frequencies.
    """
    fs = _frac(sampling_frequency)
    if fs <= 0:
        raise DomainError(f"sampling frequency must be positive, got {sampling_frequency}")
    kernels = tuple(int(k) for k in downsampling_kernels)
    if any(k < 1 or k != kk for k, kk in zip(kernels, downsampling_kernels)):
        raise DomainError(f"downsampling kernels must be positive integers, got {list(downsampling_kernels)}")
    f_inter = fs / math.prod(kernels)
    fu = _frac(task.update_frequency)
    tw = _frac(task.window_length)

    if f_inter.denominator != 1:
        raise IncompatibleTaskError(
            f"f_s={_as_number(fs)} Hz is not divisible by the downsampling product {math.prod(kernels)} "
            f"(f_inter={float(f_inter):g} Hz is not an integer)"
        )
    ratio = f_inter / fu
    if ratio.denominator != 1:
        divisors = [d for d in range(1, int(f_inter) + 1) if int(f_inter) % d == 0]
        smallest = next((d for d in divisors if d >= fu), None)
        hint = f"; smallest compatible f_u >= {float(fu):g} Hz is {smallest} Hz" if smallest else ""
        raise IncompatibleTaskError(
            f"f_inter={_as_number(f_inter)} Hz is not an integer multiple of f_u={float(fu):g} Hz{hint}"
        )
    k_last = f_inter * tw
    if k_last.denominator != 1 or k_last < 1:
        raise IncompatibleTaskError(
            f"final kernel f_inter*T_w = {float(k_last):g} is not a positive integer"
        )
    return RapPlan(
        kernel_sizes=kernels + (int(k_last),),
        strides=kernels + (int(ratio),),
        intermediate_frequency=_as_number(f_inter),
        sampling_frequency=_as_number(fs),
    )


def windows_per_trial(task: OnlineTaskSpec) -> int:
    """``N_w = (T_t - T_w) * f_u + 1``, flooring a trailing partial hop."""
    tt = _frac(task.require_trial_length())
    hops = (tt - _frac(task.window_length)) * _frac(task.update_frequency)
    return math.floor(hops) + 1


def computational_gain(task: OnlineTaskSpec) -> float:
    """Sample-count ratio of per-window decoding over joint decoding, ``(T_w/T_t) * N_w``."""
    tt = _frac(task.require_trial_length())
    return float(_frac(task.window_length) / tt * windows_per_trial(task))


def window_sample_range(j: int, task: OnlineTaskSpec, sampling_frequency: float) -> tuple[int, int]:
    """Sample interval ``[start, end)`` of window ``j`` inside a trial."""
    fs = _frac(sampling_frequency)
    hop = fs / _frac(task.update_frequency)
    if hop.denominator != 1:
        raise DomainError(f"f_s={float(fs):g} Hz is not divisible by f_u={task.update_frequency} Hz")
    length = fs * _frac(task.window_length)
    if length.denominator != 1:
        raise DomainError("window length is not a whole number of samples")
    if task.trial_length is not None:
        n_w = windows_per_trial(task)
        if not 0 <= j < n_w:
            raise IndexOutOfRangeError(f"window index {j} outside [0, {n_w})")
    elif j < 0:
        raise IndexOutOfRangeError(f"window index {j} is negative")
    start = j * int(hop)
    return start, start + int(length)


def samples(seconds: float, sampling_frequency: float) -> int:
    """Round-half-up conversion of a duration to a sample count."""
    return math.floor(_frac(seconds) * _frac(sampling_frequency) + Fraction(1, 2))
